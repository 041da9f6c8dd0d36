"""Build a grid city, run the scripted world, and look at what it produces.

The synthetic world stands in for real driving logs: agents enter at the
map boundary, follow random lane-graph routes under IDM car following,
stop at red lights, park in lots, and leave at the boundary. Visibility
from the ego (range + occlusion) gives every agent the spawn / occlusion /
disocclusion / removal validity structure the diffusion model will learn.

Run:  python demos/01_synthetic_world.py
"""

import numpy as np

from difftraffic import generate_map, simulate_ground_truth, WorldScriptConfig
from difftraffic.world import export_windows, validity_archetype_counts
from difftraffic.render import draw_frame, validity_raster

roadgraph = generate_map(rows=2, cols=2, block_size_m=120.0, seed=0)
print(f"map: {len(roadgraph.lanes)} lanes, {len(roadgraph.signal_heads)} "
      f"signal heads, {len(roadgraph.parking_polygons)} parking lots")

cfg = WorldScriptConfig(seed=3, mean_initial_agents=16.0, spawn_rate=0.15,
                        parked_per_lot=1.5)
scenario = simulate_ground_truth(roadgraph, cfg, steps=151)
print(f"scenario: {len(scenario.tracks)} agents over {scenario.n_steps} steps, "
      f"{scenario.agent_visible.mean():.0%} of agent-steps visible from the ego")
print("validity archetypes:", validity_archetype_counts(scenario.agent_visible))

# cut the scenario into ego-centered training windows
windows = export_windows(scenario, roadgraph, window_len=91, stride=30)
w = windows[0]
agents = w.multi_tensor.agents.data
print(f"window tensor: {agents.shape}, "
      f"{int((agents[..., -1] > 0).any(axis=1).sum())} agents present")

trace = scenario.to_trace()
draw_frame(trace, roadgraph, step=0, path="demo_world_frame.png")
validity_raster(trace, path="demo_world_validity.png")
print("wrote demo_world_frame.png and demo_world_validity.png")
