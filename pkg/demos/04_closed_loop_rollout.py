"""Closed-loop simulation: a world model and a planner interacting.

Every replan interval the planner predicts the ego's next steps and the
world model predicts everybody else (agents, validity, traffic lights)
from the same committed history; neither sees the other's in-flight
prediction. Here both roles are IDM controllers so the demo runs in
seconds; swap in a trained checkpoint for the learned world model.

Run:  python demos/04_closed_loop_rollout.py
"""

import numpy as np

from difftraffic import generate_map, simulate_ground_truth, WorldScriptConfig
from difftraffic.rollout import IDMController, RolloutConfig, rollout
from difftraffic.render import draw_frame, uniform_frame_steps

roadgraph = generate_map(2, 2, 120.0, seed=0)
init = simulate_ground_truth(roadgraph, WorldScriptConfig(seed=11), 33)

cfg = RolloutConfig(n_rollout_steps=300, n_replan_steps=40,
                    world_seed=1, planner_seed=2)
world = IDMController(roadgraph, seed=1, name="idm-world")
planner = IDMController(roadgraph, seed=2, name="idm-planner")
trace = rollout(world, planner, init, roadgraph, cfg)

print(f"rolled out {trace.n_steps} steps in {len(trace.provenance)} intervals")
print("provenance of the first interval:", trace.provenance[0])
ego_dist = np.hypot(np.diff(trace.x[0]), np.diff(trace.y[0])).sum()
print(f"ego travelled {ego_dist:.0f} m")
for step in uniform_frame_steps(trace.n_steps, 3):
    draw_frame(trace, roadgraph, step, path=f"demo_rollout_{step:03d}.png")
print("wrote demo_rollout_*.png")

# the IDM world model freezes validity: nobody enters or exits
changes = np.abs(np.diff(trace.valid[:, cfg.history_len:].astype(int))).sum()
print(f"validity changes after the initial window: {changes} "
      "(an IDM world cannot spawn or remove agents)")
