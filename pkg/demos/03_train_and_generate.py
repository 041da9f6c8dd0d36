"""Train a small scene denoiser and generate scenes unconditionally.

This is a scaled-down version of the benchmark recipe: a few dozen
synthetic scenarios, a small axial-attention denoiser, and a comparison
of the generated validity statistics against the data. Takes a few
minutes on a laptop CPU.

Run:  python demos/03_train_and_generate.py
"""

import numpy as np
import torch

from difftraffic import generate_map, simulate_ground_truth, WorldScriptConfig
from difftraffic.benchmark import DURATION_EDGES, validity_durations
from difftraffic.diffusion import ClipMode
from difftraffic.metrics import Histogram, count_edges, js_divergence
from difftraffic.model import DenoiserConfig, SceneDenoiser
from difftraffic.tensors import Conditioning
from difftraffic.training import (TrainConfig, WindowDataset, generate,
                                  init_train_state, train)
from difftraffic.world import export_windows

roadgraph = generate_map(2, 2, 120.0, seed=0)
windows = []
for i in range(16):
    cfg = WorldScriptConfig(seed=100 + i, mean_initial_agents=16.0,
                            spawn_rate=0.15, parked_per_lot=1.5)
    sc = simulate_ground_truth(roadgraph, cfg, 121)
    windows.extend(export_windows(sc, roadgraph, stride=30))
print(f"{len(windows)} training windows")

mcfg = DenoiserConfig(hidden_dim=64, n_layers=2, n_heads=4,
                      n_context_latents=16)
torch.manual_seed(0)
model = SceneDenoiser(mcfg)
dataset = WindowDataset.build(
    [(w.multi_tensor, roadgraph, w.ego_pose) for w in windows], mcfg)
tcfg = TrainConfig(steps=600, batch_size=4, lr=1e-3, seed=0, log_every=100)
state = train(init_train_state(model, tcfg), dataset, tcfg, log=print)

# unconditional scene generation: empty inpainting mask, map context only
n = 16
shapes = {"agents": (n, mcfg.e_agents, mcfg.n_timesteps, 12),
          "lights": (n, mcfg.e_lights, mcfg.n_timesteps, 13)}
context, _ = model.encode_context(roadgraph, windows[0].ego_pose)
out = generate(model, Conditioning.empty(shapes), context, n_steps=16,
               mode=ClipMode.SOFT, rng=np.random.default_rng(7))

data_durs, data_counts = validity_durations(
    np.stack([w.multi_tensor.agents.data for w in windows]))
gen_durs, gen_counts = validity_durations(out["agents"])
dur_jsd = js_divergence(Histogram.from_values(gen_durs, DURATION_EDGES).prob(),
                        Histogram.from_values(data_durs, DURATION_EDGES).prob())
cnt_jsd = js_divergence(
    Histogram.from_values(gen_counts, count_edges(32)).prob(),
    Histogram.from_values(data_counts, count_edges(32)).prob())
print(f"generated {n} scenes: mean duration {np.mean(gen_durs):.1f} steps "
      f"(data {np.mean(data_durs):.1f}), mean agents {np.mean(gen_counts):.1f} "
      f"(data {np.mean(data_counts):.1f})")
print(f"validity-duration JSD {dur_jsd:.3f}, agent-count JSD {cnt_jsd:.3f} "
      "(these improve with the full benchmark recipe)")
