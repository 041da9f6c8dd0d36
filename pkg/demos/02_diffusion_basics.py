"""The diffusion machinery on its own, without any neural network.

Shows the variance-preserving cosine schedule, v-prediction algebra, the
sparse-tensor loss weights, the four inference-time clipping modes, and
the ancestral sampler driven by an oracle denoiser that has memorized a
single datapoint.

Run:  python demos/02_diffusion_basics.py
"""

import numpy as np

from difftraffic.diffusion import (ClipMode, build_loss_weight, clip_scene,
                                   forward_noise, sample, schedule, v_target,
                                   x_from_v)
from difftraffic.tensors import Conditioning

for t in (0.0, 0.25, 0.5, 0.75, 1.0):
    a, s = schedule(t)
    print(f"t={t:.2f}: alpha={a:.4f} sigma={s:.4f} (alpha^2+sigma^2={a*a+s*s:.12f})")

rng = np.random.default_rng(0)
x = rng.uniform(-1, 1, (4, 8, 5))
eps = rng.standard_normal(x.shape)
z = forward_noise(x, 0.6, eps)
v = v_target(x, eps, 0.6)
print("recovering x from (z, v):",
      np.allclose(x_from_v(z, v, 0.6), x, atol=1e-12))

# sparse-tensor loss weights: valid steps supervise everything, invalid
# steps only the validity channel
valid = np.zeros((1, 8), dtype=bool)
valid[0, 3:] = True  # an agent spawning at step 3
w = build_loss_weight(valid, 5)
print("loss weight row (validity channel is last):")
print(w[0].astype(int))

# the clipping modes act on the decoded validity confidence
x_hat = np.full((1, 1, 5), 0.8)
x_hat[..., -1] = 0.2  # validity confidence M = 0.6
for mode in ClipMode:
    out = clip_scene(x_hat, mode)
    print(f"{mode.value:>13}: values {out[0, 0, :-1].round(2)} "
          f"validity {out[0, 0, -1]:+.2f}")

# ancestral sampling with an oracle denoiser returns the memorized scene
target = {"agents": rng.uniform(-1, 1, (3, 8, 5))}


def oracle(z_t, t):
    alpha, sigma = schedule(t)
    return {k: (alpha * z_t[k] - target[k]) / sigma for k in z_t}


out = sample(oracle, Conditioning.empty({"agents": target["agents"].shape}),
             {"agents": target["agents"].shape}, n_steps=16,
             mode=ClipMode.NONE, rng=np.random.default_rng(1))
print("sampler recovered the memorized scene:",
      np.allclose(out["agents"], target["agents"], atol=1e-5))
