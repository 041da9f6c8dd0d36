"""Variance-preserving alpha-cosine diffusion with v-prediction.

All tensor functions accept numpy arrays or torch tensors; diffusion
times are plain floats in [0, 1]. The ancestral sampler operates on
dicts mapping tensor names to arrays so the agent and light tensors are
denoised jointly.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np

from .tensors import decompose, validity_to_channel


class ClipMode(Enum):
    SOFT = "soft"
    HARD = "hard"
    HARD_VALIDITY = "hard-validity"
    NONE = "none"


def schedule(t: float):
    """alpha-cosine schedule: t in [0, 1] -> (alpha_t, sigma_t)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"diffusion time {t} outside [0, 1]")
    return math.cos(math.pi * t / 2.0), math.sin(math.pi * t / 2.0)


def forward_noise(x, t: float, eps):
    """Noisy tensor z_t = alpha_t x + sigma_t eps."""
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {eps.shape}")
    alpha, sigma = schedule(t)
    return alpha * x + sigma * eps


def v_target(x, eps, t: float):
    """Prediction target v_t = alpha_t eps - sigma_t x."""
    alpha, sigma = schedule(t)
    return alpha * eps - sigma * x


def x_from_v(z_t, v_hat, t: float):
    """Recover the denoised estimate: x_hat = alpha_t z_t - sigma_t v_hat."""
    alpha, sigma = schedule(t)
    return alpha * z_t - sigma * v_hat


def transition(t: float, s: float):
    """Markov transition scale/variance from time s to t (t > s).

    Returns (alpha_ts, sigma_ts_sq) with alpha_ts = alpha_t / alpha_s and
    sigma_ts^2 = sigma_t^2 - alpha_ts^2 sigma_s^2 >= 0.
    """
    if t <= s:
        raise ValueError(f"transition requires t > s, got t={t}, s={s}")
    alpha_t, sigma_t = schedule(t)
    alpha_s, sigma_s = schedule(s)
    if alpha_s == 0.0:
        raise ValueError("transition undefined at s=1 (alpha_s = 0)")
    alpha_ts = alpha_t / alpha_s
    sigma_ts_sq = sigma_t**2 - alpha_ts**2 * sigma_s**2
    return alpha_ts, max(sigma_ts_sq, 0.0)


def _randn_like(x, rng):
    if isinstance(x, np.ndarray):
        return rng.standard_normal(x.shape)
    import torch

    return torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)


def denoise_step(z_t, x_hat, t: float, s: float, rng):
    """One ancestral step: sample z_s ~ q(z_s | z_t, x_hat).

    The posterior mean is (alpha_ts sigma_s^2 / sigma_t^2) z_t +
    (alpha_s sigma_ts^2 / sigma_t^2) x_hat with variance
    sigma_ts^2 sigma_s^2 / sigma_t^2; at s=0 it collapses to x_hat exactly.
    """
    alpha_ts, sigma_ts_sq = transition(t, s)
    alpha_s, sigma_s = schedule(s)
    _, sigma_t = schedule(t)
    mean = (alpha_ts * sigma_s**2 / sigma_t**2) * z_t + (
        alpha_s * sigma_ts_sq / sigma_t**2) * x_hat
    var = sigma_ts_sq * sigma_s**2 / sigma_t**2
    if var <= 0.0:
        return mean
    return mean + math.sqrt(var) * _randn_like(mean, rng)


def build_loss_weight(validity: np.ndarray, n_channels: int):
    """Loss weights from ground-truth validity: (E, T) bool -> (E, T, D).

    Valid steps supervise every channel; invalid steps supervise only the
    validity channel.
    """
    valid = np.asarray(validity, dtype=bool)
    w = np.zeros(valid.shape + (n_channels,))
    w[valid] = 1.0
    w[..., -1] = 1.0
    return w


def masked_loss(v_hat, v_tgt, w):
    """Masked squared error, averaged over every cell of the tensor."""
    if not (v_hat.shape == v_tgt.shape == w.shape):
        raise ValueError("masked_loss shape mismatch")
    r = (v_hat - v_tgt) ** 2 * w
    if isinstance(r, np.ndarray):
        return float(r.mean())
    return r.mean()


def multi_masked_loss(triples):
    """Joint loss over several tensors: total masked SSE / total cell count.

    ``triples`` is an iterable of (v_hat, v_tgt, w). Torch-only (used in
    training where gradients must flow).
    """
    import torch

    sse = 0.0
    n = 0
    for v_hat, v_tgt, w in triples:
        sse = sse + (((v_hat - v_tgt) ** 2) * w).sum()
        n += v_hat.numel()
    return sse / n


def clip_scene(x_hat, mode: ClipMode):
    """Inference-time clipping of one denoised scene tensor.

    SOFT multiplies the value channels by the decoded validity confidence
    and clips the raw validity channel into [-1, 1]. HARD snaps validity
    to +-1 at the 0.5 threshold (ties valid). HARD_VALIDITY additionally
    zeroes the value channels of invalid steps. NONE is identity.
    """
    if mode is ClipMode.NONE:
        return x_hat
    values, m = decompose(x_hat)
    if mode is ClipMode.SOFT:
        new_values = values * m[..., None]
        new_valid = x_hat[..., -1].clip(-1.0, 1.0)
    else:
        new_valid = (m >= 0.5) * 2.0 - 1.0
        if mode is ClipMode.HARD:
            new_values = values
        else:  # HARD_VALIDITY
            new_values = values * ((m >= 0.5)[..., None] * 1.0)
    from .tensors import compose

    return compose(new_values, new_valid)


def clip_multi(x_hat: dict, mode: ClipMode) -> dict:
    return {name: clip_scene(x, mode) for name, x in x_hat.items()}


def time_grid(n_steps: int):
    """Uniform descending sampler grid with n_steps+1 knots from 1 to 0."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    return [1.0 - i / n_steps for i in range(n_steps + 1)]


def sample(denoiser, conditioning, shapes: dict, n_steps: int, mode: ClipMode, rng):
    """Ancestral sampling of a multi-tensor from pure noise.

    ``denoiser(z: dict, t: float) -> dict`` predicts v for each tensor.
    At every grid time the denoised estimate is clipped, conditioned
    cells are overwritten with the inpainting values, and the result is
    re-noised to the next grid time. Returns the final estimates.
    """
    grid = time_grid(n_steps)
    z = {}
    proto = {name: np.zeros(shape) for name, shape in shapes.items()}
    for name, p in proto.items():
        z[name] = _randn_like(p, rng)
    masks = {n: np.asarray(m, dtype=bool) for n, m in conditioning.masks.items()}
    values = conditioning.values
    x_hat = None
    for i in range(n_steps):
        t, s = grid[i], grid[i + 1]
        v_hat = denoiser(z, t)
        x_hat = {}
        for name in z:
            if v_hat[name].shape != z[name].shape:
                raise ValueError(
                    f"denoiser output for '{name}' has shape {v_hat[name].shape}, "
                    f"expected {z[name].shape}")
            x = x_from_v(z[name], v_hat[name], t)
            x = clip_scene(x, mode)
            m = masks[name]
            x_hat[name] = np.where(m, values[name], np.asarray(x))
        if s > 0.0:
            z = {name: denoise_step(z[name], x_hat[name], t, s, rng)
                 for name in z}
        else:
            z = x_hat
    return x_hat
