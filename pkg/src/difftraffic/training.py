"""Training loop for the scene denoiser, plus batched generation helpers.

Every source of randomness is owned by two explicit generators (numpy for
batching/masks, torch for noise), both checkpointed, so a resumed run
continues bit-for-bit where it stopped.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import diffusion
from .diffusion import ClipMode, build_loss_weight, multi_masked_loss
from .model import (DenoiserConfig, SceneDenoiser, roadgraph_points,
                    save_checkpoint, POINT_DIM)
from .tensors import BP_TASK, SCENEGEN_TASK, Conditioning, make_task_masks


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    bp_prob: float = 0.5
    history_len: int = 11
    ema_decay: float | None = None
    log_every: int = 50
    divergence_factor: float = 10.0
    divergence_patience: int = 100


class WindowDataset:
    """In-memory training windows with precomputed ego-frame map points."""

    def __init__(self, agents, lights, points):
        self.agents = agents    # list of (E_a, T, D_a) float32
        self.lights = lights    # list of (E_l, T, D_l) float32
        self.points = points    # list of (P_i, POINT_DIM) float32

    def __len__(self):
        return len(self.agents)

    @classmethod
    def build(cls, windows, cfg: DenoiserConfig):
        """From (MultiTensor, roadgraph, ego_pose_world) triples."""
        agents, lights, points = [], [], []
        for mt, roadgraph, ego_pose in windows:
            agents.append(mt.agents.data.astype(np.float32))
            lights.append(mt.lights.data.astype(np.float32))
            points.append(roadgraph_points(roadgraph, ego_pose, cfg).astype(np.float32))
        return cls(agents, lights, points)

    def batch(self, idx):
        a = np.stack([self.agents[i] for i in idx])
        l = np.stack([self.lights[i] for i in idx])
        p_max = max(len(self.points[i]) for i in idx)
        p_max = max(p_max, 1)
        pts = np.zeros((len(idx), p_max, POINT_DIM), dtype=np.float32)
        pad = np.ones((len(idx), p_max), dtype=bool)
        for row, i in enumerate(idx):
            n = len(self.points[i])
            pts[row, :n] = self.points[i]
            pad[row, :n] = False
        return a, l, pts, pad


def sample_training_masks(rng, shapes, bp_prob, history_len):
    """Pick a task and draw its inpainting masks for one example.

    Half the draws use the full task mask; the other half thin it with a
    random-strength control mask, which also covers the near-unconditional
    regime generation relies on.
    """
    keep = 1.0 if rng.random() < 0.5 else float(rng.random())
    if rng.random() < bp_prob:
        return make_task_masks(BP_TASK, shapes, history_len=history_len,
                               control_keep_prob=keep, rng=rng)
    frac = float(rng.random())
    return make_task_masks(SCENEGEN_TASK, shapes, context_fraction=frac,
                           control_keep_prob=keep, rng=rng)


@dataclass
class TrainState:
    model: SceneDenoiser
    optimizer: torch.optim.Optimizer
    rng_np: np.random.Generator
    rng_torch: torch.Generator
    step: int = 0
    loss_curve: list = field(default_factory=list)
    ema: dict | None = None


def init_train_state(model: SceneDenoiser, tcfg: TrainConfig) -> TrainState:
    optimizer = torch.optim.AdamW(model.parameters(), lr=tcfg.lr,
                                  weight_decay=tcfg.weight_decay)
    rng_np = np.random.default_rng(tcfg.seed)
    rng_torch = torch.Generator()
    rng_torch.manual_seed(tcfg.seed)
    ema = None
    if tcfg.ema_decay is not None:
        ema = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return TrainState(model, optimizer, rng_np, rng_torch, 0, [], ema)


def ema_model(state: TrainState) -> SceneDenoiser:
    """A copy of the model carrying the EMA weights (for evaluation)."""
    if state.ema is None:
        raise ValueError("EMA was not enabled for this run")
    clone = SceneDenoiser(state.model.cfg)
    clone.load_state_dict(state.ema)
    clone.eval()
    return clone


def resume_train_state(ckpt: dict, tcfg: TrainConfig) -> TrainState:
    """Rebuild a TrainState from a loaded checkpoint dict."""
    model = ckpt["model"]
    state = init_train_state(model, tcfg)
    if "opt_state_bytes" in ckpt:
        state.optimizer.load_state_dict(torch.load(io.BytesIO(ckpt["opt_state_bytes"])))
    if ckpt.get("rng_numpy_state"):
        state.rng_np.bit_generator.state = ckpt["rng_numpy_state"]
    if "rng_torch_state" in ckpt:
        state.rng_torch.set_state(ckpt["rng_torch_state"].to(torch.uint8))
    if "ema" in ckpt:
        state.ema = dict(ckpt["ema"])
    state.step = ckpt["step"]
    return state


def train(state: TrainState, dataset: WindowDataset, tcfg: TrainConfig,
          log=None) -> TrainState:
    """Run tcfg.steps optimizer updates, mixing BP and SceneGen tasks.

    Per step: sample a batch, draw per-example task masks, diffusion
    times t ~ U(0,1) and unit noise, then minimize the validity-masked
    v-prediction error. Deterministic given the state's generators.
    """
    model = state.model
    cfg = model.cfg
    shapes = cfg.shapes
    initial_loss = state.loss_curve[0] if state.loss_curve else None
    diverged_for = 0
    for _ in range(tcfg.steps):
        idx = state.rng_np.integers(0, len(dataset), size=tcfg.batch_size)
        a_np, l_np, pts, pad = dataset.batch(idx)
        masks_np = {"agents": [], "lights": []}
        for _row in range(tcfg.batch_size):
            m = sample_training_masks(state.rng_np, shapes, tcfg.bp_prob,
                                      tcfg.history_len)
            masks_np["agents"].append(m["agents"])
            masks_np["lights"].append(m["lights"])
        data = {"agents": torch.as_tensor(a_np), "lights": torch.as_tensor(l_np)}
        masks = {k: torch.as_tensor(np.stack(v), dtype=torch.float32)
                 for k, v in masks_np.items()}
        values = {k: data[k] * masks[k] for k in data}

        t = torch.rand(tcfg.batch_size, generator=state.rng_torch)
        alpha = torch.cos(math.pi * t / 2.0)[:, None, None, None]
        sigma = torch.sin(math.pi * t / 2.0)[:, None, None, None]
        z, v_tgt, w = {}, {}, {}
        for k in data:
            eps = torch.randn(data[k].shape, generator=state.rng_torch)
            z[k] = alpha * data[k] + sigma * eps
            v_tgt[k] = alpha * eps - sigma * data[k]
            valid_gt = a_np[..., -1] > 0 if k == "agents" else l_np[..., -1] > 0
            w[k] = torch.as_tensor(
                build_loss_weight(valid_gt, data[k].shape[-1]), dtype=torch.float32)

        context = state.model.context_encoder(torch.as_tensor(pts),
                                              torch.as_tensor(pad))
        v_hat = model(z, t, masks, values, context)
        loss = multi_masked_loss([(v_hat[k], v_tgt[k], w[k]) for k in data])
        if not torch.isfinite(loss):
            raise RuntimeError(f"training loss became non-finite at step {state.step}")
        state.optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
        state.optimizer.step()

        loss_val = float(loss.detach())
        state.loss_curve.append(loss_val)
        if initial_loss is None:
            initial_loss = loss_val
        diverged_for = diverged_for + 1 if loss_val > tcfg.divergence_factor * initial_loss else 0
        if diverged_for >= tcfg.divergence_patience:
            raise RuntimeError(
                f"training diverged: loss > {tcfg.divergence_factor}x initial for "
                f"{tcfg.divergence_patience} consecutive steps (step {state.step})")
        if state.ema is not None:
            d = tcfg.ema_decay
            with torch.no_grad():
                for name, p in model.state_dict().items():
                    state.ema[name].mul_(d).add_(p, alpha=1.0 - d)
        state.step += 1
        if log and state.step % tcfg.log_every == 0:
            log(f"step {state.step}: loss {loss_val:.5f}")
    return state


# -- generation -------------------------------------------------------------

def make_denoiser_fn(model: SceneDenoiser, conditioning: Conditioning,
                     context_latents):
    """Adapt a SceneDenoiser to the numpy-dict callable the sampler expects.

    All conditioning arrays must carry a batch axis (B, E, T, D).
    """
    masks_t = {k: torch.as_tensor(np.asarray(m), dtype=torch.float32)
               for k, m in conditioning.masks.items()}
    values_t = {k: torch.as_tensor(np.asarray(v), dtype=torch.float32)
                for k, v in conditioning.values.items()}
    batch = next(iter(masks_t.values())).shape[0]

    def fn(z: dict, t: float) -> dict:
        with torch.no_grad():
            z_t = {k: torch.as_tensor(v, dtype=torch.float32) for k, v in z.items()}
            tt = torch.full((batch,), float(t))
            v = model(z_t, tt, masks_t, values_t, context_latents)
            return {k: v[k].numpy().astype(np.float64) for k in v}

    return fn


def generate(model: SceneDenoiser, conditioning: Conditioning, context_latents,
             n_steps: int, mode: ClipMode, rng: np.random.Generator) -> dict:
    """Sample a batch of multi-tensors under the given conditioning.

    Returns {"agents": (B, E_a, T, D_a), "lights": ...} numpy arrays.
    """
    model.eval()
    shapes = {k: np.asarray(m).shape for k, m in conditioning.masks.items()}
    fn = make_denoiser_fn(model, conditioning, context_latents)
    return diffusion.sample(fn, conditioning, shapes, n_steps, mode, rng)
