"""The learned v-predictor: map context encoder plus an axial-attention
transformer over the concatenated agent/light token grid.

Each scene tensor is projected to a shared hidden width, concatenated
along the element axis, and run through blocks that alternate time-axis
and element-axis self-attention with cross-attention to a fixed set of
map latents. Positional encoding exists only along the time axis, so the
network is permutation-equivariant over elements within each tensor.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry
from .tensors import D_AGENT, D_LIGHT

POINT_KINDS = ("lane", "stop_line", "road_edge", "parking_edge", "signal")
POINT_DIM = 4 + len(POINT_KINDS)  # x, y, dx, dy, kind one-hot


@dataclass
class DenoiserConfig:
    hidden_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    n_context_latents: int = 32
    mlp_ratio: int = 2
    e_agents: int = 32
    e_lights: int = 8
    n_timesteps: int = 91
    point_spacing_m: float = 4.0
    context_range_m: float = 200.0
    position_scale: float = 1.0 / 80.0

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")

    @property
    def shapes(self):
        return {
            "agents": (self.e_agents, self.n_timesteps, D_AGENT),
            "lights": (self.e_lights, self.n_timesteps, D_LIGHT),
        }


def sinusoidal_features(pos, dim: int, max_period: float = 10_000.0):
    """Standard sin/cos features for positions given as a 1D tensor."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=pos.dtype) / half)
    args = pos[:, None] * freqs[None, :] * 1_000.0
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def roadgraph_points(roadgraph, ego_pose, cfg: DenoiserConfig) -> np.ndarray:
    """Flatten a roadgraph into ego-frame context points, (P, POINT_DIM).

    Polylines are resampled to a fixed spacing; positions are normalized
    by the position scale; points beyond the context range are dropped.
    """
    rows = []

    def add_polyline(points, kind):
        pts = geometry.resample_polyline(np.asarray(points)[:, :2], cfg.point_spacing_m)
        if len(pts) == 0:
            return
        local = geometry.to_frame(pts, ego_pose)
        if len(pts) >= 2:
            d = np.gradient(local, axis=0)
            norms = np.maximum(np.hypot(d[:, 0], d[:, 1]), 1e-9)
            d = d / norms[:, None]
        else:
            d = np.zeros_like(local)
        onehot = np.zeros((len(pts), len(POINT_KINDS)))
        onehot[:, POINT_KINDS.index(kind)] = 1.0
        rows.append(np.concatenate(
            [local * cfg.position_scale, d, onehot], axis=1))

    for lane in roadgraph.lanes.values():
        add_polyline(lane.points, "lane")
    for sl in roadgraph.stop_lines:
        add_polyline(np.array([sl.p0, sl.p1]), "stop_line")
    for poly in roadgraph.road_polygons:
        add_polyline(np.vstack([poly, poly[:1]]), "road_edge")
    for poly in roadgraph.parking_polygons:
        add_polyline(np.vstack([poly, poly[:1]]), "parking_edge")
    for head in roadgraph.signal_heads:
        add_polyline(np.array([head.position[:2]]), "signal")

    if not rows:
        return np.zeros((0, POINT_DIM))
    pts = np.concatenate(rows, axis=0)
    limit = cfg.context_range_m * cfg.position_scale
    keep = np.hypot(pts[:, 0], pts[:, 1]) <= limit
    return pts[keep]


class CrossAttention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)

    def forward(self, x, memory, key_padding_mask=None):
        q = self.norm_q(x)
        out, _ = self.attn(q, memory, memory, key_padding_mask=key_padding_mask,
                           need_weights=False)
        return x + out


class SelfAttention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)

    def forward(self, x):
        h = self.norm(x)
        out, _ = self.attn(h, h, h, need_weights=False)
        return x + out


class Mlp(nn.Module):
    def __init__(self, dim, ratio):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x):
        return x + self.fc2(F.gelu(self.fc1(self.norm(x))))


class AxialBlock(nn.Module):
    """Time-axis attention, element-axis attention, map cross-attention, MLP."""

    def __init__(self, dim, n_heads, mlp_ratio):
        super().__init__()
        self.time_attn = SelfAttention(dim, n_heads)
        self.elem_attn = SelfAttention(dim, n_heads)
        self.cross = CrossAttention(dim, n_heads)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x, context):
        b, e, t, h = x.shape
        x = self.time_attn(x.reshape(b * e, t, h)).reshape(b, e, t, h)
        x = x.permute(0, 2, 1, 3).reshape(b * t, e, h)
        x = self.elem_attn(x).reshape(b, t, e, h).permute(0, 2, 1, 3)
        x = x.reshape(b, e * t, h)
        ctx = context if context.shape[0] == b else context.expand(b, -1, -1)
        x = self.cross(x, ctx)
        x = self.mlp(x)
        return x.reshape(b, e, t, h)


class ContextEncoder(nn.Module):
    """Latent-query cross-attention over roadgraph points."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        dim = cfg.hidden_dim
        self.point_mlp = nn.Sequential(
            nn.Linear(POINT_DIM, dim), nn.GELU(), nn.Linear(dim, dim))
        self.latents = nn.Parameter(torch.randn(cfg.n_context_latents, dim) * 0.02)
        self.rounds = nn.ModuleList(
            [nn.ModuleList([CrossAttention(dim, cfg.n_heads), Mlp(dim, cfg.mlp_ratio)])
             for _ in range(2)])
        self.norm = nn.LayerNorm(dim)

    def forward(self, points, padding_mask=None):
        """points: (B, P, POINT_DIM); returns (B, L, hidden) latents.

        A batch row with zero points yields all-zero latents.
        """
        b, p, _ = points.shape
        lat = self.latents.unsqueeze(0).expand(b, -1, -1)
        if p == 0:
            return torch.zeros_like(lat)
        tokens = self.point_mlp(points)
        for cross, mlp in self.rounds:
            lat = cross(lat, tokens, padding_mask)
            lat = mlp(lat)
        lat = self.norm(lat)
        if padding_mask is not None:
            empty = padding_mask.all(dim=1)
            lat = torch.where(empty[:, None, None], torch.zeros_like(lat), lat)
        return lat


class SceneDenoiser(nn.Module):
    """v-prediction denoiser over the (agents, lights) multi-tensor."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        dim = cfg.hidden_dim
        self.context_encoder = ContextEncoder(cfg)
        self.proj_agents = nn.Linear(3 * D_AGENT, dim)
        self.proj_lights = nn.Linear(3 * D_LIGHT, dim)
        self.time_mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))
        pos = sinusoidal_features(
            torch.arange(cfg.n_timesteps, dtype=torch.float32) / cfg.n_timesteps, dim)
        self.register_buffer("temporal_pos", pos, persistent=False)
        self.blocks = nn.ModuleList(
            [AxialBlock(dim, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_layers)])
        self.out_norm = nn.LayerNorm(dim)
        self.head_agents = nn.Linear(dim, D_AGENT)
        self.head_lights = nn.Linear(dim, D_LIGHT)

    def time_embedding(self, t):
        """Embedding of diffusion time(s) t, (B,) tensor -> (B, hidden)."""
        return self.time_mlp(sinusoidal_features(t, self.cfg.hidden_dim))

    def forward(self, z: dict, t, masks: dict, values: dict, context_latents):
        """Predict v for each tensor.

        z, masks, values: dicts with "agents" (B, E_a, T, D_a) and
        "lights" (B, E_l, T, D_l); t: (B,) diffusion times;
        context_latents: (B, L, hidden).
        """
        za, zl = z["agents"], z["lights"]
        b = za.shape[0]
        e_a = za.shape[1]
        tok_a = self.proj_agents(torch.cat([za, masks["agents"], values["agents"]], dim=-1))
        tok_l = self.proj_lights(torch.cat([zl, masks["lights"], values["lights"]], dim=-1))
        x = torch.cat([tok_a, tok_l], dim=1)
        x = x + self.temporal_pos[None, None, :, :]
        x = x + self.time_embedding(t)[:, None, None, :]
        for i, block in enumerate(self.blocks):
            x = block(x, context_latents)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations in block {i}")
        x = self.out_norm(x)
        return {
            "agents": self.head_agents(x[:, :e_a]),
            "lights": self.head_lights(x[:, e_a:]),
        }

    def encode_context(self, roadgraph, ego_pose):
        """Encode one roadgraph in a given ego frame.

        Returns (latents (1, L, hidden), empty_roadgraph_flag).
        """
        pts = roadgraph_points(roadgraph, ego_pose, self.cfg)
        empty = len(pts) == 0
        if empty:
            lat = torch.zeros(1, self.cfg.n_context_latents, self.cfg.hidden_dim,
                              dtype=self.head_agents.weight.dtype)
            return lat, True
        tokens = torch.as_tensor(pts, dtype=self.head_agents.weight.dtype).unsqueeze(0)
        return self.context_encoder(tokens), False


# -- checkpointing ---------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: SceneDenoiser, optimizer=None, step: int = 0,
                    rng_numpy=None, rng_torch=None, ema_state=None):
    """Write a versioned npz container of shape-annotated float arrays."""
    payload = {"meta": json.dumps({
        "version": CHECKPOINT_VERSION,
        "step": step,
        "config": asdict(model.cfg),
        "has_optimizer": optimizer is not None,
        "has_ema": ema_state is not None,
        "rng_numpy": rng_numpy.bit_generator.state if rng_numpy is not None else None,
    })}
    for name, p in model.state_dict().items():
        payload[f"param/{name}"] = p.detach().cpu().numpy()
    if ema_state is not None:
        for name, p in ema_state.items():
            payload[f"ema/{name}"] = p.detach().cpu().numpy()
    if optimizer is not None:
        buf = io.BytesIO()
        torch.save(optimizer.state_dict(), buf)
        payload["opt_state"] = np.frombuffer(buf.getvalue(), dtype=np.uint8)
    if rng_torch is not None:
        payload["rng_torch"] = rng_torch.get_state().numpy()
    np.savez(path, **payload)


def load_checkpoint(path):
    """Read a checkpoint; returns a dict with model/config/training state."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        cfg = DenoiserConfig(**meta["config"])
        model = SceneDenoiser(cfg)
        state = {name[len("param/"):]: torch.as_tensor(z[name])
                 for name in z.files if name.startswith("param/")}
        model.load_state_dict(state)
        out = {"model": model, "config": cfg, "step": meta["step"], "meta": meta}
        if meta.get("has_ema"):
            out["ema"] = {name[len("ema/"):]: torch.as_tensor(z[name])
                          for name in z.files if name.startswith("ema/")}
        if meta.get("has_optimizer"):
            out["opt_state_bytes"] = z["opt_state"].tobytes()
        if "rng_torch" in z.files:
            out["rng_torch_state"] = torch.as_tensor(z["rng_torch"])
        out["rng_numpy_state"] = meta.get("rng_numpy")
        return out
