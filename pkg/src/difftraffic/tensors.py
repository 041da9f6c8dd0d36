"""Scene-tensor data model: layouts, normalization, validity, task masks.

A scene tensor is a dense (E, T, D) array of per-element, per-timestep
features in normalized (-1, 1) units, with the validity channel always
last. A multi-tensor bundles the agent and traffic-light tensors that are
denoised jointly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

AGENT_CHANNELS = (
    "x", "y", "z", "heading", "length", "width", "height",
    "type_av", "type_car", "type_pedestrian", "type_cyclist", "valid",
)
LIGHT_CHANNELS = (
    "x", "y", "z",
    "state_unknown", "state_arrow_green", "state_arrow_red", "state_arrow_yellow",
    "state_green", "state_red", "state_yellow",
    "state_flashing_red", "state_flashing_yellow", "valid",
)
D_AGENT = len(AGENT_CHANNELS)   # 12
D_LIGHT = len(LIGHT_CHANNELS)   # 13
N_AGENT_TYPES = 4
N_LIGHT_STATES = 9
AV_SLOT = 0


class AgentType(IntEnum):
    AV = 0
    CAR = 1
    PEDESTRIAN = 2
    CYCLIST = 3


class SignalState(IntEnum):
    UNKNOWN = 0
    ARROW_GREEN = 1
    ARROW_RED = 2
    ARROW_YELLOW = 3
    GREEN = 4
    RED = 5
    YELLOW = 6
    FLASHING_RED = 7
    FLASHING_YELLOW = 8


RED_STATES = (SignalState.RED, SignalState.ARROW_RED)
STOPPING_STATES = (SignalState.RED, SignalState.ARROW_RED,
                   SignalState.YELLOW, SignalState.ARROW_YELLOW)


@dataclass(frozen=True)
class NormConfig:
    """Feature scaling constants.

    Positions scale by ``position_scale`` per meter, headings divide by pi,
    box channels map through (f - mu) / (2 sigma), and binary channels
    (one-hots, validity) map {0, 1} -> {-1, +1}.
    """

    position_scale: float = 1.0 / 80.0
    box_mean: tuple = (4.5, 2.0, 1.75)
    box_std: tuple = (2.5, 0.8, 0.6)
    onehot_mean: float = 0.5
    onehot_std: float = 0.5

    def __post_init__(self):
        if any(s <= 0 for s in self.box_std) or self.onehot_std <= 0:
            raise ValueError("normalization stds must be positive")

    def to_dict(self):
        return {
            "position_scale": self.position_scale,
            "box_mean": list(self.box_mean),
            "box_std": list(self.box_std),
            "onehot_mean": self.onehot_mean,
            "onehot_std": self.onehot_std,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            position_scale=d["position_scale"],
            box_mean=tuple(d["box_mean"]),
            box_std=tuple(d["box_std"]),
            onehot_mean=d["onehot_mean"],
            onehot_std=d["onehot_std"],
        )


@dataclass
class SceneTensor:
    """Dense (E, T, D) feature block for one element kind."""

    data: np.ndarray
    kind: str  # "agent" or "light"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"scene tensor must be (E, T, D), got {self.data.shape}")
        expected = {"agent": D_AGENT, "light": D_LIGHT}[self.kind]
        if self.data.shape[2] != expected:
            raise ValueError(
                f"{self.kind} tensor needs {expected} channels, got {self.data.shape[2]}")

    @property
    def n_elements(self):
        return self.data.shape[0]

    @property
    def n_steps(self):
        return self.data.shape[1]

    @property
    def n_channels(self):
        return self.data.shape[2]

    def validate(self):
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"{self.kind} tensor contains non-finite values")
        if np.any(np.abs(self.data) > 3.0):
            ch = int(np.argmax(np.max(np.abs(self.data), axis=(0, 1)) > 3.0))
            names = AGENT_CHANNELS if self.kind == "agent" else LIGHT_CHANNELS
            raise ValueError(
                f"{self.kind} channel '{names[ch]}' outside the [-3, 3] sanity bound")


@dataclass
class MultiTensor:
    """The pair of scene tensors the diffusion model denoises jointly."""

    agents: SceneTensor
    lights: SceneTensor
    norm: NormConfig = field(default_factory=NormConfig)

    def __post_init__(self):
        if self.agents.n_steps != self.lights.n_steps:
            raise ValueError("agent and light tensors must share the timestep axis")

    @property
    def n_steps(self):
        return self.agents.n_steps

    def tensors(self):
        return {"agents": self.agents.data, "lights": self.lights.data}

    def copy(self):
        return MultiTensor(
            agents=SceneTensor(self.agents.data.copy(), "agent"),
            lights=SceneTensor(self.lights.data.copy(), "light"),
            norm=self.norm,
        )

    # -- serialization ----------------------------------------------------
    def to_json_dict(self):
        return {
            "version": 1,
            "e_agents": self.agents.n_elements,
            "e_lights": self.lights.n_elements,
            "t": self.n_steps,
            "d_agents": D_AGENT,
            "d_lights": D_LIGHT,
            "agents_data": self.agents.data.ravel().tolist(),
            "lights_data": self.lights.data.ravel().tolist(),
            "norm_config": self.norm.to_dict(),
        }

    @classmethod
    def from_json_dict(cls, d):
        if d.get("version") != 1:
            raise ValueError(f"unsupported multi-tensor container version {d.get('version')}")
        agents = np.array(d["agents_data"], dtype=np.float64).reshape(
            d["e_agents"], d["t"], d["d_agents"])
        lights = np.array(d["lights_data"], dtype=np.float64).reshape(
            d["e_lights"], d["t"], d["d_lights"])
        return cls(
            agents=SceneTensor(agents, "agent"),
            lights=SceneTensor(lights, "light"),
            norm=NormConfig.from_dict(d["norm_config"]),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_json_dict(json.loads(Path(path).read_text()))


@dataclass
class RawScene:
    """Ego-frame physical-unit scene, the input/output of (de)normalization.

    Positions are meters in the anchor ego frame, headings radians in
    [-pi, pi), boxes meters. Agent types index :class:`AgentType` (-1 for
    slots that never hold an agent); light states index :class:`SignalState`.
    """

    agent_pos: np.ndarray       # (E_a, T, 3)
    agent_heading: np.ndarray   # (E_a, T)
    agent_box: np.ndarray       # (E_a, T, 3) length, width, height
    agent_type: np.ndarray      # (E_a,)
    agent_valid: np.ndarray     # (E_a, T) bool
    light_pos: np.ndarray       # (E_l, T, 3)
    light_state: np.ndarray     # (E_l, T) int
    light_valid: np.ndarray     # (E_l, T) bool


def _binary_to_signed(b):
    return 2.0 * np.asarray(b, dtype=np.float64) - 1.0


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in raw channel '{name}'")


def normalize(raw: RawScene, cfg: NormConfig = NormConfig()) -> MultiTensor:
    """Map an ego-frame physical scene into normalized scene tensors.

    Invalid steps have their value channels imputed to zero; the validity
    channel is -1 there and +1 on valid steps.
    """
    for name in ("agent_pos", "agent_heading", "agent_box", "light_pos"):
        _check_finite(name, getattr(raw, name))
    heading = np.asarray(raw.agent_heading, dtype=np.float64)
    a_valid = np.asarray(raw.agent_valid, dtype=bool)
    bad = a_valid & ((heading < -np.pi) | (heading >= np.pi))
    if np.any(bad):
        raise ValueError("channel 'heading' outside [-pi, pi) at a valid step")

    e_a, t = heading.shape
    agents = np.zeros((e_a, t, D_AGENT))
    agents[..., 0:3] = np.asarray(raw.agent_pos) * cfg.position_scale
    agents[..., 3] = heading / np.pi
    mu = np.array(cfg.box_mean)
    sd = np.array(cfg.box_std)
    agents[..., 4:7] = (np.asarray(raw.agent_box) - mu) / (2.0 * sd)
    types = np.asarray(raw.agent_type, dtype=int)
    onehot = np.full((e_a, N_AGENT_TYPES), -1.0)
    for i, k in enumerate(types):
        if 0 <= k < N_AGENT_TYPES:
            onehot[i, k] = 1.0
    agents[..., 7:11] = onehot[:, None, :]
    agents[..., 11] = _binary_to_signed(a_valid)

    l_valid = np.asarray(raw.light_valid, dtype=bool)
    e_l = l_valid.shape[0]
    lights = np.zeros((e_l, t, D_LIGHT))
    lights[..., 0:3] = np.asarray(raw.light_pos) * cfg.position_scale
    states = np.asarray(raw.light_state, dtype=int)
    state_onehot = np.full((e_l, t, N_LIGHT_STATES), -1.0)
    for s in range(N_LIGHT_STATES):
        state_onehot[..., s] = np.where(states == s, 1.0, -1.0)
    lights[..., 3:12] = state_onehot
    lights[..., 12] = _binary_to_signed(l_valid)

    # impute: zero every value channel on invalid steps
    agents[..., :-1] *= a_valid[..., None]
    lights[..., :-1] *= l_valid[..., None]

    mt = MultiTensor(SceneTensor(agents, "agent"), SceneTensor(lights, "light"), cfg)
    mt.agents.validate()
    mt.lights.validate()
    return mt


def denormalize(mt: MultiTensor, cfg: NormConfig | None = None) -> RawScene:
    """Inverse of :func:`normalize`; exact on valid steps."""
    cfg = cfg or mt.norm
    a = mt.agents.data
    l = mt.lights.data
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(l))):
        raise ValueError("non-finite values in multi-tensor")
    a_valid = decompose(a)[1] >= 0.5
    l_valid = decompose(l)[1] >= 0.5

    mu = np.array(cfg.box_mean)
    sd = np.array(cfg.box_std)
    agent_pos = a[..., 0:3] / cfg.position_scale
    agent_heading = a[..., 3] * np.pi
    agent_box = a[..., 4:7] * (2.0 * sd) + mu
    type_scores = a[..., 7:11].mean(axis=1)  # constant over valid steps
    agent_type = np.where(np.any(a_valid, axis=1), np.argmax(type_scores, axis=1), -1)

    light_pos = l[..., 0:3] / cfg.position_scale
    light_state = np.argmax(l[..., 3:12], axis=-1)

    return RawScene(
        agent_pos=agent_pos,
        agent_heading=agent_heading,
        agent_box=agent_box,
        agent_type=agent_type,
        agent_valid=a_valid,
        light_pos=light_pos,
        light_state=light_state,
        light_valid=l_valid,
    )


def decompose(x):
    """Split a scene tensor into value channels and validity in [0, 1].

    Validity is ``clip(x[..., -1], -1, 1) / 2 + 0.5``. Works on numpy
    arrays and torch tensors alike.
    """
    values = x[..., :-1]
    validity = x[..., -1].clip(-1.0, 1.0) / 2.0 + 0.5
    return values, validity


def validity_to_channel(m):
    """Inverse of the validity mapping: [0, 1] -> [-1, 1]."""
    return 2.0 * m - 1.0


def compose(values, validity_channel):
    """Concatenate value channels with a raw validity channel."""
    if isinstance(values, np.ndarray):
        return np.concatenate([values, validity_channel[..., None]], axis=-1)
    import torch

    return torch.cat([values, validity_channel.unsqueeze(-1)], dim=-1)


def impute_invalid(x):
    """Zero the value channels wherever validity reads invalid.

    Multiplies values by the decoded validity, which for ground-truth
    (binary, +-1) validity zeroes invalid steps exactly and leaves valid
    steps untouched. The validity channel itself is unchanged.
    """
    values, validity = decompose(x)
    if isinstance(x, np.ndarray):
        out = x.copy()
        out[..., :-1] = values * validity[..., None]
        return out
    import torch

    return torch.cat([values * validity.unsqueeze(-1), x[..., -1:]], dim=-1)


BP_TASK = "bp"
SCENEGEN_TASK = "scenegen"


def make_task_masks(
    kind: str,
    shapes: dict,
    history_len: int = 11,
    context_fraction: float = 0.5,
    control_keep_prob: float = 1.0,
    rng: np.random.Generator | None = None,
) -> dict:
    """Build per-tensor boolean inpainting masks for a training task.

    ``bp`` marks every channel of every timestep before ``history_len`` as
    context; ``scenegen`` marks the full trajectories of a random
    ``context_fraction`` subset of elements. Both are then AND-combined
    with an elementwise Bernoulli(``control_keep_prob``) control mask.
    """
    rng = rng or np.random.default_rng()
    masks = {}
    for name, shape in shapes.items():
        e, t, d = shape
        if kind == BP_TASK:
            if history_len >= t:
                raise ValueError(f"history_len {history_len} must be < T={t}")
            mask = np.zeros((e, t, d), dtype=bool)
            mask[:, :history_len, :] = True
        elif kind == SCENEGEN_TASK:
            n_context = int(round(context_fraction * e))
            chosen = rng.choice(e, size=n_context, replace=False) if n_context else []
            mask = np.zeros((e, t, d), dtype=bool)
            mask[list(chosen), :, :] = True
        else:
            raise ValueError(f"unknown task kind {kind!r}")
        if control_keep_prob < 1.0:
            mask &= rng.random((e, t, d)) < control_keep_prob
        masks[name] = mask
    return masks


@dataclass
class Conditioning:
    """Inpainting masks, masked context values, and the global map context."""

    masks: dict                 # name -> (E, T, D) bool
    values: dict                # name -> (E, T, D) float, zero where mask is False
    context: object = None      # roadgraph (or pre-encoded map latents)

    def __post_init__(self):
        for name, mask in self.masks.items():
            v = self.values[name]
            if np.any(np.asarray(v)[~np.asarray(mask)] != 0.0):
                raise ValueError(f"conditioning values for '{name}' nonzero outside mask")

    @classmethod
    def from_multi_tensor(cls, mt: MultiTensor, masks: dict, context=None):
        values = {name: np.where(masks[name], data, 0.0)
                  for name, data in mt.tensors().items()}
        return cls(masks=masks, values=values, context=context)

    @classmethod
    def empty(cls, shapes: dict, context=None):
        masks = {n: np.zeros(s, dtype=bool) for n, s in shapes.items()}
        values = {n: np.zeros(s) for n, s in shapes.items()}
        return cls(masks=masks, values=values, context=context)
