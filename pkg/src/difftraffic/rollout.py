"""Closed-loop autoregressive simulation.

Each replan interval, the planner and the world model independently
predict the next chunk from the same committed history: the planner's
ego row and the world model's non-ego rows and signals are committed,
with predicted validity thresholded at 0.5. Neither controller can see
the other's same-interval output; they interact only through history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from .diffusion import ClipMode
from .idm import IDMParams, Route, idm_step, route_search
from .tensors import (AV_SLOT, AgentType, Conditioning, MultiTensor,
                      NormConfig, RawScene, decompose, make_task_masks,
                      normalize, BP_TASK)
from .traces import TraceData

EGO_MAX_STEP_M = 3.5  # 30 m/s * 0.1 s + slack; violations are logged


@dataclass
class RolloutConfig:
    n_rollout_steps: int = 600
    n_replan_steps: int = 40
    history_len: int = 11
    validity_threshold: float = 0.5
    sampler_steps: int = 32
    clip_mode: ClipMode = ClipMode.SOFT
    world_seed: int = 1
    planner_seed: int = 2
    e_agents: int = 32
    e_lights: int = 8
    window_len: int = 91

    def __post_init__(self):
        if self.n_replan_steps > self.window_len - self.history_len:
            raise ValueError("n_replan_steps must be <= window_len - history_len")

    def to_dict(self):
        d = self.__dict__.copy()
        d["clip_mode"] = self.clip_mode.value
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("clip_mode"), str):
            d["clip_mode"] = ClipMode(d["clip_mode"])
        return cls(**d)


@dataclass
class Prediction:
    """World-frame controller output covering the next L steps."""

    agent_x: np.ndarray          # (E_a, L)
    agent_y: np.ndarray
    agent_z: np.ndarray
    agent_heading: np.ndarray
    agent_box: np.ndarray        # (E_a, L, 3)
    agent_type: np.ndarray       # (E_a, L) int
    agent_valid_prob: np.ndarray  # (E_a, L) in [0, 1]
    signal_x: np.ndarray         # (E_l, L)
    signal_y: np.ndarray
    signal_z: np.ndarray
    signal_state: np.ndarray     # (E_l, L) int
    signal_valid_prob: np.ndarray

    @property
    def n_steps(self):
        return self.agent_x.shape[1]


class HistoryView:
    """Read-only view of the committed state; every read is logged."""

    def __init__(self, state, start: int, length: int, roadgraph):
        self._state = state
        self.start = start
        self.length = length
        self.roadgraph = roadgraph
        self.access_log = []
        self.reader = "?"

    def _log(self, what):
        self.access_log.append((self.reader, what, self.start, self.start + self.length))

    def ego_pose(self):
        """Pose of the ego at the last committed step."""
        self._log("ego_pose")
        s = self._state
        i = self.start + self.length - 1
        return (float(s.x[AV_SLOT, i]), float(s.y[AV_SLOT, i]),
                float(s.heading[AV_SLOT, i]))

    def window(self):
        """Committed world-frame arrays for the history steps (copies)."""
        self._log("window")
        s = self._state
        sl = slice(self.start, self.start + self.length)
        return {
            "x": s.x[:, sl].copy(), "y": s.y[:, sl].copy(),
            "z": s.z[:, sl].copy(), "heading": s.heading[:, sl].copy(),
            "box": s.box[:, sl].copy(), "type": s.type[:, sl].copy(),
            "valid": s.valid[:, sl].copy(),
            "sig_x": s.sig_x[:, sl].copy(), "sig_y": s.sig_y[:, sl].copy(),
            "sig_z": s.sig_z[:, sl].copy(), "sig_state": s.sig_state[:, sl].copy(),
            "sig_valid": s.sig_valid[:, sl].copy(),
        }


def commit_validity(valid_prob, threshold: float = 0.5, previous=None):
    """Threshold predicted validity; M >= threshold counts as valid.

    With ``previous`` (bool array of the step before), also returns which
    elements are entering (newly valid) and exiting (newly invalid) at
    each step.
    """
    valid_prob = np.asarray(valid_prob)
    if np.any(valid_prob < 0) or np.any(valid_prob > 1):
        raise ValueError("validity confidence must lie in [0, 1]")
    valid = valid_prob >= threshold
    if previous is None:
        return valid
    prev = np.concatenate([np.asarray(previous)[:, None], valid[:, :-1]], axis=1)
    return valid, valid & ~prev, ~valid & prev


def recenter_window(window: dict, ego_pose, norm: NormConfig,
                    e_agents: int, e_lights: int, total_len: int) -> MultiTensor:
    """Rigid-transform a committed window into an ego frame and normalize.

    The history occupies the first steps of a ``total_len``-long tensor;
    the remaining steps are left invalid for the model to fill.
    """
    h = window["valid"].shape[1]
    agent_pos = np.zeros((e_agents, total_len, 3))
    agent_heading = np.zeros((e_agents, total_len))
    agent_box = np.zeros((e_agents, total_len, 3))
    agent_valid = np.zeros((e_agents, total_len), dtype=bool)
    agent_valid[:, :h] = window["valid"]
    local = geometry.to_frame(
        np.stack([window["x"], window["y"]], axis=-1), ego_pose)
    agent_pos[:, :h, 0] = np.where(window["valid"], local[..., 0], 0.0)
    agent_pos[:, :h, 1] = np.where(window["valid"], local[..., 1], 0.0)
    agent_pos[:, :h, 2] = np.where(window["valid"], window["z"], 0.0)
    agent_heading[:, :h] = np.where(
        window["valid"], geometry.wrap_angle(window["heading"] - ego_pose[2]), 0.0)
    agent_box[:, :h] = np.where(window["valid"][..., None], window["box"], 0.0)

    agent_type = np.full(e_agents, -1)
    for e in range(e_agents):
        idx = np.flatnonzero(window["valid"][e])
        if len(idx):
            agent_type[e] = window["type"][e, idx[-1]]

    light_pos = np.zeros((e_lights, total_len, 3))
    light_state = np.zeros((e_lights, total_len), dtype=int)
    light_valid = np.zeros((e_lights, total_len), dtype=bool)
    light_valid[:, :h] = window["sig_valid"]
    slocal = geometry.to_frame(
        np.stack([window["sig_x"], window["sig_y"]], axis=-1), ego_pose)
    light_pos[:, :h, 0] = np.where(window["sig_valid"], slocal[..., 0], 0.0)
    light_pos[:, :h, 1] = np.where(window["sig_valid"], slocal[..., 1], 0.0)
    light_pos[:, :h, 2] = np.where(window["sig_valid"], window["sig_z"], 0.0)
    light_state[:, :h] = window["sig_state"]

    raw = RawScene(agent_pos=agent_pos, agent_heading=agent_heading,
                   agent_box=agent_box, agent_type=agent_type,
                   agent_valid=agent_valid, light_pos=light_pos,
                   light_state=light_state, light_valid=light_valid)
    return normalize(raw, norm)


def prediction_from_tensors(x_hat: dict, ego_pose, norm: NormConfig,
                            future: slice) -> Prediction:
    """Decode sampled (1, E, T, D) tensors back to a world-frame Prediction."""
    a = np.asarray(x_hat["agents"])[0][:, future]
    l = np.asarray(x_hat["lights"])[0][:, future]
    scale = norm.position_scale
    mu = np.array(norm.box_mean)
    sd = np.array(norm.box_std)

    axy = geometry.from_frame(a[..., 0:2] / scale, ego_pose)
    a_heading = geometry.wrap_angle(a[..., 3] * np.pi + ego_pose[2])
    a_m = decompose(a)[1]
    lxy = geometry.from_frame(l[..., 0:2] / scale, ego_pose)
    l_m = decompose(l)[1]
    return Prediction(
        agent_x=axy[..., 0], agent_y=axy[..., 1], agent_z=a[..., 2] / scale,
        agent_heading=a_heading,
        agent_box=a[..., 4:7] * (2.0 * sd) + mu,
        agent_type=np.argmax(a[..., 7:11], axis=-1),
        agent_valid_prob=a_m,
        signal_x=lxy[..., 0], signal_y=lxy[..., 1], signal_z=l[..., 2] / scale,
        signal_state=np.argmax(l[..., 3:12], axis=-1),
        signal_valid_prob=l_m,
    )


# -- controllers --------------------------------------------------------------

class DiffusionController:
    """Samples the learned model conditioned on the committed history."""

    def __init__(self, model, cfg: RolloutConfig, norm: NormConfig = NormConfig(),
                 name: str = "diff"):
        self.model = model
        self.cfg = cfg
        self.norm = norm
        self.name = name

    def predict(self, history: HistoryView, n_steps: int,
                rng: np.random.Generator) -> Prediction:
        from .training import generate  # local import avoids torch at module load

        cfg = self.cfg
        ego_pose = history.ego_pose()
        window = history.window()
        h = window["valid"].shape[1]
        mt = recenter_window(window, ego_pose, self.norm, cfg.e_agents,
                             cfg.e_lights, cfg.window_len)
        shapes = {"agents": mt.agents.data.shape, "lights": mt.lights.data.shape}
        masks = make_task_masks(BP_TASK, shapes, history_len=h)
        cond = Conditioning.from_multi_tensor(mt, masks)
        batched = Conditioning(
            masks={k: v[None] for k, v in cond.masks.items()},
            values={k: v[None] for k, v in cond.values.items()})
        context, _ = self.model.encode_context(history.roadgraph, ego_pose)
        x_hat = generate(self.model, batched, context, cfg.sampler_steps,
                         cfg.clip_mode, rng)
        return prediction_from_tensors(x_hat, ego_pose, self.norm,
                                       slice(h, h + n_steps))


class IDMController:
    """IDM car following along seeded random lane-graph routes.

    Predicts every agent row (the engine selects which rows to commit),
    keeps validity frozen at its last committed value, and emits no
    signals. Off-lane agents (parked) are kept stationary.
    """

    def __init__(self, roadgraph, params: IDMParams = IDMParams(),
                 seed: int = 0, name: str = "idm", dt: float = 0.1):
        self.roadgraph = roadgraph
        self.params = params
        self.dt = dt
        self.name = name
        self._routes = {}  # slot -> (Route, route_rng)
        self._route_rng = np.random.default_rng(seed)
        self.log = []

    def _route_for(self, slot, xy, is_ego):
        lane_id, s_on, dist = self.roadgraph.nearest_lane(xy)
        if lane_id is None or dist > 5.0:
            if slot in self._routes:
                self.log.append(f"slot {slot}: off route by {dist:.1f} m, re-projected")
            return None, 0.0
        cached = self._routes.get(slot)
        if cached is not None:
            route = cached
            s, d = geometry.project_to_polyline(route.polyline, xy)
            if d <= 5.0 and s < route.total_length - 1.0:
                return route, s
            self.log.append(f"slot {slot}: off route by {d:.1f} m, re-projected")
        if is_ego:
            lane_ids = route_search(self.roadgraph, lane_id, self._route_rng,
                                    max_lanes=200, stop_at_exit=False)
        else:
            lane_ids = route_search(self.roadgraph, lane_id, self._route_rng)
        route = Route(self.roadgraph, lane_ids)
        self._routes[slot] = route
        s, _ = geometry.project_to_polyline(route.polyline, xy)
        return route, s

    def predict(self, history: HistoryView, n_steps: int,
                rng: np.random.Generator) -> Prediction:
        window = history.window()
        valid = window["valid"]
        e_a, h = valid.shape
        last = h - 1
        e_l = window["sig_valid"].shape[0]

        # speeds from the last two committed positions
        speed = np.zeros(e_a)
        both = valid[:, last] & (valid[:, last - 1] if h > 1 else False)
        if h > 1:
            d = np.hypot(window["x"][:, last] - window["x"][:, last - 1],
                         window["y"][:, last] - window["y"][:, last - 1])
            speed = np.where(both, np.clip(d / self.dt, 0.0, 30.0), 0.0)

        # last committed signal states persist through the interval
        sig_states = {}
        head_xy = np.array([hd.position[:2] for hd in self.roadgraph.signal_heads])
        for row in np.flatnonzero(window["sig_valid"][:, last]):
            p = (window["sig_x"][row, last], window["sig_y"][row, last])
            if len(head_xy) == 0:
                break
            dists = np.hypot(head_xy[:, 0] - p[0], head_xy[:, 1] - p[1])
            k = int(np.argmin(dists))
            if dists[k] <= 5.0:
                sig_states[self.roadgraph.signal_heads[k].id] = \
                    int(window["sig_state"][row, last])

        routes, arcs, movable = [None] * e_a, np.zeros(e_a), np.zeros(e_a, dtype=bool)
        for slot in range(e_a):
            if not valid[slot, last]:
                continue
            xy = (window["x"][slot, last], window["y"][slot, last])
            route, s = self._route_for(slot, xy, is_ego=slot == AV_SLOT)
            if route is not None:
                routes[slot], arcs[slot], movable[slot] = route, s, True

        out_x = np.repeat(window["x"][:, last:], n_steps, axis=1)
        out_y = np.repeat(window["y"][:, last:], n_steps, axis=1)
        out_z = np.repeat(window["z"][:, last:], n_steps, axis=1)
        out_h = np.repeat(window["heading"][:, last:], n_steps, axis=1)
        lengths = window["box"][:, last, 0]
        arc_now, speed_now = arcs.copy(), speed.copy()
        route_list = [r if r is not None else _NULL_ROUTE for r in routes]
        limits = {l.id: l.speed_limit for l in self.roadgraph.lanes.values()}
        for k in range(n_steps):
            arc_now, speed_now = idm_step(
                arc_now, speed_now, lengths, movable, route_list, sig_states,
                self.dt, self.params, limits)
            for slot in np.flatnonzero(movable):
                x, y, heading = routes[slot].pose_at(arc_now[slot])
                out_x[slot, k] = x
                out_y[slot, k] = y
                out_h[slot, k] = geometry.wrap_angle(heading)

        frozen = valid[:, last].astype(float)
        return Prediction(
            agent_x=out_x, agent_y=out_y, agent_z=out_z, agent_heading=out_h,
            agent_box=np.repeat(window["box"][:, last:, :], n_steps, axis=1),
            agent_type=np.repeat(window["type"][:, last:], n_steps, axis=1),
            agent_valid_prob=np.repeat(frozen[:, None], n_steps, axis=1),
            signal_x=np.zeros((e_l, n_steps)), signal_y=np.zeros((e_l, n_steps)),
            signal_z=np.zeros((e_l, n_steps)),
            signal_state=np.zeros((e_l, n_steps), dtype=int),
            signal_valid_prob=np.zeros((e_l, n_steps)),
        )


class _NullRoute:
    total_length = 0.0
    lane_start = [0.0]
    lane_ids = [-1]
    stops = ()

    def lane_at(self, s):
        return -1, 0.0

    def pose_at(self, s):
        return 0.0, 0.0, 0.0


_NULL_ROUTE = _NullRoute()


class FrozenValidityController:
    """Wrapper that freezes validity at the last committed pattern.

    Optionally also marks every future signal invalid, reproducing
    fixed-agent baselines that lack validity and light prediction.
    """

    def __init__(self, inner, freeze_signals: bool = True, name=None):
        self.inner = inner
        self.freeze_signals = freeze_signals
        self.name = name or f"{inner.name}-frozen"

    def predict(self, history: HistoryView, n_steps: int,
                rng: np.random.Generator) -> Prediction:
        pred = self.inner.predict(history, n_steps, rng)
        window = history.window()
        frozen = window["valid"][:, -1].astype(float)
        pred.agent_valid_prob = np.repeat(frozen[:, None], n_steps, axis=1)
        if self.freeze_signals:
            pred.signal_valid_prob = np.zeros_like(pred.signal_valid_prob)
        return pred


# -- the engine ---------------------------------------------------------------

class _CommittedState:
    def __init__(self, e_agents, e_lights, n_steps):
        self.x = np.zeros((e_agents, n_steps))
        self.y = np.zeros((e_agents, n_steps))
        self.z = np.zeros((e_agents, n_steps))
        self.heading = np.zeros((e_agents, n_steps))
        self.box = np.zeros((e_agents, n_steps, 3))
        self.type = np.full((e_agents, n_steps), -1)
        self.valid = np.zeros((e_agents, n_steps), dtype=bool)
        self.agent_id = np.full((e_agents, n_steps), -1)
        self.sig_x = np.zeros((e_lights, n_steps))
        self.sig_y = np.zeros((e_lights, n_steps))
        self.sig_z = np.zeros((e_lights, n_steps))
        self.sig_state = np.zeros((e_lights, n_steps), dtype=int)
        self.sig_valid = np.zeros((e_lights, n_steps), dtype=bool)


def _init_from_scenario(state, scenario, cfg: RolloutConfig):
    """Commit the first history_len scenario steps into agent slots."""
    from .world import assign_slots

    h = cfg.history_len
    vis = scenario.agent_visible[:, :h]
    n = len(scenario.tracks)
    ego_xy = scenario.ego.pos[:h, :2]
    dist = np.zeros((n, h))
    for r, t in enumerate(scenario.tracks):
        dist[r] = np.hypot(t.pos[:h, 0] - ego_xy[:, 0], t.pos[:h, 1] - ego_xy[:, 1])
    slot_of, _, _ = assign_slots(vis, dist, cfg.e_agents - 1, h, reserved_rows=(0,))

    def put(slot, row, validity):
        t = scenario.tracks[row]
        idx = np.flatnonzero(validity)
        state.valid[slot, idx] = True
        state.x[slot, idx] = t.pos[idx, 0]
        state.y[slot, idx] = t.pos[idx, 1]
        state.z[slot, idx] = t.pos[idx, 2]
        state.heading[slot, idx] = t.heading[idx]
        state.box[slot, idx] = t.box
        state.type[slot, idx] = t.type

    put(AV_SLOT, 0, np.ones(h, dtype=bool))
    for row in range(1, n):
        if slot_of[row] >= 0:
            put(slot_of[row] + 1, row, vis[row])

    svis = scenario.signal_visible[:, :h]
    sdist = np.zeros((len(scenario.signals), h))
    for k, sg in enumerate(scenario.signals):
        sdist[k] = np.hypot(sg.position[0] - ego_xy[:, 0],
                            sg.position[1] - ego_xy[:, 1])
    s_slot_of, _, _ = assign_slots(svis, sdist, cfg.e_lights, h)
    for k, sg in enumerate(scenario.signals):
        s = s_slot_of[k]
        if s < 0:
            continue
        idx = np.flatnonzero(svis[k])
        state.sig_valid[s, idx] = True
        state.sig_x[s, idx] = sg.position[0]
        state.sig_y[s, idx] = sg.position[1]
        state.sig_z[s, idx] = sg.position[2]
        state.sig_state[s, idx] = sg.states[idx]


def rollout(world_model, planner, init_scenario, roadgraph,
            cfg: RolloutConfig) -> TraceData:
    """Run the closed loop and return the committed trace.

    The world model owns every non-ego agent row and all signals; the
    planner owns the ego row. Both see only committed history.
    """
    if init_scenario.n_steps < cfg.history_len:
        raise ValueError("init scenario shorter than history_len")
    shared_model = getattr(world_model, "model", None)
    if shared_model is not None and shared_model is getattr(planner, "model", None) \
            and cfg.world_seed == cfg.planner_seed:
        raise ValueError("world and planner share a model; their seeds must differ")
    n_total = cfg.n_rollout_steps
    state = _CommittedState(cfg.e_agents, cfg.e_lights, max(n_total, cfg.history_len))
    _init_from_scenario(state, init_scenario, cfg)
    warnings = []
    provenance = []

    # id bookkeeping: a slot revalidated after >= history_len invalid steps
    # is a new agent
    next_id = [0]
    slot_id = np.full(cfg.e_agents, -1)
    slot_last_valid = np.full(cfg.e_agents, -10**9)
    for s in range(cfg.history_len):
        for e in range(cfg.e_agents):
            if not state.valid[e, s]:
                continue
            gap = s - slot_last_valid[e] - 1
            if slot_id[e] < 0 or gap >= cfg.history_len:
                slot_id[e] = next_id[0]
                next_id[0] += 1
            slot_last_valid[e] = s
            state.agent_id[e, s] = slot_id[e]

    n = cfg.history_len
    interval = 0
    while n < n_total:
        length = min(cfg.n_replan_steps, n_total - n)
        hist = HistoryView(state, n - cfg.history_len, cfg.history_len, roadgraph)
        rng_p = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.planner_seed, spawn_key=(interval,)))
        rng_w = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.world_seed, spawn_key=(interval,)))
        hist.reader = getattr(planner, "name", "planner")
        p_pred = planner.predict(hist, length, rng_p)
        hist.reader = getattr(world_model, "name", "world")
        w_pred = world_model.predict(hist, length, rng_w)
        for pred, who in ((p_pred, "planner"), (w_pred, "world")):
            if pred.n_steps != length:
                raise RuntimeError(
                    f"{who} returned {pred.n_steps} steps, expected {length}")

        sl = slice(n, n + length)
        # ego from the planner; it stays valid by contract
        if np.any(p_pred.agent_valid_prob[AV_SLOT] < cfg.validity_threshold):
            warnings.append(f"interval {interval}: planner predicted invalid ego")
        state.x[AV_SLOT, sl] = p_pred.agent_x[AV_SLOT]
        state.y[AV_SLOT, sl] = p_pred.agent_y[AV_SLOT]
        state.z[AV_SLOT, sl] = p_pred.agent_z[AV_SLOT]
        state.heading[AV_SLOT, sl] = p_pred.agent_heading[AV_SLOT]
        state.box[AV_SLOT, sl] = p_pred.agent_box[AV_SLOT]
        state.type[AV_SLOT, sl] = int(AgentType.AV)
        state.valid[AV_SLOT, sl] = True

        # every other agent row and the signals come from the world model
        valid = commit_validity(w_pred.agent_valid_prob, cfg.validity_threshold)
        for e in range(cfg.e_agents):
            if e == AV_SLOT:
                continue
            state.valid[e, sl] = valid[e]
            state.x[e, sl] = np.where(valid[e], w_pred.agent_x[e], 0.0)
            state.y[e, sl] = np.where(valid[e], w_pred.agent_y[e], 0.0)
            state.z[e, sl] = np.where(valid[e], w_pred.agent_z[e], 0.0)
            state.heading[e, sl] = np.where(valid[e], w_pred.agent_heading[e], 0.0)
            state.box[e, sl] = np.where(valid[e, :, None], w_pred.agent_box[e], 0.0)
            state.type[e, sl] = np.where(valid[e], w_pred.agent_type[e], -1)

        svalid = commit_validity(w_pred.signal_valid_prob, cfg.validity_threshold)
        head_xy = np.array([h.position[:2] for h in roadgraph.signal_heads]) \
            if roadgraph.signal_heads else np.zeros((0, 2))
        for e in range(cfg.e_lights):
            state.sig_valid[e, sl] = svalid[e]
            for k_local, step in enumerate(range(n, n + length)):
                if not svalid[e, k_local]:
                    continue
                px, py = w_pred.signal_x[e, k_local], w_pred.signal_y[e, k_local]
                pz = w_pred.signal_z[e, k_local]
                if len(head_xy):
                    d = np.hypot(head_xy[:, 0] - px, head_xy[:, 1] - py)
                    kk = int(np.argmin(d))
                    if d[kk] <= 5.0:
                        px, py = head_xy[kk]
                        pz = roadgraph.signal_heads[kk].position[2]
                    else:
                        warnings.append(
                            f"step {step}: free-floating signal in slot {e} "
                            f"({d[kk]:.1f} m from nearest head)")
                state.sig_x[e, step] = px
                state.sig_y[e, step] = py
                state.sig_z[e, step] = pz
                state.sig_state[e, step] = w_pred.signal_state[e, k_local]

        # agent ids and sanity checks
        for step in range(n, n + length):
            for e in range(cfg.e_agents):
                if not state.valid[e, step]:
                    continue
                gap = step - slot_last_valid[e] - 1
                if slot_id[e] < 0 or gap >= cfg.history_len:
                    slot_id[e] = next_id[0]
                    next_id[0] += 1
                slot_last_valid[e] = step
                state.agent_id[e, step] = slot_id[e]
            if not (np.isfinite(state.x[:, step]).all()
                    and np.isfinite(state.y[:, step]).all()
                    and np.isfinite(state.heading[:, step]).all()):
                raise RuntimeError(f"non-finite committed pose at step {step}")
            d_ego = math.hypot(state.x[AV_SLOT, step] - state.x[AV_SLOT, step - 1],
                               state.y[AV_SLOT, step] - state.y[AV_SLOT, step - 1])
            if d_ego > EGO_MAX_STEP_M:
                warnings.append(
                    f"step {step}: ego displacement {d_ego:.2f} m exceeds "
                    f"{EGO_MAX_STEP_M} m")

        provenance.append({
            "start": n, "length": length, "interval": interval,
            "world": getattr(world_model, "name", "world"),
            "planner": getattr(planner, "name", "planner"),
            "world_seed": cfg.world_seed, "planner_seed": cfg.planner_seed,
        })
        n += length
        interval += 1

    return TraceData(
        dt=0.1,
        valid=state.valid[:, :n_total],
        agent_id=state.agent_id[:, :n_total],
        x=state.x[:, :n_total], y=state.y[:, :n_total],
        heading=state.heading[:, :n_total],
        length=state.box[:, :n_total, 0], width=state.box[:, :n_total, 1],
        agent_type=state.type[:, :n_total],
        ego_row=AV_SLOT,
        signal_valid=state.sig_valid[:, :n_total],
        signal_state=state.sig_state[:, :n_total],
        signal_x=state.sig_x[:, :n_total], signal_y=state.sig_y[:, :n_total],
        provenance=provenance,
        warnings=warnings,
    )
