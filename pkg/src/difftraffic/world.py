"""Scripted synthetic world: ground-truth scenarios on procedural maps.

Agents spawn at map entries and parking lots, follow random lane-graph
routes under IDM car following, stop for red/yellow signals, and exit at
the map boundary. Signals cycle green -> yellow -> red deterministically.
Per-step visibility from the ego (range cut plus center-segment occlusion
by other agents' boxes) provides the validity channel the diffusion model
learns, with all its spawn/occlusion/disocclusion/removal structure.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import geometry
from .idm import IDMParams, Route, idm_step, route_search
from .roadmap import RoadGraph
from .tensors import (AgentType, MultiTensor, NormConfig, RawScene,
                      SignalState, normalize)
from .traces import TraceData


@dataclass
class WorldScriptConfig:
    spawn_rate: float = 0.12        # agents per second per entry lane
    mean_initial_agents: float = 12.0
    parked_per_lot: float = 1.2     # Poisson mean per parking lot
    green_s: float = 5.0
    yellow_s: float = 2.0
    red_s: float = 5.0
    occlusion: bool = True
    max_range_m: float = 100.0
    max_moving_agents: int = 48
    seed: int = 0
    idm: IDMParams = field(default_factory=IDMParams)

    def __post_init__(self):
        if self.spawn_rate < 0 or self.parked_per_lot < 0 or self.mean_initial_agents < 0:
            raise ValueError("rates must be >= 0")
        if min(self.green_s, self.yellow_s, self.red_s) < 0.1:
            raise ValueError("signal cycle durations must be >= one step")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "idm" in d and isinstance(d["idm"], dict):
            d["idm"] = IDMParams(**d["idm"])
        return cls(**d)


@dataclass
class AgentTrack:
    id: int
    type: int
    birth_step: int
    death_step: int          # exclusive; == n_steps for agents alive at the end
    box: np.ndarray          # (3,) length, width, height
    pos: np.ndarray          # (S, 3), zero outside [birth, death)
    heading: np.ndarray      # (S,)
    speed: np.ndarray        # (S,)


@dataclass
class SignalTrack:
    head_id: int
    position: np.ndarray     # (3,)
    states: np.ndarray       # (S,) int


@dataclass
class Scenario:
    dt: float
    n_steps: int
    tracks: list             # AgentTrack, ego first (id 0)
    signals: list            # SignalTrack
    agent_visible: np.ndarray   # (N, S) bool
    signal_visible: np.ndarray  # (M, S) bool

    @property
    def ego(self):
        return self.tracks[0]

    def ego_pose(self, step):
        t = self.ego
        return (float(t.pos[step, 0]), float(t.pos[step, 1]), float(t.heading[step]))

    def to_trace(self) -> TraceData:
        n, s = len(self.tracks), self.n_steps
        valid = self.agent_visible.copy()
        agent_id = np.where(valid, np.array([[t.id] for t in self.tracks]), -1)
        return TraceData(
            dt=self.dt,
            valid=valid,
            agent_id=agent_id,
            x=np.stack([t.pos[:, 0] for t in self.tracks]),
            y=np.stack([t.pos[:, 1] for t in self.tracks]),
            heading=np.stack([t.heading for t in self.tracks]),
            length=np.stack([np.full(s, t.box[0]) for t in self.tracks]),
            width=np.stack([np.full(s, t.box[1]) for t in self.tracks]),
            agent_type=np.stack([np.full(s, t.type, dtype=int) for t in self.tracks]),
            ego_row=0,
            signal_valid=self.signal_visible.copy(),
            signal_state=np.stack([sg.states for sg in self.signals])
            if self.signals else np.zeros((0, s), dtype=int),
            signal_x=np.stack([np.full(s, sg.position[0]) for sg in self.signals])
            if self.signals else np.zeros((0, s)),
            signal_y=np.stack([np.full(s, sg.position[1]) for sg in self.signals])
            if self.signals else np.zeros((0, s)),
        )

    def to_json_dict(self):
        return {
            "version": 1,
            "dt": self.dt,
            "n_steps": self.n_steps,
            "tracks": [{
                "id": t.id, "type": t.type, "birth_step": t.birth_step,
                "death_step": t.death_step, "box": t.box.tolist(),
                "pos": t.pos.tolist(), "heading": t.heading.tolist(),
                "speed": t.speed.tolist(),
            } for t in self.tracks],
            "signals": [{
                "head_id": sg.head_id, "position": sg.position.tolist(),
                "states": sg.states.tolist(),
            } for sg in self.signals],
            "agent_visible": self.agent_visible.astype(int).tolist(),
            "signal_visible": self.signal_visible.astype(int).tolist(),
        }

    @classmethod
    def from_json_dict(cls, d):
        if d.get("version") != 1:
            raise ValueError("unsupported scenario version")
        tracks = [AgentTrack(
            id=t["id"], type=t["type"], birth_step=t["birth_step"],
            death_step=t["death_step"], box=np.array(t["box"]),
            pos=np.array(t["pos"]), heading=np.array(t["heading"]),
            speed=np.array(t["speed"]),
        ) for t in d["tracks"]]
        signals = [SignalTrack(sg["head_id"], np.array(sg["position"]),
                               np.array(sg["states"], dtype=int))
                   for sg in d["signals"]]
        return cls(dt=d["dt"], n_steps=d["n_steps"], tracks=tracks, signals=signals,
                   agent_visible=np.array(d["agent_visible"], dtype=bool),
                   signal_visible=np.array(d["signal_visible"], dtype=bool))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def signal_state_at(time_s: float, cfg: WorldScriptConfig, axis: str) -> int:
    """Deterministic G -> Y -> R cycle; the EW group runs offset by G+Y."""
    period = cfg.green_s + cfg.yellow_s + cfg.red_s
    offset = 0.0 if axis == "ns" else cfg.green_s + cfg.yellow_s
    tau = (time_s - offset) % period
    if tau < cfg.green_s - 1e-9:
        return int(SignalState.GREEN)
    if tau < cfg.green_s + cfg.yellow_s - 1e-9:
        return int(SignalState.YELLOW)
    return int(SignalState.RED)


def occlusion_visibility(positions, headings, boxes, alive, ego_idx,
                         signal_positions, max_range_m, occlusion=True):
    """Per-step visibility of agents and signals from the ego.

    An entity is visible iff it is within range of the ego and the 2D
    segment from the ego center to the entity center intersects no other
    (alive, non-ego) agent's oriented box. The ego is always visible.
    """
    n = len(positions)
    ego = positions[ego_idx]
    agent_vis = np.zeros(n, dtype=bool)
    alive = np.asarray(alive, dtype=bool)

    d_agents = np.hypot(positions[:, 0] - ego[0], positions[:, 1] - ego[1])
    in_range = alive & (d_agents <= max_range_m)
    in_range[ego_idx] = True

    blocker_idx = [i for i in range(n) if alive[i] and i != ego_idx]

    def blocked(target_xy, exclude):
        if not occlusion:
            return False
        for j in blocker_idx:
            if j == exclude:
                continue
            # cheap reject: blocker center too far from the sight segment
            if _point_segment_distance(positions[j], ego, target_xy) > \
                    0.5 * math.hypot(boxes[j][0], boxes[j][1]):
                continue
            if geometry.segment_intersects_obb(
                    ego, target_xy, (positions[j][0], positions[j][1], headings[j]),
                    (boxes[j][0], boxes[j][1])):
                return True
        return False

    for i in range(n):
        if not in_range[i]:
            continue
        if i == ego_idx:
            agent_vis[i] = True
            continue
        agent_vis[i] = not blocked(positions[i], i)

    m = len(signal_positions)
    signal_vis = np.zeros(m, dtype=bool)
    for k in range(m):
        p = signal_positions[k][:2]
        if math.hypot(p[0] - ego[0], p[1] - ego[1]) > max_range_m:
            continue
        signal_vis[k] = not blocked(p, -1)
    return agent_vis, signal_vis


def _point_segment_distance(p, a, b):
    ab = (b[0] - a[0], b[1] - a[1])
    ap = (p[0] - a[0], p[1] - a[1])
    ab2 = ab[0] ** 2 + ab[1] ** 2
    t = 0.0 if ab2 < 1e-12 else max(0.0, min(1.0, (ap[0] * ab[0] + ap[1] * ab[1]) / ab2))
    cx, cy = a[0] + t * ab[0], a[1] + t * ab[1]
    return math.hypot(p[0] - cx, p[1] - cy)


class _SimAgent:
    __slots__ = ("id", "type", "route", "arc", "speed", "box", "birth",
                 "death", "active", "parked", "pose")

    def __init__(self, aid, atype, route, arc, speed, box, birth, parked=False,
                 pose=None):
        self.id = aid
        self.type = atype
        self.route = route
        self.arc = arc
        self.speed = speed
        self.box = box
        self.birth = birth
        self.death = None
        self.active = True
        self.parked = parked
        self.pose = pose  # fixed (x, y, heading) for parked agents

    def current_pose(self):
        if self.parked:
            return self.pose
        return self.route.pose_at(self.arc)


def _sample_box(rng):
    return np.array([
        float(np.clip(rng.normal(4.6, 0.5), 3.6, 5.8)),
        float(np.clip(rng.normal(1.9, 0.15), 1.6, 2.2)),
        float(np.clip(rng.normal(1.6, 0.12), 1.3, 2.0)),
    ])


def _extend_ego_route(roadgraph, start_lane, rng, min_length):
    lane_ids = [start_lane]
    length = roadgraph.lanes[start_lane].length
    while length < min_length and len(lane_ids) < 600:
        succ = roadgraph.lanes[lane_ids[-1]].successors
        if not succ:
            break
        nxt = succ[int(rng.integers(0, len(succ)))]
        lane_ids.append(nxt)
        length += roadgraph.lanes[nxt].length
    return lane_ids


def simulate_ground_truth(roadgraph: RoadGraph, cfg: WorldScriptConfig,
                          steps: int) -> Scenario:
    """Run the scripted world for ``steps`` timesteps at 10 Hz."""
    dt = 0.1
    rng = np.random.default_rng(cfg.seed)
    agents = []
    next_id = [0]

    def new_agent(*args, **kw):
        a = _SimAgent(next_id[0], *args, **kw)
        next_id[0] += 1
        agents.append(a)
        return a

    road_lanes = [l for l in roadgraph.lanes.values() if l.kind == "road"]
    entry_ids = roadgraph.entry_lane_ids

    # ego: long route that stays in the map via boundary U-turns
    ego_start = entry_ids[int(rng.integers(0, len(entry_ids)))] if entry_ids \
        else road_lanes[0].id
    ego_route = Route(roadgraph, _extend_ego_route(
        roadgraph, ego_start, rng, min_length=steps * dt * cfg.idm.v0 * 1.5))
    new_agent(int(AgentType.AV), ego_route, 0.0, 0.6 * cfg.idm.v0,
              np.array([4.8, 1.9, 1.6]), 0)

    # initial moving traffic scattered on road lanes
    n_init = int(rng.poisson(cfg.mean_initial_agents))
    occupancy = {}
    for _ in range(n_init):
        lane = road_lanes[int(rng.integers(0, len(road_lanes)))]
        arc0 = float(rng.uniform(0.0, max(lane.length - 5.0, 1.0)))
        taken = occupancy.setdefault(lane.id, [])
        if any(abs(arc0 - s) < 10.0 for s in taken):
            continue
        taken.append(arc0)
        path = route_search(roadgraph, lane.id, rng)
        new_agent(int(AgentType.CAR), Route(roadgraph, path), arc0,
                  0.6 * cfg.idm.v0 * float(rng.uniform(0.7, 1.2)),
                  _sample_box(rng), 0)

    # parked agents in lots, static for the whole scenario
    for poly in roadgraph.parking_polygons:
        for _ in range(int(rng.poisson(cfg.parked_per_lot))):
            u, v = rng.uniform(0.15, 0.85), rng.uniform(0.2, 0.8)
            e0 = poly[0] + u * (poly[1] - poly[0])
            e1 = poly[3] + u * (poly[2] - poly[3])
            p = e0 + v * (e1 - e0)
            heading = math.atan2(*(poly[1] - poly[0])[::-1])
            if rng.random() < 0.5:
                heading = geometry.wrap_angle(heading + math.pi)
            new_agent(int(AgentType.CAR), None, 0.0, 0.0, _sample_box(rng), 0,
                      parked=True, pose=(float(p[0]), float(p[1]), float(heading)))

    signal_states = np.zeros((len(roadgraph.signal_heads), steps), dtype=int)
    for k, head in enumerate(roadgraph.signal_heads):
        for s in range(steps):
            signal_states[k, s] = signal_state_at(s * dt, cfg, head.axis)

    pos_hist = {}      # agent id -> list of (step, x, y, heading, speed)
    vis_rows = {}

    speed_limits = {l.id: l.speed_limit for l in roadgraph.lanes.values()}

    for step in range(steps):
        # spawning at entry lanes
        n_moving = sum(1 for a in agents if a.active and not a.parked)
        for lid in entry_ids:
            if n_moving >= cfg.max_moving_agents:
                break
            if rng.random() >= cfg.spawn_rate * dt:
                continue
            clear = all(not (a.active and not a.parked
                             and a.route.lane_at(a.arc)[0] == lid
                             and a.route.lane_at(a.arc)[1] < 12.0)
                        for a in agents)
            if not clear:
                continue
            path = route_search(roadgraph, lid, rng)
            new_agent(int(AgentType.CAR), Route(roadgraph, path), 0.0,
                      0.5 * cfg.idm.v0 * float(rng.uniform(0.8, 1.2)),
                      _sample_box(rng), step)
            n_moving += 1

        # record poses at this step
        live = [a for a in agents if a.active]
        for a in live:
            x, y, heading = a.current_pose()
            pos_hist.setdefault(a.id, []).append(
                (step, x, y, heading, 0.0 if a.parked else a.speed))

        # visibility at this step
        positions = np.array([a.current_pose()[:2] for a in live])
        headings = np.array([a.current_pose()[2] for a in live])
        boxes = np.array([a.box[:2] for a in live])
        ego_idx = next(i for i, a in enumerate(live) if a.id == 0)
        sig_pos = np.array([h.position for h in roadgraph.signal_heads]) \
            if roadgraph.signal_heads else np.zeros((0, 3))
        a_vis, s_vis = occlusion_visibility(
            positions, headings, boxes, np.ones(len(live), dtype=bool), ego_idx,
            sig_pos, cfg.max_range_m, cfg.occlusion)
        for i, a in enumerate(live):
            vis_rows.setdefault(a.id, []).append((step, bool(a_vis[i])))
        vis_rows.setdefault("signals", []).append(s_vis)

        # integrate movers to the next step
        movers = [a for a in live if not a.parked]
        sig_now = {h.id: signal_states[k, step]
                   for k, h in enumerate(roadgraph.signal_heads)}
        arc = np.array([a.arc for a in movers])
        spd = np.array([a.speed for a in movers])
        lengths = np.array([a.box[0] for a in movers])
        routes = [a.route for a in movers]
        new_arc, new_spd = idm_step(arc, spd, lengths,
                                    np.ones(len(movers), dtype=bool), routes,
                                    sig_now, dt, cfg.idm, speed_limits)
        for a, na, ns in zip(movers, new_arc, new_spd):
            a.arc, a.speed = float(na), float(ns)
            if a.id != 0 and a.arc >= a.route.total_length - 1e-6:
                a.active = False
                a.death = step + 1

    # assemble tracks
    tracks = []
    for a in agents:
        pos = np.zeros((steps, 3))
        heading = np.zeros(steps)
        speed = np.zeros(steps)
        rows = pos_hist.get(a.id, [])
        for s, x, y, hh, v in rows:
            pos[s, 0], pos[s, 1] = x, y
            heading[s] = geometry.wrap_angle(hh)
            speed[s] = v
        death = a.death if a.death is not None else steps
        tracks.append(AgentTrack(id=a.id, type=a.type, birth_step=a.birth,
                                 death_step=death, box=a.box, pos=pos,
                                 heading=heading, speed=speed))

    agent_visible = np.zeros((len(agents), steps), dtype=bool)
    id_to_row = {a.id: i for i, a in enumerate(agents)}
    for aid, rows in vis_rows.items():
        if aid == "signals":
            continue
        for s, v in rows:
            agent_visible[id_to_row[aid], s] = v
    sig_vis_list = vis_rows.get("signals", [])
    signal_visible = np.stack(sig_vis_list, axis=1) if sig_vis_list else \
        np.zeros((len(roadgraph.signal_heads), steps), dtype=bool)

    signals = [SignalTrack(h.id, np.asarray(h.position, dtype=float),
                           signal_states[k])
               for k, h in enumerate(roadgraph.signal_heads)]
    return Scenario(dt=dt, n_steps=steps, tracks=tracks, signals=signals,
                    agent_visible=agent_visible, signal_visible=signal_visible)


# -- window export -----------------------------------------------------------

@dataclass
class WindowExport:
    multi_tensor: MultiTensor
    ego_pose: tuple          # world-frame anchor pose the window is centered on
    start_step: int
    agent_slot_ids: np.ndarray   # (E_a,) last occupant's agent id, -1 if unused
    light_slot_ids: np.ndarray
    agent_slot_occupancy: list = None  # per slot: [(agent_id, first, last), ...]


def assign_slots(visible: np.ndarray, distance: np.ndarray, n_slots: int,
                 history_len: int, reserved_rows=()):
    """Greedy slot assignment by first-visible order, nearest first.

    A slot last valid at step ``s`` may be reused once it has been vacant
    for at least ``history_len`` steps, i.e. from ``s + history_len + 1``.
    Returns (slot_of_row array with -1 for dropped rows, slot validity
    (n_slots, W), slot row ids (n_slots,) of the last occupant).
    """
    n, w = visible.shape
    first = np.full(n, w)
    last = np.full(n, -1)
    for r in range(n):
        idx = np.flatnonzero(visible[r])
        if len(idx):
            first[r], last[r] = idx[0], idx[-1]
    slot_free_at = np.zeros(n_slots, dtype=int)
    slot_of = np.full(n, -1)
    slot_valid = np.zeros((n_slots, w), dtype=bool)
    slot_last_row = np.full(n_slots, -1)
    for tau in range(w):
        cands = [r for r in range(n)
                 if r not in reserved_rows and first[r] == tau]
        cands.sort(key=lambda r: distance[r, tau])
        for r in cands:
            free = np.flatnonzero(slot_free_at <= tau)
            if len(free) == 0:
                continue  # overflow: farthest-first drop
            s = int(free[0])
            slot_of[r] = s
            slot_valid[s, first[r]:last[r] + 1] = visible[r, first[r]:last[r] + 1]
            slot_free_at[s] = last[r] + history_len + 1
            slot_last_row[s] = r
    return slot_of, slot_valid, slot_last_row


def export_windows(scenario: Scenario, roadgraph: RoadGraph,
                   window_len: int = 91, stride: int = 91,
                   e_agents: int = 32, e_lights: int = 8,
                   history_len: int = 11,
                   norm: NormConfig = NormConfig(),
                   max_export_range_m: float = 230.0):
    """Cut a scenario into ego-centered training windows.

    Each window is re-centered on the ego pose at its anchor step
    (history_len - 1 into the window); validity is the ego's visibility;
    agents map to slots 1..E_a-1 by first-visible order with nearest-first
    overflow priority and slot reuse after a history_len vacancy.
    """
    if scenario.n_steps < window_len:
        raise ValueError(
            f"scenario has {scenario.n_steps} steps < window_len {window_len}")
    anchor_offset = history_len - 1
    out = []
    for start in range(0, scenario.n_steps - window_len + 1, stride):
        ego_pose = scenario.ego_pose(start + anchor_offset)
        win = slice(start, start + window_len)
        n = len(scenario.tracks)
        vis = scenario.agent_visible[:, win].copy()

        ego_xy = np.stack([scenario.ego.pos[win, 0], scenario.ego.pos[win, 1]], axis=1)
        dist = np.zeros((n, window_len))
        for r, t in enumerate(scenario.tracks):
            dist[r] = np.hypot(t.pos[win, 0] - ego_xy[:, 0],
                               t.pos[win, 1] - ego_xy[:, 1])
            # out-of-bound guard for the normalized [-3, 3] range
            rel = dist[r][vis[r]] if vis[r].any() else np.zeros(0)
            if len(rel) and rel.max() > max_export_range_m:
                vis[r] = False

        # ego owns slot 0; the others are assigned to slots 1..E_a-1
        slot_of, _, _ = assign_slots(
            vis, dist, e_agents - 1, history_len, reserved_rows=(0,))

        agent_pos = np.zeros((e_agents, window_len, 3))
        agent_heading = np.zeros((e_agents, window_len))
        agent_box = np.zeros((e_agents, window_len, 3))
        agent_type = np.full(e_agents, -1)
        agent_valid = np.zeros((e_agents, window_len), dtype=bool)
        slot_ids = np.full(e_agents, -1)
        occupancy = [[] for _ in range(e_agents)]

        def fill_agent(slot, row, validity):
            t = scenario.tracks[row]
            agent_valid[slot] |= validity
            agent_type[slot] = t.type
            slot_ids[slot] = t.id
            idx = np.flatnonzero(validity)
            occupancy[slot].append((t.id, int(idx[0]), int(idx[-1])))
            steps = idx + start
            local = geometry.to_frame(t.pos[steps][:, :2], ego_pose)
            agent_pos[slot, idx, 0] = local[:, 0]
            agent_pos[slot, idx, 1] = local[:, 1]
            agent_pos[slot, idx, 2] = t.pos[steps, 2]
            agent_heading[slot, idx] = geometry.wrap_angle(
                t.heading[steps] - ego_pose[2])
            agent_box[slot, idx] = t.box

        fill_agent(0, 0, np.ones(window_len, dtype=bool))  # ego always valid
        for row in range(1, n):
            s = slot_of[row]
            if s >= 0:
                fill_agent(s + 1, row, vis[row])

        # lights
        m = len(scenario.signals)
        svis = scenario.signal_visible[:, win].copy()
        sdist = np.zeros((m, window_len))
        for k, sg in enumerate(scenario.signals):
            sdist[k] = np.hypot(sg.position[0] - ego_xy[:, 0],
                                sg.position[1] - ego_xy[:, 1])
        s_slot_of, _, _ = assign_slots(svis, sdist, e_lights, history_len)

        light_pos = np.zeros((e_lights, window_len, 3))
        light_state = np.zeros((e_lights, window_len), dtype=int)
        light_valid = np.zeros((e_lights, window_len), dtype=bool)
        light_ids = np.full(e_lights, -1)
        for k in range(m):
            s = s_slot_of[k]
            if s < 0:
                continue
            sg = scenario.signals[k]
            validity = svis[k]
            light_valid[s] |= validity
            light_ids[s] = sg.head_id
            idx = np.flatnonzero(validity)
            local = geometry.to_frame(sg.position[None, :2], ego_pose)[0]
            light_pos[s, idx, 0] = local[0]
            light_pos[s, idx, 1] = local[1]
            light_pos[s, idx, 2] = sg.position[2]
            light_state[s, idx] = sg.states[idx + start]

        raw = RawScene(agent_pos=agent_pos, agent_heading=agent_heading,
                       agent_box=agent_box, agent_type=agent_type,
                       agent_valid=agent_valid, light_pos=light_pos,
                       light_state=light_state, light_valid=light_valid)
        out.append(WindowExport(multi_tensor=normalize(raw, norm),
                                ego_pose=ego_pose, start_step=start,
                                agent_slot_ids=slot_ids,
                                light_slot_ids=light_ids,
                                agent_slot_occupancy=occupancy))
    return out


def validity_archetype_counts(valid: np.ndarray) -> dict:
    """Count spawn / occlusion / disocclusion / removal patterns in rows."""
    counts = {"spawn": 0, "occlusion": 0, "disocclusion": 0, "removal": 0}
    for row in np.asarray(valid, dtype=bool):
        idx = np.flatnonzero(row)
        if len(idx) == 0:
            continue
        first, last = idx[0], idx[-1]
        if first > 0:
            counts["spawn"] += 1
        if last < len(row) - 1:
            counts["removal"] += 1
        interior = row[first:last + 1]
        if not interior.all():
            counts["occlusion"] += 1
            counts["disocclusion"] += 1
    return counts
