"""Intelligent Driver Model car following over lane-graph routes.

Used both as the scripted ground-truth behavior of the synthetic world
and as the non-learned baseline controller in closed-loop rollouts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from .tensors import STOPPING_STATES

LOOKAHEAD_M = 80.0
LANE_MATCH_TOLERANCE_M = 3.0


@dataclass(frozen=True)
class IDMParams:
    v0: float = 12.0          # desired speed, m/s
    t_headway: float = 1.5    # s
    a_max: float = 1.5        # m/s^2
    b_comf: float = 2.0       # m/s^2
    s0: float = 2.0           # minimum gap, m
    delta: float = 4.0

    def __post_init__(self):
        if min(self.v0, self.t_headway, self.a_max, self.b_comf, self.s0) <= 0:
            raise ValueError("IDM parameters must be positive")
        if self.delta < 1:
            raise ValueError("IDM exponent must be >= 1")


def idm_accel(v: float, v_lead: float, s: float, p: IDMParams) -> float:
    """IDM acceleration for speed v, lead speed v_lead and bumper gap s.

    No lead is s = inf. Non-positive gaps return the documented emergency
    clamp of -5 * b_comf.
    """
    if s <= 0.0:
        return -5.0 * p.b_comf
    interaction = 0.0
    if math.isfinite(s):
        dv = v - v_lead
        s_star = p.s0 + v * p.t_headway + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf))
        interaction = (s_star / s) ** 2
    return p.a_max * (1.0 - (v / p.v0) ** p.delta - interaction)


def route_search(roadgraph, start_lane: int, rng: np.random.Generator,
                 max_lanes: int = 60, stop_at_exit: bool = True) -> list:
    """Random walk over lane successors.

    Terminates at a lane without successors, at an exit stub (unless
    ``stop_at_exit`` is False, in which case boundary U-turns keep the
    walk going), or after ``max_lanes`` lanes.
    """
    if start_lane not in roadgraph.lanes:
        raise KeyError(f"unknown start lane {start_lane}")
    path = [start_lane]
    while len(path) < max_lanes:
        lane = roadgraph.lanes[path[-1]]
        if stop_at_exit and lane.is_exit:
            break
        succ = lane.successors
        if not succ:
            break
        path.append(succ[int(rng.integers(0, len(succ)))])
    return path


class Route:
    """A lane path with its concatenated geometry and stop-line positions."""

    def __init__(self, roadgraph, lane_ids):
        self.lane_ids = list(lane_ids)
        pts = []
        self.lane_start = []  # arc length where each lane begins
        cum = 0.0
        stops_by_lane = {}
        for sl in roadgraph.stop_lines:
            stops_by_lane.setdefault(sl.lane_id, []).append(sl)
        self.stops = []  # (arc_s, signal_id)
        for lid in self.lane_ids:
            lane = roadgraph.lanes[lid]
            self.lane_start.append(cum)
            length = geometry.polyline_length(lane.points)
            for sl in stops_by_lane.get(lid, []):
                self.stops.append((cum + length, sl.signal_id))
            p = np.asarray(lane.points, dtype=float)
            if pts and np.allclose(pts[-1][-1], p[0]):
                p = p[1:]
            pts.append(p)
            cum += length
        self.polyline = np.vstack(pts)
        self.total_length = cum
        self._cum = np.concatenate([[0.0], np.cumsum(
            np.hypot(np.diff(self.polyline[:, 0]), np.diff(self.polyline[:, 1])))])

    def pose_at(self, s: float):
        """(x, y, heading) at arc length s along the route."""
        pts, cum = self.polyline, self._cum
        s = min(max(s, 0.0), cum[-1])
        i = int(np.searchsorted(cum, s, side="right")) - 1
        i = min(max(i, 0), len(pts) - 2)
        seg = cum[i + 1] - cum[i]
        frac = (s - cum[i]) / seg if seg > 1e-12 else 0.0
        p = pts[i] + frac * (pts[i + 1] - pts[i])
        heading = math.atan2(pts[i + 1][1] - pts[i][1], pts[i + 1][0] - pts[i][0])
        return float(p[0]), float(p[1]), heading

    def lane_at(self, s: float):
        """(lane_id, s_within_lane) at route arc length s."""
        i = int(np.searchsorted(self.lane_start, s, side="right")) - 1
        i = min(max(i, 0), len(self.lane_ids) - 1)
        return self.lane_ids[i], s - self.lane_start[i]


def idm_step(arc, speed, length, active, routes, signal_states, dt: float,
             params: IDMParams, speed_limits=None):
    """Advance all route followers one step of Euler integration.

    arc/speed/length/active are per-agent arrays; routes is the matching
    list of Route objects; signal_states maps signal id -> SignalState for
    the current step. Red and yellow stop lines act as stationary leads.
    Returns (new_arc, new_speed).
    """
    n = len(arc)
    new_arc = np.array(arc, dtype=float)
    new_speed = np.array(speed, dtype=float)

    # registry of (agent, s_in_lane) per lane for lead lookup
    by_lane = {}
    for i in range(n):
        if not active[i]:
            continue
        lid, s_in = routes[i].lane_at(arc[i])
        by_lane.setdefault(lid, []).append((i, s_in))

    for i in range(n):
        if not active[i]:
            continue
        route = routes[i]
        my_lane_idx = int(np.searchsorted(route.lane_start, arc[i], side="right")) - 1
        my_lane_idx = min(max(my_lane_idx, 0), len(route.lane_ids) - 1)

        gap = float("inf")
        v_lead = 0.0
        # nearest vehicle ahead along my route
        for k in range(my_lane_idx, len(route.lane_ids)):
            if route.lane_start[k] - arc[i] > LOOKAHEAD_M:
                break
            for j, s_in in by_lane.get(route.lane_ids[k], []):
                if j == i:
                    continue
                dist = route.lane_start[k] + s_in - arc[i]
                if dist <= 0.0 or dist > LOOKAHEAD_M:
                    continue
                g = dist - 0.5 * length[i] - 0.5 * length[j]
                if g < gap:
                    gap = g
                    v_lead = speed[j]
        # red/yellow stop lines ahead act as a stationary zero-length lead
        for stop_s, sig_id in route.stops:
            d = stop_s - arc[i]
            if 0.05 < d <= LOOKAHEAD_M:
                state = signal_states.get(sig_id)
                if state is not None and state in STOPPING_STATES:
                    g = d - 0.5 * length[i]
                    if g < gap:
                        gap = g
                        v_lead = 0.0

        p = params
        if speed_limits is not None:
            lid, _ = route.lane_at(arc[i])
            limit = speed_limits.get(lid)
            if limit is not None and limit != p.v0:
                p = IDMParams(v0=limit, t_headway=params.t_headway,
                              a_max=params.a_max, b_comf=params.b_comf,
                              s0=params.s0, delta=params.delta)
        a = idm_accel(speed[i], v_lead, gap, p)
        new_speed[i] = max(0.0, speed[i] + a * dt)
        new_arc[i] = arc[i] + new_speed[i] * dt
    return new_arc, new_speed
