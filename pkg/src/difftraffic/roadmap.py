"""Procedural grid-city road network with signalized intersections.

The map is a rows x cols lattice of four-way intersections joined by
two-lane roads (one lane per direction, right-hand traffic), with entry
and exit stubs on the boundary, stop lines and one signal head per
approach, rectangular road polygons, and per-road parking lots. Boundary
U-turn connectors join each exit stub back to its entry stub so the lane
graph is strongly connected; the simulator still retires agents that
reach the end of an exit stub.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry

LANE_OFFSET_M = 2.0
INTERSECTION_HALF_M = 10.0
ROAD_WIDTH_M = 9.0
SPEED_LIMIT_MPS = 12.0
POINT_SPACING_M = 5.0
SIGNAL_HEIGHT_M = 5.0
PARKING_SIZE_M = (20.0, 12.0)


@dataclass
class Lane:
    id: int
    points: np.ndarray            # (N, 2) centerline
    speed_limit: float = SPEED_LIMIT_MPS
    successors: list = field(default_factory=list)
    predecessors: list = field(default_factory=list)
    kind: str = "road"            # road | connector | uturn
    is_entry: bool = False
    is_exit: bool = False

    @property
    def length(self):
        return geometry.polyline_length(self.points)


@dataclass
class StopLine:
    p0: tuple
    p1: tuple
    lane_id: int
    signal_id: int


@dataclass
class SignalHead:
    id: int
    position: np.ndarray          # (3,)
    lane_ids: list
    axis: str                     # "ns" or "ew"


@dataclass
class RoadGraph:
    lanes: dict
    stop_lines: list
    signal_heads: list
    road_polygons: list
    parking_polygons: list
    extent: tuple                 # xmin, ymin, xmax, ymax

    @property
    def entry_lane_ids(self):
        return [l.id for l in self.lanes.values() if l.is_entry]

    @property
    def exit_lane_ids(self):
        return [l.id for l in self.lanes.values() if l.is_exit]

    def validate(self):
        ids = set(self.lanes)
        for lane in self.lanes.values():
            for s in lane.successors + lane.predecessors:
                if s not in ids:
                    raise ValueError(f"lane {lane.id} references unknown lane {s}")
        for head in self.signal_heads:
            for lid in head.lane_ids:
                if lid not in ids:
                    raise ValueError(f"signal {head.id} references unknown lane {lid}")

    def nearest_lane(self, xy, kinds=("road", "connector")):
        """(lane_id, arc_s, distance) of the closest matching lane."""
        best = (None, 0.0, float("inf"))
        for lane in self.lanes.values():
            if lane.kind not in kinds:
                continue
            s, d = geometry.project_to_polyline(lane.points, xy)
            if d < best[2]:
                best = (lane.id, s, d)
        return best

    def contains(self, xy) -> bool:
        xmin, ymin, xmax, ymax = self.extent
        return xmin <= xy[0] <= xmax and ymin <= xy[1] <= ymax

    def is_on_road(self, xy) -> bool:
        return any(geometry.point_in_polygon(xy, poly) for poly in self.road_polygons)

    # -- serialization ----------------------------------------------------
    def to_json_dict(self):
        return {
            "version": 1,
            "lanes": [{
                "id": l.id, "points": np.asarray(l.points).tolist(),
                "speed_limit": l.speed_limit, "successors": list(l.successors),
                "predecessors": list(l.predecessors), "kind": l.kind,
                "is_entry": l.is_entry, "is_exit": l.is_exit,
            } for l in sorted(self.lanes.values(), key=lambda l: l.id)],
            "stop_lines": [{"p0": list(s.p0), "p1": list(s.p1),
                            "lane_id": s.lane_id, "signal_id": s.signal_id}
                           for s in self.stop_lines],
            "signal_heads": [{"id": h.id, "position": np.asarray(h.position).tolist(),
                              "lane_ids": list(h.lane_ids), "axis": h.axis}
                             for h in self.signal_heads],
            "road_polygons": [np.asarray(p).tolist() for p in self.road_polygons],
            "parking_polygons": [np.asarray(p).tolist() for p in self.parking_polygons],
            "extent": list(self.extent),
        }

    @classmethod
    def from_json_dict(cls, d):
        lanes = {l["id"]: Lane(
            id=l["id"], points=np.array(l["points"]), speed_limit=l["speed_limit"],
            successors=list(l["successors"]), predecessors=list(l["predecessors"]),
            kind=l["kind"], is_entry=l["is_entry"], is_exit=l["is_exit"],
        ) for l in d["lanes"]}
        return cls(
            lanes=lanes,
            stop_lines=[StopLine(tuple(s["p0"]), tuple(s["p1"]), s["lane_id"],
                                 s["signal_id"]) for s in d["stop_lines"]],
            signal_heads=[SignalHead(h["id"], np.array(h["position"]),
                                     list(h["lane_ids"]), h["axis"])
                          for h in d["signal_heads"]],
            road_polygons=[np.array(p) for p in d["road_polygons"]],
            parking_polygons=[np.array(p) for p in d["parking_polygons"]],
            extent=tuple(d["extent"]),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def _quad_bezier(p0, p1, p2, n=10):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def _corner_point(p0, d0, p2, d2):
    """Intersection of the rays p0 + t d0 and p2 - u d2 (turn apex)."""
    a = np.array([[d0[0], d2[0]], [d0[1], d2[1]]])
    det = np.linalg.det(a)
    if abs(det) < 1e-9:
        return 0.5 * (p0 + p2)
    t, _ = np.linalg.solve(a, p2 - p0)
    return p0 + t * d0


def generate_map(rows: int, cols: int, block_size_m: float = 120.0,
                 seed: int = 0) -> RoadGraph:
    """Build a rows x cols signalized grid city; deterministic per seed."""
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    rng = np.random.default_rng(seed)
    b = float(block_size_m)
    ih = INTERSECTION_HALF_M
    stub = max(0.6 * b, 3.0 * ih)

    nodes = {(r, c): np.array([c * b, r * b]) for r in range(rows) for c in range(cols)}
    dirs = {"e": np.array([1.0, 0.0]), "w": np.array([-1.0, 0.0]),
            "n": np.array([0.0, 1.0]), "s": np.array([0.0, -1.0])}

    # road list: (endpoint_a, endpoint_b, a_is_node, b_is_node), canonical a->b
    roads = []
    for r in range(rows):
        for c in range(cols):
            p = nodes[(r, c)]
            if c + 1 < cols:
                roads.append((p, nodes[(r, c + 1)], True, True))
            if r + 1 < rows:
                roads.append((p, nodes[(r + 1, c)], True, True))
            if c == 0:
                roads.append((p + dirs["w"] * stub, p, False, True))
            if c == cols - 1:
                roads.append((p, p + dirs["e"] * stub, True, False))
            if r == 0:
                roads.append((p + dirs["s"] * stub, p, False, True))
            if r == rows - 1:
                roads.append((p, p + dirs["n"] * stub, True, False))

    lanes = {}
    next_id = [0]

    def add_lane(points, kind="road", is_entry=False, is_exit=False):
        lid = next_id[0]
        next_id[0] += 1
        lanes[lid] = Lane(id=lid, points=np.asarray(points, dtype=float),
                          kind=kind, is_entry=is_entry, is_exit=is_exit)
        return lid

    def link(a, b):
        lanes[a].successors.append(b)
        lanes[b].predecessors.append(a)

    # incoming[nodekey][dir_of_travel] = lane id arriving at that node
    incoming = {k: {} for k in nodes}
    outgoing = {k: {} for k in nodes}
    node_key = {tuple(np.round(v, 6)): k for k, v in nodes.items()}

    def key_of(p):
        return node_key.get(tuple(np.round(p, 6)))

    boundary_pairs = []  # (exit_lane, entry_lane, outer_point, outward_dir)
    for a, b_pt, a_node, b_node in roads:
        d = b_pt - a
        d = d / np.hypot(*d)
        right = np.array([d[1], -d[0]])
        trim_a = ih if a_node else 0.0
        trim_b = ih if b_node else 0.0
        # forward lane a->b
        p0 = a + d * trim_a + right * LANE_OFFSET_M
        p1 = b_pt - d * trim_b + right * LANE_OFFSET_M
        fwd = add_lane(geometry.resample_polyline([p0, p1], POINT_SPACING_M),
                       is_entry=not a_node, is_exit=not b_node)
        # reverse lane b->a
        q0 = b_pt - d * trim_b - right * LANE_OFFSET_M
        q1 = a + d * trim_a - right * LANE_OFFSET_M
        rev = add_lane(geometry.resample_polyline([q0, q1], POINT_SPACING_M),
                       is_entry=not b_node, is_exit=not a_node)
        dir_letter_fwd = max(dirs, key=lambda k: dirs[k] @ d)
        dir_letter_rev = max(dirs, key=lambda k: -(dirs[k] @ d))
        if b_node:
            incoming[key_of(b_pt)][dir_letter_fwd] = fwd
        if a_node:
            incoming[key_of(a)][dir_letter_rev] = rev
        if a_node:
            outgoing[key_of(a)][dir_letter_fwd] = fwd
        if b_node:
            outgoing[key_of(b_pt)][dir_letter_rev] = rev
        if not b_node:  # boundary at b: fwd exits, rev enters
            boundary_pairs.append((fwd, rev, b_pt, d))
        if not a_node:  # boundary at a: rev exits, fwd enters
            boundary_pairs.append((rev, fwd, a, -d))

    # intersection connectors: straight, right and left turns
    turn_map = {"e": {"straight": "e", "right": "s", "left": "n"},
                "w": {"straight": "w", "right": "n", "left": "s"},
                "n": {"straight": "n", "right": "e", "left": "w"},
                "s": {"straight": "s", "right": "w", "left": "e"}}
    for k in sorted(nodes):
        for d_in in ("e", "w", "n", "s"):
            lin = incoming[k].get(d_in)
            if lin is None:
                continue
            for maneuver, d_out in turn_map[d_in].items():
                lout = outgoing[k].get(d_out)
                if lout is None:
                    continue
                p0 = lanes[lin].points[-1]
                p2 = lanes[lout].points[0]
                apex = _corner_point(p0, dirs[d_in], p2, dirs[d_out])
                conn = add_lane(_quad_bezier(p0, apex, p2), kind="connector")
                link(lin, conn)
                link(conn, lout)

    # boundary U-turns keep the lane graph strongly connected
    for exit_lane, entry_lane, outer, outward in boundary_pairs:
        p0 = lanes[exit_lane].points[-1]
        p2 = lanes[entry_lane].points[0]
        apex = outer + outward * 3.0 * LANE_OFFSET_M
        conn = add_lane(_quad_bezier(p0, apex, p2), kind="uturn")
        link(exit_lane, conn)
        link(conn, entry_lane)

    # stop lines and signal heads per approach
    stop_lines = []
    signal_heads = []
    sig_id = 0
    for k in sorted(nodes):
        for d_in in ("e", "w", "n", "s"):
            lin = incoming[k].get(d_in)
            if lin is None:
                continue
            end = lanes[lin].points[-1]
            d = dirs[d_in]
            right = np.array([d[1], -d[0]])
            p0 = end - right * 2.0
            p1 = end + right * 2.0
            head = SignalHead(
                id=sig_id,
                position=np.array([*(end + right * 4.0), SIGNAL_HEIGHT_M]),
                lane_ids=[lin],
                axis="ns" if d_in in ("n", "s") else "ew",
            )
            stop_lines.append(StopLine(tuple(p0), tuple(p1), lin, sig_id))
            signal_heads.append(head)
            sig_id += 1

    # road polygons: one rectangle per road plus intersection squares
    road_polygons = []
    for a, b_pt, _, _ in roads:
        d = b_pt - a
        d = d / np.hypot(*d)
        right = np.array([d[1], -d[0]]) * (ROAD_WIDTH_M / 2.0)
        road_polygons.append(np.array([a - right, b_pt - right, b_pt + right, a + right]))
    for k in sorted(nodes):
        p = nodes[k]
        h = ih + 1.0
        road_polygons.append(np.array(
            [p + [-h, -h], p + [h, -h], p + [h, h], p + [-h, h]]))

    # parking lots beside long roads, side alternating per seed
    parking_polygons = []
    pw, ph = PARKING_SIZE_M
    for a, b_pt, _, _ in roads:
        if np.hypot(*(b_pt - a)) < 40.0:
            continue
        d = b_pt - a
        d = d / np.hypot(*d)
        right = np.array([d[1], -d[0]])
        side = 1.0 if rng.random() < 0.5 else -1.0
        center = 0.5 * (a + b_pt) + side * right * (ROAD_WIDTH_M / 2.0 + ph / 2.0 + 2.0)
        u = d * (pw / 2.0)
        v = right * (ph / 2.0)
        parking_polygons.append(np.array(
            [center - u - v, center + u - v, center + u + v, center - u + v]))

    all_pts = np.vstack([lane.points for lane in lanes.values()]
                        + road_polygons + parking_polygons)
    margin = 6.0
    extent = (float(all_pts[:, 0].min() - margin), float(all_pts[:, 1].min() - margin),
              float(all_pts[:, 0].max() + margin), float(all_pts[:, 1].max() + margin))

    graph = RoadGraph(lanes=lanes, stop_lines=stop_lines, signal_heads=signal_heads,
                      road_polygons=road_polygons, parking_polygons=parking_polygons,
                      extent=extent)
    graph.validate()
    return graph
