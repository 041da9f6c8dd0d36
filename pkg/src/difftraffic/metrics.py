"""Long-horizon realism metrics: sliding windows, per-feature histograms,
Jensen-Shannon divergences, traffic-light transition matrices, and the
composite score.

Simulated and reference traces are cut into fixed-length windows; each
feature yields one value (or a list) per window; the distributions of
those values are compared with base-2 JSD, so every divergence lies in
[0, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .tensors import N_LIGHT_STATES, RED_STATES
from .traces import TraceData

FEATURES = (
    "n_valid", "n_entering", "n_exiting", "entering_distance",
    "exiting_distance", "offroad_rate", "collision_rate", "average_speed",
    "tl_violation_rate",
)
COMPOSITE_FEATURES = FEATURES[:8]  # everything except the TL metrics
SIGNAL_MATCH_RADIUS_M = 5.0


@dataclass
class Histogram:
    """Fixed-bin histogram normalized to a smoothed probability vector."""

    edges: np.ndarray
    counts: np.ndarray
    smoothing: float = 1e-9

    @classmethod
    def from_values(cls, values, edges, smoothing: float = 1e-9):
        edges = np.asarray(edges, dtype=float)
        v = np.asarray(list(values), dtype=float)
        if len(v):
            v = np.clip(v, edges[0], np.nextafter(edges[-1], -np.inf))
        counts, _ = np.histogram(v, bins=edges)
        return cls(edges=edges, counts=counts.astype(float), smoothing=smoothing)

    @property
    def n_samples(self):
        return float(self.counts.sum())

    def prob(self):
        p = self.counts + self.smoothing
        return p / p.sum()


def count_edges(max_count: int):
    return np.arange(0, max_count + 2) - 0.5


DEFAULT_EDGES = {
    "n_valid": count_edges(32),
    "n_entering": count_edges(32),
    "n_exiting": count_edges(32),
    "entering_distance": np.linspace(0.0, 120.0, 33),
    "exiting_distance": np.linspace(0.0, 120.0, 33),
    "offroad_rate": np.linspace(0.0, 1.0, 21),
    "collision_rate": np.linspace(0.0, 1.0, 21),
    "average_speed": np.linspace(0.0, 25.0, 33),
    "tl_violation_rate": np.linspace(0.0, 1.0, 21),
}


def js_divergence(p, q) -> float:
    """Base-2 Jensen-Shannon divergence between two probability vectors."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions must have equal length")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("distributions must be non-negative")
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


# -- windows -----------------------------------------------------------------

@dataclass
class Window:
    trace: TraceData
    start: int
    length: int
    _agents: list = field(default=None, repr=False)

    def sl(self):
        return slice(self.start, self.start + self.length)

    @property
    def dt(self):
        return self.trace.dt

    def agents(self):
        """Agents present in the window: (row, id, valid (W,) bool)."""
        if self._agents is None:
            out = []
            t = self.trace
            win = self.sl()
            valid = t.valid[:, win]
            ids = t.agent_id[:, win]
            for row in range(t.n_rows):
                if not valid[row].any():
                    continue
                for aid in np.unique(ids[row][valid[row]]):
                    out.append((row, int(aid), valid[row] & (ids[row] == aid)))
            self._agents = out
        return self._agents


def sliding_windows(trace: TraceData, window_len: int = 91,
                    stride: int = 91) -> list:
    """Windows at offsets 0, stride, 2*stride, ...; partial tails dropped."""
    if trace.n_steps < window_len:
        raise ValueError(
            f"trace length {trace.n_steps} shorter than window {window_len}")
    return [Window(trace, start, window_len)
            for start in range(0, trace.n_steps - window_len + 1, stride)]


# -- per-window feature extraction -------------------------------------------

def _ego_distance(window: Window, row, steps):
    t = window.trace
    ego = t.ego_row
    s = np.asarray(steps) + window.start
    return np.hypot(t.x[row, s] - t.x[ego, s], t.y[row, s] - t.y[ego, s])


def _head_states(window: Window, roadgraph):
    """Per-step state of each map signal head, -1 where unobserved."""
    t = window.trace
    n_heads = len(roadgraph.signal_heads)
    out = np.full((n_heads, window.length), -1)
    if t.signal_valid is None or not len(t.signal_valid):
        return out
    head_xy = np.array([h.position[:2] for h in roadgraph.signal_heads])
    win = window.sl()
    sv = t.signal_valid[:, win]
    sx, sy = t.signal_x[:, win], t.signal_y[:, win]
    ss = t.signal_state[:, win]
    for row in range(sv.shape[0]):
        for tau in np.flatnonzero(sv[row]):
            d = np.hypot(head_xy[:, 0] - sx[row, tau], head_xy[:, 1] - sy[row, tau])
            k = int(np.argmin(d))
            if d[k] <= SIGNAL_MATCH_RADIUS_M:
                out[k, tau] = ss[row, tau]
    return out


def extract(feature: str, window: Window, roadgraph=None):
    """One feature value (or list of values) for one window."""
    agents = window.agents()
    t = window.trace
    win = window.sl()

    if feature == "n_valid":
        return len(agents)

    if feature in ("n_entering", "n_exiting", "entering_distance",
                   "exiting_distance"):
        entering, exiting = [], []
        for row, aid, mask in agents:
            idx = np.flatnonzero(mask)
            if idx[0] > 0:
                entering.append((row, idx[0]))
            if idx[-1] < window.length - 1:
                exiting.append((row, idx[-1]))
        if feature == "n_entering":
            return len(entering)
        if feature == "n_exiting":
            return len(exiting)
        if feature == "entering_distance":
            return [float(_ego_distance(window, row, [tau])[0])
                    for row, tau in entering]
        return [float(_ego_distance(window, row, [tau])[0])
                for row, tau in exiting]

    if feature == "offroad_rate":
        if not agents:
            return 0.0
        if roadgraph is None:
            raise ValueError("offroad_rate needs the roadgraph")
        n_off = 0
        for row, aid, mask in agents:
            steps = np.flatnonzero(mask) + window.start
            pts = np.stack([t.x[row, steps], t.y[row, steps]], axis=1)
            on = np.zeros(len(pts), dtype=bool)
            for poly in roadgraph.road_polygons:
                on |= geometry.points_in_polygon(pts, poly)
                if on.all():
                    break
            n_off += bool((~on).any())
        return n_off / len(agents)

    if feature == "collision_rate":
        if not agents:
            return 0.0
        collided = np.zeros(len(agents), dtype=bool)
        for tau in range(window.length):
            present = [k for k, (row, _, mask) in enumerate(agents) if mask[tau]]
            if len(present) < 2:
                continue
            s = window.start + tau
            rows = [agents[k][0] for k in present]
            xs = t.x[rows, s]
            ys = t.y[rows, s]
            hs = t.heading[rows, s]
            ls = t.length[rows, s]
            ws = t.width[rows, s]
            radii = 0.5 * np.hypot(ls, ws)
            for i in range(len(present)):
                for j in range(i + 1, len(present)):
                    if collided[present[i]] and collided[present[j]]:
                        continue
                    if math.hypot(xs[i] - xs[j], ys[i] - ys[j]) > radii[i] + radii[j]:
                        continue
                    if geometry.obb_overlap((xs[i], ys[i], hs[i]), (ls[i], ws[i]),
                                            (xs[j], ys[j], hs[j]), (ls[j], ws[j])):
                        collided[present[i]] = True
                        collided[present[j]] = True
        return float(collided.sum()) / len(agents)

    if feature == "average_speed":
        if not agents:
            return 0.0
        speeds = []
        for row, aid, mask in agents:
            idx = np.flatnonzero(mask)
            pairs = idx[np.flatnonzero(np.diff(idx) == 1)]
            if not len(pairs):
                continue
            s = pairs + window.start
            d = np.hypot(t.x[row, s + 1] - t.x[row, s], t.y[row, s + 1] - t.y[row, s])
            speeds.append(float(np.mean(d / window.dt)))
        return float(np.mean(speeds)) if speeds else 0.0

    if feature == "tl_violation_rate":
        if not agents:
            return 0.0
        if roadgraph is None:
            raise ValueError("tl_violation_rate needs the roadgraph")
        head_states = _head_states(window, roadgraph)
        red = np.isin(head_states, [int(s) for s in RED_STATES])
        n_violators = 0
        for row, aid, mask in agents:
            idx = np.flatnonzero(mask)
            pairs = idx[np.flatnonzero(np.diff(idx) == 1)]
            hit = False
            for tau in pairs:
                s = window.start + tau
                p0 = (t.x[row, s], t.y[row, s])
                p1 = (t.x[row, s + 1], t.y[row, s + 1])
                for k, sl in enumerate(roadgraph.stop_lines):
                    if not red[sl.signal_id, tau]:
                        continue
                    mid = (0.5 * (sl.p0[0] + sl.p1[0]), 0.5 * (sl.p0[1] + sl.p1[1]))
                    if abs(mid[0] - p0[0]) > 12.0 or abs(mid[1] - p0[1]) > 12.0:
                        continue
                    if geometry.segments_intersect(p0, p1, sl.p0, sl.p1):
                        hit = True
                        break
                if hit:
                    break
            n_violators += hit
        return n_violators / len(agents)

    raise ValueError(f"unknown feature {feature!r}")


# -- traffic light transitions ------------------------------------------------

@dataclass
class TransitionMatrix:
    counts: np.ndarray  # (9, 9), diagonal identically zero
    flags: list = field(default_factory=list)

    @classmethod
    def from_traces(cls, traces):
        counts = np.zeros((N_LIGHT_STATES, N_LIGHT_STATES))
        for t in traces:
            if t.signal_valid is None or not len(t.signal_valid):
                continue
            for row in range(t.signal_valid.shape[0]):
                v = t.signal_valid[row]
                s = t.signal_state[row]
                both = v[:-1] & v[1:]
                changed = both & (s[:-1] != s[1:])
                for tau in np.flatnonzero(changed):
                    counts[s[tau], s[tau + 1]] += 1.0
        return cls(counts=counts)

    def normalized(self):
        """Row-stochastic matrix; all-zero rows stay zero and are flagged."""
        out = np.zeros_like(self.counts)
        flags = []
        sums = self.counts.sum(axis=1)
        for i in range(self.counts.shape[0]):
            if sums[i] > 0:
                out[i] = self.counts[i] / sums[i]
            else:
                flags.append(f"row {i} has no transitions")
        return TransitionMatrix(counts=out, flags=flags)

    def total(self):
        return float(self.counts.sum())


def transition_jsd(a: TransitionMatrix, b: TransitionMatrix) -> float:
    """JSD between two matrices, flattening rows into one distribution."""
    pa = a.normalized().counts.ravel()
    pb = b.normalized().counts.ravel()
    if pa.sum() == 0 or pb.sum() == 0:
        raise ValueError("cannot compare an empty transition matrix")
    return js_divergence(pa / pa.sum(), pb / pb.sum())


# -- report -------------------------------------------------------------------

@dataclass
class MetricReport:
    feature_jsd: dict
    tl_transition_jsd: float | None
    composite: float
    all_ten_mean: float | None
    n_sim_windows: int
    n_ref_windows: int
    flags: list = field(default_factory=list)
    per_window_sim: dict = field(default_factory=dict)   # feature -> [[per trace window values]]
    histograms: dict = field(default_factory=dict)

    def to_json_dict(self):
        return {
            "feature_jsd": self.feature_jsd,
            "tl_transition_jsd": self.tl_transition_jsd,
            "composite": self.composite,
            "all_ten_mean": self.all_ten_mean,
            "n_sim_windows": self.n_sim_windows,
            "n_ref_windows": self.n_ref_windows,
            "flags": self.flags,
        }

    def to_text_table(self):
        cols = [("# Valid Agents", "n_valid"), ("# Entering Agents", "n_entering"),
                ("# Exiting Agents", "n_exiting"), ("Entering Distance", "entering_distance"),
                ("Exiting Distance", "exiting_distance"), ("Offroad Rate", "offroad_rate"),
                ("Collision Rate", "collision_rate"), ("Average Speed", "average_speed"),
                ("TL Violation", "tl_violation_rate")]
        lines = ["metric                value", "-" * 30]
        for label, key in cols:
            v = self.feature_jsd.get(key)
            lines.append(f"{label:<21} {'-' if v is None else f'{v:.4f}'}")
        v = self.tl_transition_jsd
        lines.append(f"{'TL Transition':<21} {'-' if v is None else f'{v:.4f}'}")
        lines.append(f"{'Composite':<21} {self.composite:.4f}")
        return "\n".join(lines)


def composite(feature_jsd: dict):
    """Mean of the eight non-TL divergences; missing ones are excluded."""
    values = [feature_jsd[f] for f in COMPOSITE_FEATURES
              if feature_jsd.get(f) is not None]
    if not values:
        raise ValueError("no composite inputs present")
    flags = [f"composite missing {f}" for f in COMPOSITE_FEATURES
             if feature_jsd.get(f) is None]
    return float(np.mean(values)), flags


def pooled_values(traces, feature, roadgraph, window_len, stride):
    """Feature values pooled over every window of every trace.

    Returns (flat values list, per-trace per-window nested list).
    """
    flat, nested = [], []
    for t in traces:
        row = []
        for w in sliding_windows(t, window_len, stride):
            v = extract(feature, w, roadgraph)
            row.append(v)
            if isinstance(v, list):
                flat.extend(v)
            else:
                flat.append(v)
        nested.append(row)
    return flat, nested


def reference_summary(ref_traces, roadgraph, window_len: int = 91,
                      stride: int = 91):
    """Precompute the reference side of a report (reusable across reports)."""
    values = {}
    for f in FEATURES:
        values[f], _ = pooled_values(ref_traces, f, roadgraph, window_len, stride)
    n_windows = sum(len(list(sliding_windows(t, window_len, stride)))
                    for t in ref_traces)
    return {"values": values, "n_windows": n_windows,
            "transition_counts": TransitionMatrix.from_traces(ref_traces)
            .counts.tolist()}


def compute_report(sim_traces, ref_traces, roadgraph, window_len: int = 91,
                   stride: int = 91, edges: dict | None = None,
                   ref_summary: dict | None = None) -> MetricReport:
    """Full metric suite of simulated traces against reference traces.

    ``ref_summary`` (from :func:`reference_summary`) replaces the reference
    extraction; ``ref_traces`` may then be empty.
    """
    edges = {**DEFAULT_EDGES, **(edges or {})}
    if ref_summary is None:
        ref_summary = reference_summary(ref_traces, roadgraph, window_len, stride)
    feature_jsd = {}
    flags = []
    per_window_sim = {}
    histograms = {}
    n_sim = 0
    n_ref = ref_summary["n_windows"]
    for f in FEATURES:
        sim_vals, sim_nested = pooled_values(sim_traces, f, roadgraph,
                                             window_len, stride)
        ref_vals = ref_summary["values"][f]
        per_window_sim[f] = sim_nested
        n_sim = sum(len(r) for r in sim_nested)
        if f == "tl_violation_rate" and not any(t.has_signals() for t in sim_traces):
            feature_jsd[f] = None
            flags.append("tl_violation_rate absent: no committed signals in sim")
            continue
        if len(sim_vals) == 0 or len(ref_vals) == 0:
            feature_jsd[f] = None
            flags.append(f"{f} absent: no values "
                         f"({'sim' if not sim_vals else 'ref'} side empty)")
            continue
        hs = Histogram.from_values(sim_vals, edges[f])
        hr = Histogram.from_values(ref_vals, edges[f])
        histograms[f] = (hs, hr)
        feature_jsd[f] = js_divergence(hs.prob(), hr.prob())

    tl_jsd = None
    sim_tm = TransitionMatrix.from_traces(sim_traces)
    ref_tm = TransitionMatrix(
        counts=np.array(ref_summary["transition_counts"]))
    if sim_tm.total() > 0 and ref_tm.total() > 0:
        tl_jsd = transition_jsd(sim_tm, ref_tm)
    else:
        flags.append("tl_transition absent: empty transition matrix")

    comp, comp_flags = composite(feature_jsd)
    flags.extend(comp_flags)
    ten = [v for v in feature_jsd.values() if v is not None]
    if tl_jsd is not None:
        ten.append(tl_jsd)
    return MetricReport(
        feature_jsd=feature_jsd, tl_transition_jsd=tl_jsd, composite=comp,
        all_ten_mean=float(np.mean(ten)) if ten else None,
        n_sim_windows=n_sim, n_ref_windows=n_ref, flags=flags,
        per_window_sim=per_window_sim, histograms=histograms)


def jsd_curve(sim_traces, ref_traces, feature, roadgraph, window_len: int = 91,
              stride: int = 91, edges: dict | None = None):
    """Per-window-index divergence: sim values at window k vs the full
    reference pool. Mirrors the divergence-over-time curves."""
    edges = {**DEFAULT_EDGES, **(edges or {})}
    ref_vals, _ = pooled_values(ref_traces, feature, roadgraph, window_len, stride)
    hr = Histogram.from_values(ref_vals, edges[feature])
    _, nested = pooled_values(sim_traces, feature, roadgraph, window_len, stride)
    n_windows = min(len(r) for r in nested)
    curve = []
    for k in range(n_windows):
        vals = []
        for r in nested:
            v = r[k]
            vals.extend(v if isinstance(v, list) else [v])
        hs = Histogram.from_values(vals, edges[feature])
        curve.append(js_divergence(hs.prob(), hr.prob()))
    return curve


def save_report(report: MetricReport, json_path, table_path=None):
    with open(json_path, "w") as f:
        json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
    if table_path:
        with open(table_path, "w") as f:
            f.write(report.to_text_table() + "\n")
