"""2D geometry helpers: oriented boxes, segments, polygons, polylines."""

from __future__ import annotations

import math

import numpy as np


def obb_corners(x, y, heading, length, width):
    """Corners of an oriented box, counter-clockwise, as a (4, 2) array."""
    hl, hw = 0.5 * length, 0.5 * width
    c, s = math.cos(heading), math.sin(heading)
    local = np.array([(-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def _project_interval(corners, axis):
    d = corners @ axis
    return d.min(), d.max()


def obb_overlap(pose_a, size_a, pose_b, size_b) -> bool:
    """Separating-axis test between two oriented boxes.

    pose = (x, y, heading), size = (length, width). Touching boxes count
    as overlapping.
    """
    xa, ya, ha = pose_a
    xb, yb, hb = pose_b
    ra = 0.5 * math.hypot(*size_a)
    rb = 0.5 * math.hypot(*size_b)
    if math.hypot(xb - xa, yb - ya) > ra + rb:
        return False
    ca = obb_corners(xa, ya, ha, *size_a)
    cb = obb_corners(xb, yb, hb, *size_b)
    # two unique edge normals per rectangle
    for heading in (ha, hb):
        c, s = math.cos(heading), math.sin(heading)
        for axis in (np.array([c, s]), np.array([-s, c])):
            lo_a, hi_a = _project_interval(ca, axis)
            lo_b, hi_b = _project_interval(cb, axis)
            if hi_a < lo_b or hi_b < lo_a:
                return False
    return True


def segment_intersects_obb(p0, p1, pose, size) -> bool:
    """Whether segment p0-p1 intersects the oriented box (borders included)."""
    x, y, heading = pose
    c, s = math.cos(heading), math.sin(heading)
    # transform segment into box frame
    def to_local(p):
        dx, dy = p[0] - x, p[1] - y
        return np.array([dx * c + dy * s, -dx * s + dy * c])

    a, b = to_local(p0), to_local(p1)
    hl, hw = 0.5 * size[0], 0.5 * size[1]
    # slab clipping (Liang-Barsky)
    d = b - a
    t0, t1 = 0.0, 1.0
    for i, h in enumerate((hl, hw)):
        if abs(d[i]) < 1e-12:
            if a[i] < -h or a[i] > h:
                return False
        else:
            ta = (-h - a[i]) / d[i]
            tb = (h - a[i]) / d[i]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
            if t0 > t1:
                return False
    return True


def segments_intersect(p0, p1, q0, q1) -> bool:
    """Proper or touching intersection of segments p0-p1 and q0-q1."""

    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(v) < 1e-12:
            return 0
        return 1 if v > 0 else -1

    def on_seg(a, b, c):
        return (min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12
                and min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12)

    o1, o2 = orient(p0, p1, q0), orient(p0, p1, q1)
    o3, o4 = orient(q0, q1, p0), orient(q0, q1, p1)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p0, p1, q0):
        return True
    if o2 == 0 and on_seg(p0, p1, q1):
        return True
    if o3 == 0 and on_seg(q0, q1, p0):
        return True
    if o4 == 0 and on_seg(q0, q1, p1):
        return True
    return False


def point_in_polygon(point, polygon) -> bool:
    """Even-odd rule; polygon is an (N, 2) array, point boundary-inclusive-ish."""
    x, y = point[0], point[1]
    poly = np.asarray(polygon)
    n = len(poly)
    inside = False
    j = n - 1
    for i in range(n):
        xi, yi = poly[i]
        xj, yj = poly[j]
        if (yi > y) != (yj > y):
            x_cross = (xj - xi) * (y - yi) / (yj - yi) + xi
            if x < x_cross:
                inside = not inside
        j = i
    return inside


def points_in_polygon(points, polygon):
    """Vectorized even-odd test: (P, 2) points against one polygon."""
    pts = np.asarray(points, dtype=float)
    poly = np.asarray(polygon, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    j = len(poly) - 1
    for i in range(len(poly)):
        xi, yi = poly[i]
        xj, yj = poly[j]
        crosses = (yi > y) != (yj > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = (xj - xi) * (y - yi) / (yj - yi) + xi
        inside ^= crosses & (x < x_cross)
        j = i
    return inside


def polyline_length(points) -> float:
    pts = np.asarray(points, dtype=float)
    return float(np.sum(np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1]))))


def resample_polyline(points, spacing: float):
    """Resample to (roughly) uniform spacing, keeping both endpoints."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return pts.copy()
    seg = np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1]))
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total < 1e-9:
        return pts[:1].copy()
    n = max(2, int(round(total / spacing)) + 1)
    targets = np.linspace(0.0, total, n)
    out = np.empty((n, pts.shape[1]))
    for col in range(pts.shape[1]):
        out[:, col] = np.interp(targets, s, pts[:, col])
    return out


def point_at_arclength(points, s: float):
    """Position and tangent heading at arc length s along a polyline."""
    pts = np.asarray(points, dtype=float)
    seg = np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1]))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    s = min(max(s, 0.0), total)
    i = int(np.searchsorted(cum, s, side="right")) - 1
    i = min(max(i, 0), len(seg) - 1)
    denom = seg[i] if seg[i] > 1e-12 else 1.0
    frac = (s - cum[i]) / denom
    p = pts[i] + frac * (pts[i + 1] - pts[i])
    heading = math.atan2(pts[i + 1][1] - pts[i][1], pts[i + 1][0] - pts[i][0])
    return p, heading


def project_to_polyline(points, xy):
    """Arc length and distance of the closest point on the polyline to xy."""
    pts = np.asarray(points, dtype=float)
    p = np.asarray(xy, dtype=float)
    best_s, best_d = 0.0, float("inf")
    cum = 0.0
    for i in range(len(pts) - 1):
        a, b = pts[i], pts[i + 1]
        ab = b - a
        ab2 = float(ab @ ab)
        t = 0.0 if ab2 < 1e-12 else float(np.clip((p - a) @ ab / ab2, 0.0, 1.0))
        proj = a + t * ab
        d = float(np.hypot(*(p - proj)))
        if d < best_d:
            best_d = d
            best_s = cum + t * math.sqrt(ab2)
        cum += math.sqrt(ab2)
    return best_s, best_d


def wrap_angle(theta):
    """Wrap angle(s) to [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2.0 * np.pi) - np.pi


def to_frame(points, pose):
    """World xy points into the frame of pose = (x, y, heading)."""
    pts = np.asarray(points, dtype=float)
    x, y, h = pose
    c, s = math.cos(h), math.sin(h)
    dx = pts[..., 0] - x
    dy = pts[..., 1] - y
    return np.stack([dx * c + dy * s, -dx * s + dy * c], axis=-1)


def from_frame(points, pose):
    """Inverse of :func:`to_frame`."""
    pts = np.asarray(points, dtype=float)
    x, y, h = pose
    c, s = math.cos(h), math.sin(h)
    px = pts[..., 0] * c - pts[..., 1] * s + x
    py = pts[..., 0] * s + pts[..., 1] * c + y
    return np.stack([px, py], axis=-1)
