"""Static rendering of traces: per-step scene frames and validity rasters."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Polygon as MplPolygon

from . import geometry
from .tensors import AgentType, SignalState

TYPE_COLORS = {
    int(AgentType.AV): "#d62728",
    int(AgentType.CAR): "#1f77b4",
    int(AgentType.PEDESTRIAN): "#2ca02c",
    int(AgentType.CYCLIST): "#9467bd",
}
STATE_COLORS = {
    int(SignalState.GREEN): "#2ca02c",
    int(SignalState.YELLOW): "#ffbf00",
    int(SignalState.RED): "#d62728",
    int(SignalState.ARROW_GREEN): "#98df8a",
    int(SignalState.ARROW_YELLOW): "#ffdf80",
    int(SignalState.ARROW_RED): "#ff9896",
    int(SignalState.FLASHING_RED): "#e377c2",
    int(SignalState.FLASHING_YELLOW): "#ffec8b",
    int(SignalState.UNKNOWN): "#7f7f7f",
}


def uniform_frame_steps(n_steps: int, k: int):
    """k frame indices spread uniformly, last clipped into range."""
    if k == 1:
        return [0]
    return [min(int(round(i * n_steps / (k - 1))), n_steps - 1) for i in range(k)]


def draw_map(ax, roadgraph):
    for poly in roadgraph.road_polygons:
        ax.add_patch(MplPolygon(poly, closed=True, facecolor="#d9d9d9",
                                edgecolor="none", zorder=0))
    for poly in roadgraph.parking_polygons:
        ax.add_patch(MplPolygon(poly, closed=True, facecolor="#efe6c0",
                                edgecolor="#c8b97e", zorder=0))
    for lane in roadgraph.lanes.values():
        pts = np.asarray(lane.points)
        ax.plot(pts[:, 0], pts[:, 1], color="#bdbdbd", lw=0.5, zorder=1)
    for sl in roadgraph.stop_lines:
        ax.plot([sl.p0[0], sl.p1[0]], [sl.p0[1], sl.p1[1]],
                color="#808080", lw=1.2, zorder=2)


def draw_frame(trace, roadgraph, step: int, path=None, ax=None):
    """One scene frame: map, agent boxes by type, signal glyphs by state."""
    if not 0 <= step < trace.n_steps:
        raise ValueError(f"step {step} outside trace of length {trace.n_steps}")
    own_fig = ax is None
    if own_fig:
        fig, ax = plt.subplots(figsize=(7, 7))
    draw_map(ax, roadgraph)
    for row in range(trace.n_rows):
        if not trace.valid[row, step]:
            continue
        corners = geometry.obb_corners(
            trace.x[row, step], trace.y[row, step], trace.heading[row, step],
            max(trace.length[row, step], 0.5), max(trace.width[row, step], 0.3))
        is_ego = row == trace.ego_row
        color = TYPE_COLORS.get(int(trace.agent_type[row, step]), "#1f77b4")
        ax.add_patch(MplPolygon(corners, closed=True, facecolor=color,
                                edgecolor="black" if is_ego else "none",
                                lw=1.5 if is_ego else 0.0, zorder=4 if is_ego else 3))
    if trace.signal_valid is not None:
        for row in range(trace.signal_valid.shape[0]):
            if not trace.signal_valid[row, step]:
                continue
            color = STATE_COLORS.get(int(trace.signal_state[row, step]), "#7f7f7f")
            ax.plot(trace.signal_x[row, step], trace.signal_y[row, step], "o",
                    color=color, ms=6, mec="black", mew=0.4, zorder=5)
    xmin, ymin, xmax, ymax = roadgraph.extent
    ax.set_xlim(xmin, xmax)
    ax.set_ylim(ymin, ymax)
    ax.set_aspect("equal")
    ax.set_title(f"step {step}")
    if own_fig:
        fig.tight_layout()
        if path is not None:
            fig.savefig(path, dpi=110)
        plt.close(fig)


def validity_raster(trace, path=None):
    """Agents x time boolean raster of the trace's validity channel."""
    img = trace.valid.astype(float)
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.imshow(img, aspect="auto", cmap="gray", interpolation="nearest",
              vmin=0.0, vmax=1.0)
    ax.set_xlabel("timestep")
    ax.set_ylabel("agent slot")
    fig.tight_layout()
    if path is not None:
        fig.savefig(path, dpi=110)
    plt.close(fig)
    return img.astype(bool)
