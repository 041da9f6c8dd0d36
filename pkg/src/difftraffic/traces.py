"""Uniform world-frame trace container shared by logs and rollouts.

Rows are agent slots; the per-step id array gives agent identity so a
slot reused by a new agent after a vacancy still yields distinct agents
for the metrics. Ground-truth scenarios and closed-loop rollouts both
serialize to this schema, so evaluation consumes them uniformly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class TraceData:
    dt: float                      # seconds per step
    valid: np.ndarray              # (N, S) bool
    agent_id: np.ndarray           # (N, S) int, -1 where invalid
    x: np.ndarray                  # (N, S)
    y: np.ndarray
    heading: np.ndarray
    length: np.ndarray             # (N, S)
    width: np.ndarray
    agent_type: np.ndarray         # (N, S) int
    ego_row: int = 0
    signal_valid: np.ndarray | None = None   # (M, S) bool
    signal_state: np.ndarray | None = None   # (M, S) int
    signal_x: np.ndarray | None = None
    signal_y: np.ndarray | None = None
    provenance: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def n_rows(self):
        return self.valid.shape[0]

    @property
    def n_steps(self):
        return self.valid.shape[1]

    def has_signals(self):
        return self.signal_valid is not None and bool(np.any(self.signal_valid))

    def slice_steps(self, start: int, stop: int | None = None):
        """A copy restricted to steps [start, stop)."""
        sl = slice(start, stop)
        kw = {}
        if self.signal_valid is not None:
            kw = {
                "signal_valid": self.signal_valid[:, sl].copy(),
                "signal_state": self.signal_state[:, sl].copy(),
                "signal_x": self.signal_x[:, sl].copy(),
                "signal_y": self.signal_y[:, sl].copy(),
            }
        return TraceData(
            dt=self.dt, valid=self.valid[:, sl].copy(),
            agent_id=self.agent_id[:, sl].copy(), x=self.x[:, sl].copy(),
            y=self.y[:, sl].copy(), heading=self.heading[:, sl].copy(),
            length=self.length[:, sl].copy(), width=self.width[:, sl].copy(),
            agent_type=self.agent_type[:, sl].copy(), ego_row=self.ego_row,
            provenance=list(self.provenance), warnings=list(self.warnings),
            **kw,
        )

    def to_json_dict(self):
        d = {
            "version": 1,
            "dt": self.dt,
            "ego_row": self.ego_row,
            "valid": self.valid.astype(int).tolist(),
            "agent_id": self.agent_id.tolist(),
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "heading": self.heading.tolist(),
            "length": self.length.tolist(),
            "width": self.width.tolist(),
            "agent_type": self.agent_type.tolist(),
            "provenance": self.provenance,
            "warnings": self.warnings,
        }
        if self.signal_valid is not None:
            d["signal_valid"] = self.signal_valid.astype(int).tolist()
            d["signal_state"] = self.signal_state.tolist()
            d["signal_x"] = self.signal_x.tolist()
            d["signal_y"] = self.signal_y.tolist()
        return d

    @classmethod
    def from_json_dict(cls, d):
        if d.get("version") != 1:
            raise ValueError(f"unsupported trace version {d.get('version')}")
        kw = {}
        if "signal_valid" in d:
            kw = {
                "signal_valid": np.array(d["signal_valid"], dtype=bool),
                "signal_state": np.array(d["signal_state"], dtype=int),
                "signal_x": np.array(d["signal_x"], dtype=float),
                "signal_y": np.array(d["signal_y"], dtype=float),
            }
        return cls(
            dt=d["dt"],
            valid=np.array(d["valid"], dtype=bool),
            agent_id=np.array(d["agent_id"], dtype=int),
            x=np.array(d["x"], dtype=float),
            y=np.array(d["y"], dtype=float),
            heading=np.array(d["heading"], dtype=float),
            length=np.array(d["length"], dtype=float),
            width=np.array(d["width"], dtype=float),
            agent_type=np.array(d["agent_type"], dtype=int),
            ego_row=d["ego_row"],
            provenance=d.get("provenance", []),
            warnings=d.get("warnings", []),
            **kw,
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_json_dict(json.loads(Path(path).read_text()))
