"""Piecewise-linear trajectories of moving points."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

CONTINUITY_TOL = 1e-9


@dataclass(frozen=True)
class Segment:
    t: float
    x: float
    y: float
    vx: float
    vy: float

    def position(self, t):
        dt = t - self.t
        return self.x + self.vx * dt, self.y + self.vy * dt


@dataclass
class MovingPoint:
    """A point following piecewise-linear motion.

    Each segment starts at ``t`` with position ``(x, y)`` and velocity
    ``(vx, vy)``; the last segment extends indefinitely.
    """

    id: int
    segments: list = field(default_factory=list)

    def __post_init__(self):
        self.segments = [s if isinstance(s, Segment) else Segment(*s) for s in self.segments]
        if not self.segments:
            raise ValueError(f"point {self.id}: no segments")
        for a, b in zip(self.segments, self.segments[1:]):
            if not b.t > a.t:
                raise ValueError(f"point {self.id}: segment start times must be strictly increasing")
            px, py = a.position(b.t)
            if abs(px - b.x) > CONTINUITY_TOL * max(1.0, abs(b.x)) or abs(py - b.y) > CONTINUITY_TOL * max(1.0, abs(b.y)):
                raise ValueError(f"point {self.id}: position discontinuous at t={b.t}")
        self._starts = [s.t for s in self.segments]

    @classmethod
    def linear(cls, id, x, y, vx=0.0, vy=0.0, t0=0.0):
        return cls(id, [Segment(t0, x, y, vx, vy)])

    @property
    def t_start(self):
        return self.segments[0].t

    def segment_at(self, t):
        i = bisect.bisect_right(self._starts, t) - 1
        return self.segments[max(i, 0)]

    def position(self, t):
        return self.segment_at(t).position(t)

    def positions(self, times):
        """Positions at an array of times, shape ``(len(times), 2)``."""
        times = np.asarray(times, dtype=float)
        seg = np.array([[s.t, s.x, s.y, s.vx, s.vy] for s in self.segments])
        i = np.clip(np.searchsorted(seg[:, 0], times, side="right") - 1, 0, len(seg) - 1)
        dt = times - seg[i, 0]
        return np.stack([seg[i, 1] + seg[i, 3] * dt, seg[i, 2] + seg[i, 4] * dt], axis=-1)

    def velocity(self, t):
        s = self.segment_at(t)
        return s.vx, s.vy

    def breakpoints(self):
        return self._starts[1:]

    def is_linear(self):
        return len(self.segments) == 1

    def with_segments_from(self, t, new_segments):
        """Keep motion before ``t`` and replace it afterwards."""
        kept = [s for s in self.segments if s.t < t]
        return MovingPoint(self.id, kept + [s if isinstance(s, Segment) else Segment(*s) for s in new_segments])

    def bounding_box(self, t0, t1):
        """Axis-aligned bounds of the trajectory over ``[t0, t1]``."""
        times = [t0, t1] + [b for b in self.breakpoints() if t0 < b < t1]
        pts = np.array([self.position(t) for t in times])
        return pts[:, 0].min(), pts[:, 0].max(), pts[:, 1].min(), pts[:, 1].max()


def positions_at(points, t):
    """Positions of a list of moving points (or a static ``(n, 2)`` array) at ``t``."""
    if isinstance(points, np.ndarray):
        return np.asarray(points, dtype=float).reshape(-1, 2)
    return np.array([p.position(t) for p in points], dtype=float).reshape(-1, 2)


def velocities_at(points, t):
    if isinstance(points, np.ndarray):
        return np.zeros_like(np.asarray(points, dtype=float).reshape(-1, 2))
    return np.array([p.velocity(t) for p in points], dtype=float).reshape(-1, 2)


def check_in_domain(points, D, t0, t1, margin=0.0):
    """Raise ``ValueError`` naming the first point leaving ``[margin, D - margin]^2``."""
    for p in points:
        x0, x1, y0, y1 = p.bounding_box(t0, t1)
        if x0 < margin or y0 < margin or x1 > D - margin or y1 > D - margin:
            raise ValueError(f"point {p.id} leaves the domain [{margin}, {D - margin}]^2 during [{t0}, {t1}]")
