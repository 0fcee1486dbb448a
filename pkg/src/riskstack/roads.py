"""Lane geometry: polyline projection and membership queries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


def polyline_lengths(points: np.ndarray) -> np.ndarray:
    segs = np.diff(points, axis=0)
    return np.hypot(segs[:, 0], segs[:, 1])


def project_onto_polyline(points: np.ndarray, p) -> tuple[float, float]:
    """Arc-length coordinate and signed lateral offset of p (left positive)."""
    p = np.asarray(p, dtype=float)
    best = None
    s_base = 0.0
    for a, b in zip(points[:-1], points[1:]):
        ab = b - a
        seg_len = float(np.hypot(*ab))
        if seg_len == 0.0:
            continue
        t = float((p - a) @ ab) / (seg_len * seg_len)
        t_clamped = min(1.0, max(0.0, t))
        foot = a + t_clamped * ab
        dist = float(np.linalg.norm(p - foot))
        if best is None or dist < best[0]:
            cross = ab[0] * (p[1] - a[1]) - ab[1] * (p[0] - a[0])
            lateral = math.copysign(dist, cross) if cross != 0.0 else 0.0
            best = (dist, s_base + t_clamped * seg_len, lateral)
        s_base += seg_len
    if best is None:
        raise InvalidInputError("degenerate polyline")
    return best[1], best[2]


@dataclass(frozen=True)
class Lane:
    id: str
    centerline: np.ndarray  # (N, 2)
    width: float
    speed_limit: float

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise InvalidInputError(f"lane {self.id!r} centerline must be (N>=2, 2)")
        if polyline_lengths(pts).sum() <= 0:
            raise InvalidInputError(f"lane {self.id!r} centerline is degenerate")
        if self.width <= 0 or self.speed_limit <= 0:
            raise InvalidInputError(f"lane {self.id!r} needs positive width and speed limit")
        object.__setattr__(self, "centerline", pts)

    @property
    def length(self) -> float:
        return float(polyline_lengths(self.centerline).sum())

    def offset_of(self, p) -> tuple[float, float]:
        return project_onto_polyline(self.centerline, p)

    def contains(self, p, margin: float = 0.0) -> bool:
        s, lateral = self.offset_of(p)
        return abs(lateral) <= self.width / 2 + margin and -1e-9 <= s <= self.length + 1e-9


@dataclass(frozen=True)
class RoadMap:
    lanes: tuple

    def __init__(self, lanes):
        lanes = tuple(lanes)
        if not lanes:
            raise InvalidInputError("road map needs at least one lane")
        ids = [l.id for l in lanes]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("lane ids must be unique")
        object.__setattr__(self, "lanes", lanes)

    def lane_containing(self, p, margin: float = 0.0):
        for lane in self.lanes:
            if lane.contains(p, margin):
                return lane
        return None

    @property
    def max_speed_limit(self) -> float:
        return max(l.speed_limit for l in self.lanes)
