"""World objects, simulated range/occlusion sensing, V2V messages, tracking.

The sensor model is deliberately parametric: a detection happens iff the
target is within range and (when occlusion is enabled) the straight segment
from the ego to the target does not pass within any other object's footprint
disc. V2V messages ignore occlusion entirely and only require equipment and
range. Only positions carry measurement noise; speed and heading are passed
through from ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import Gaussian2, VehicleState, gaussian_fuse
from .errors import InvalidInputError

DEFAULT_STALE_LIMIT = 20  # steps a track survives without a measurement


@dataclass(frozen=True)
class WorldObject:
    """One simulated traffic participant."""

    id: str
    state: VehicleState
    footprint_radius: float
    v2v_equipped: bool = False

    def __post_init__(self):
        if self.footprint_radius <= 0.0:
            raise InvalidInputError(f"footprint_radius must be > 0 for {self.id!r}")


@dataclass(frozen=True)
class SensorConfig:
    range: float = 60.0
    pos_noise_std: float = 0.5
    v2v_range: float = 300.0
    v2v_pos_noise_std: float = 0.5
    occlusion_enabled: bool = True

    def __post_init__(self):
        for name in ("range", "pos_noise_std", "v2v_range", "v2v_pos_noise_std"):
            if getattr(self, name) < 0.0:
                raise InvalidInputError(f"SensorConfig.{name} must be >= 0")


@dataclass(frozen=True)
class Measurement:
    """A noisy position fix plus pass-through speed and heading."""

    object_id: str
    position: np.ndarray
    speed: float
    heading: float
    noise_std: float


@dataclass(frozen=True)
class Track:
    object_id: str
    position: Gaussian2
    speed_estimate: float
    heading_estimate: float
    last_seen: int


def segment_point_distance(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> float:
    """Distance from point p to the closed segment a-b."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.linalg.norm(p - a))
    t = float((p - a) @ ab) / denom
    t = min(1.0, max(0.0, t))
    return float(np.linalg.norm(a + t * ab - p))


def line_of_sight_clear(ego_pos: np.ndarray, target: WorldObject, objects) -> bool:
    """True when no other object's footprint disc blocks the ego-target segment."""
    target_pos = target.state.position
    for blocker in objects:
        if blocker.id == target.id:
            continue
        if segment_point_distance(ego_pos, target_pos, blocker.state.position) < blocker.footprint_radius:
            return False
    return True


def sense(objects, ego: VehicleState, cfg: SensorConfig, seed: int) -> list[Measurement]:
    """Range-limited, optionally occlusion-aware detections with position noise."""
    ego_pos = ego.position
    rng = np.random.default_rng(seed)
    detections = []
    for obj in objects:
        offset = obj.state.position - ego_pos
        if float(np.linalg.norm(offset)) > cfg.range:
            continue
        if cfg.occlusion_enabled and not line_of_sight_clear(ego_pos, obj, objects):
            continue
        noisy = obj.state.position + rng.normal(0.0, cfg.pos_noise_std, 2)
        detections.append(
            Measurement(obj.id, noisy, obj.state.speed, obj.state.heading, cfg.pos_noise_std)
        )
    return detections


def v2v_receive(objects, ego: VehicleState, cfg: SensorConfig, seed: int) -> list[Measurement]:
    """Messages from every equipped object in radio range, occlusion ignored."""
    ego_pos = ego.position
    rng = np.random.default_rng(seed)
    messages = []
    for obj in objects:
        if not obj.v2v_equipped:
            continue
        if float(np.linalg.norm(obj.state.position - ego_pos)) > cfg.v2v_range:
            continue
        noisy = obj.state.position + rng.normal(0.0, cfg.v2v_pos_noise_std, 2)
        messages.append(
            Measurement(obj.id, noisy, obj.state.speed, obj.state.heading, cfg.v2v_pos_noise_std)
        )
    return messages


def _measurement_gaussian(m: Measurement) -> Gaussian2:
    # Floor the measurement variance so repeated noise-free fixes stay fusable.
    var = max(m.noise_std ** 2, 1e-12)
    return Gaussian2(m.position, var * np.eye(2))


def update_tracks(
    tracks,
    detections,
    messages,
    t: int,
    stale_limit: int = DEFAULT_STALE_LIMIT,
) -> list[Track]:
    """Fuse measurements into tracks by object id and drop stale tracks.

    Detections are applied before messages; both fuse only position, while
    speed and heading estimates are replaced by the latest measurement.
    """
    by_id = {tr.object_id: tr for tr in tracks}
    for m in list(detections) + list(messages):
        g = _measurement_gaussian(m)
        existing = by_id.get(m.object_id)
        if existing is None:
            by_id[m.object_id] = Track(m.object_id, g, m.speed, m.heading, t)
        else:
            fused = gaussian_fuse(existing.position, g)
            by_id[m.object_id] = replace(
                existing, position=fused, speed_estimate=m.speed,
                heading_estimate=m.heading, last_seen=t,
            )
    alive = [tr for tr in by_id.values() if t - tr.last_seen <= stale_limit]
    return sorted(alive, key=lambda tr: tr.object_id)
