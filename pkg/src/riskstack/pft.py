"""Probabilistic flow tubes: fitting, likelihood, sampling, persistence.

A flow tube summarizes one maneuver as a time-indexed sequence of 2-D
position Gaussians plus a mean speed profile. Tubes are fitted from
demonstration trajectories that are first rigidly moved into their own
start frame (start position at the origin, start heading along +x) and
resampled onto a common uniform time grid, so tubes are pose-invariant
by construction. Step k of a tube describes the position (k+1)*dt after
the maneuver starts.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Gaussian2, VehicleState, wrap_angle
from .errors import InsufficientDataError, InvalidInputError

COV_REGULARIZATION = 1e-6  # added to fitted covariance diagonals
LOG_TWO_PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Trajectory:
    """A time-stamped sequence of vehicle states (one demonstration)."""

    samples: tuple

    def __init__(self, samples):
        samples = tuple((float(t), s) for t, s in samples)
        if len(samples) < 2:
            raise InvalidInputError("Trajectory needs at least 2 samples")
        times = [t for t, _ in samples]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidInputError("Trajectory times must be strictly increasing")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples[-1][0] - self.samples[0][0]


class PFT:
    """Time-indexed sequence of position Gaussians for one maneuver.

    means: (T, 2), covs: (T, 2, 2), mean_speed: (T,). `frame` tags whether
    the tube lives in the maneuver-start frame or has been anchored into
    the world frame.
    """

    __slots__ = ("dt", "means", "covs", "mean_speed", "frame")

    def __init__(self, dt, means, covs, mean_speed, frame="maneuver_start"):
        means = np.asarray(means, dtype=float)
        covs = np.asarray(covs, dtype=float)
        mean_speed = np.asarray(mean_speed, dtype=float)
        if dt <= 0 or not math.isfinite(dt):
            raise InvalidInputError("PFT dt must be positive")
        if means.ndim != 2 or means.shape[0] < 1 or means.shape[1] != 2:
            raise InvalidInputError("PFT means must have shape (T, 2) with T >= 1")
        if covs.shape != (means.shape[0], 2, 2):
            raise InvalidInputError("PFT covs must have shape (T, 2, 2)")
        if mean_speed.shape != (means.shape[0],):
            raise InvalidInputError("PFT mean_speed must have length T")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(covs))):
            raise InvalidInputError("PFT fields must be finite")
        sym_err = np.abs(covs - np.transpose(covs, (0, 2, 1))).max()
        if sym_err > 1e-9:
            raise InvalidInputError("PFT covariances must be symmetric")
        if np.linalg.eigvalsh(covs).min() < -1e-9:
            raise InvalidInputError("PFT covariances must be PSD")
        self.dt = float(dt)
        self.means = means
        self.covs = covs
        self.mean_speed = mean_speed
        self.frame = frame

    def __len__(self):
        return self.means.shape[0]

    def step(self, k: int) -> Gaussian2:
        return Gaussian2(self.means[k], self.covs[k])

    @property
    def steps(self):
        return [self.step(k) for k in range(len(self))]

    def truncated(self, horizon: int) -> "PFT":
        if horizon < 1 or horizon > len(self):
            raise InvalidInputError(f"horizon {horizon} outside tube length {len(self)}")
        return PFT(self.dt, self.means[:horizon], self.covs[:horizon],
                   self.mean_speed[:horizon], self.frame)

    def sliced(self, start: int, stop: int) -> "PFT":
        if not (0 <= start < stop <= len(self)):
            raise InvalidInputError(f"bad slice [{start}:{stop}] for tube length {len(self)}")
        return PFT(self.dt, self.means[start:stop], self.covs[start:stop],
                   self.mean_speed[start:stop], self.frame)


@dataclass(frozen=True)
class ManeuverLibrary:
    """Named flow tubes with a prior over maneuver ids."""

    entries: dict
    prior: dict

    def __post_init__(self):
        if not self.entries:
            raise InvalidInputError("library must contain at least one maneuver")
        if set(self.entries) != set(self.prior):
            raise InvalidInputError("library prior must cover exactly the maneuver ids")
        total = sum(self.prior.values())
        if any(p < 0 for p in self.prior.values()) or abs(total - 1.0) > 1e-9:
            raise InvalidInputError("library prior must be a probability vector")

    @property
    def ids(self):
        return sorted(self.entries)

    @property
    def min_length(self) -> int:
        return min(len(t) for t in self.entries.values())


def to_start_frame(traj: Trajectory) -> list[VehicleState]:
    """Rigidly move a trajectory so it starts at the origin heading +x."""
    t0, s0 = traj.samples[0]
    c, s = math.cos(-s0.heading), math.sin(-s0.heading)
    out = []
    for _, st in traj.samples:
        dx, dy = st.x - s0.x, st.y - s0.y
        out.append(VehicleState(c * dx - s * dy, s * dx + c * dy,
                                wrap_angle(st.heading - s0.heading), st.speed))
    return out


def resample_trajectory(traj: Trajectory, T: int, dt: float) -> list[VehicleState]:
    """Resample onto T+1 uniformly spaced times over the trajectory duration.

    Positions and speed interpolate linearly, heading along the shortest
    arc. `dt` is the nominal tube step the caller will tag the result with
    and does not enter the interpolation.
    """
    if T < 1:
        raise InvalidInputError("T must be >= 1")
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    duration = traj.duration
    if duration <= 0:
        raise InvalidInputError("trajectory duration must be positive")
    times = np.array([t for t, _ in traj.samples])
    t0 = times[0]
    out = []
    j = 0
    for k in range(T + 1):
        target = t0 + duration * (k / T)
        while j + 1 < len(times) - 1 and times[j + 1] < target:
            j += 1
        ta, sa = traj.samples[j]
        tb, sb = traj.samples[j + 1]
        f = (target - ta) / (tb - ta)
        f = min(1.0, max(0.0, f))
        heading = wrap_angle(sa.heading + f * wrap_angle(sb.heading - sa.heading))
        out.append(VehicleState(
            sa.x + f * (sb.x - sa.x),
            sa.y + f * (sb.y - sa.y),
            heading,
            max(0.0, sa.speed + f * (sb.speed - sa.speed)),
        ))
    return out


def fit_pft(trajs, T: int, dt: float) -> PFT:
    """Fit a flow tube from demonstrations.

    Each trajectory is moved into its own start frame, resampled to T+1
    states, and the sample mean / unbiased sample covariance of positions
    at steps 1..T become the tube (the shared start point is dropped).
    Covariances are regularized with 1e-6 * I.
    """
    trajs = list(trajs)
    if len(trajs) < 2:
        raise InsufficientDataError(f"need >= 2 demonstrations, got {len(trajs)}")
    aligned = []
    for traj in trajs:
        frame_states = to_start_frame(traj)
        times = [t for t, _ in traj.samples]
        normalized = Trajectory(zip(times, frame_states))
        aligned.append(resample_trajectory(normalized, T, dt))
    positions = np.array([[[s.x, s.y] for s in states[1:]] for states in aligned])  # (M, T, 2)
    speeds = np.array([[s.speed for s in states[1:]] for states in aligned])  # (M, T)
    means = positions.mean(axis=0)
    centered = positions - means[np.newaxis, :, :]
    covs = np.einsum("mti,mtj->tij", centered, centered) / (len(trajs) - 1)
    covs += COV_REGULARIZATION * np.eye(2)[np.newaxis, :, :]
    return PFT(dt, means, covs, speeds.mean(axis=0), frame="maneuver_start")


def pft_loglik(pft: PFT, prefix, obs_noise: float) -> float:
    """Log-likelihood of observed positions against the leading tube steps.

    prefix[k] is compared against tube step k with covariance inflated by
    obs_noise * I. An empty prefix scores 0.
    """
    prefix = np.asarray(prefix, dtype=float).reshape(-1, 2)
    if obs_noise < 0:
        raise InvalidInputError("obs_noise must be >= 0")
    m = prefix.shape[0]
    if m > len(pft):
        raise InvalidInputError(f"prefix length {m} exceeds tube length {len(pft)}")
    if m == 0:
        return 0.0
    d = prefix - pft.means[:m]
    covs = pft.covs[:m] + obs_noise * np.eye(2)[np.newaxis, :, :]
    a, b, c = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    det = a * c - b * b
    quad = (c * d[:, 0] ** 2 - 2 * b * d[:, 0] * d[:, 1] + a * d[:, 1] ** 2) / det
    return float(np.sum(-LOG_TWO_PI - 0.5 * np.log(det) - 0.5 * quad))


def sample_pft(pft: PFT, seed: int) -> np.ndarray:
    """One independent position draw per tube step; (T, 2), seeded."""
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(pft.covs + 1e-15 * np.eye(2)[np.newaxis, :, :])
    z = rng.standard_normal((len(pft), 2))
    return pft.means + np.einsum("tij,tj->ti", chol, z)


def transform_pft(pft: PFT, anchor: VehicleState) -> PFT:
    """Anchor a start-frame tube at a world pose (rotate + translate)."""
    c, s = math.cos(anchor.heading), math.sin(anchor.heading)
    rot = np.array([[c, -s], [s, c]])
    means = anchor.position[np.newaxis, :] + pft.means @ rot.T
    covs = np.einsum("ab,tbc,dc->tad", rot, pft.covs, rot)
    return PFT(pft.dt, means, covs, pft.mean_speed, frame="world")


# ---------------------------------------------------------------------------
# Persistence: trajectory CSV and tube / library JSON documents.

TRAJECTORY_FIELDS = ["t", "x", "y", "heading", "speed"]


def read_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in TRAJECTORY_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise InvalidInputError(f"trajectory CSV {path} missing columns {missing}")
        rows = [
            (float(row["t"]),
             VehicleState(float(row["x"]), float(row["y"]),
                          float(row["heading"]), float(row["speed"])))
            for row in reader
        ]
    return Trajectory(rows)


def write_trajectory_csv(path, traj: Trajectory) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_FIELDS)
        for t, s in traj.samples:
            writer.writerow([t, s.x, s.y, s.heading, s.speed])


def pft_to_doc(pft: PFT) -> dict:
    return {
        "dt": pft.dt,
        "frame": pft.frame,
        "steps": [
            {"mean": pft.means[k].tolist(), "cov": pft.covs[k].tolist()}
            for k in range(len(pft))
        ],
        "mean_speed": pft.mean_speed.tolist(),
    }


def pft_from_doc(doc: dict) -> PFT:
    steps = doc["steps"]
    return PFT(
        doc["dt"],
        [s["mean"] for s in steps],
        [s["cov"] for s in steps],
        doc["mean_speed"],
        frame=doc.get("frame", "maneuver_start"),
    )


def library_to_doc(library: ManeuverLibrary) -> dict:
    return {
        "schema_version": 1,
        "entries": {mid: pft_to_doc(t) for mid, t in sorted(library.entries.items())},
        "prior": {mid: library.prior[mid] for mid in sorted(library.prior)},
    }


def library_from_doc(doc: dict) -> ManeuverLibrary:
    entries = {mid: pft_from_doc(d) for mid, d in doc["entries"].items()}
    return ManeuverLibrary(entries, dict(doc["prior"]))


def save_library(path, library: ManeuverLibrary) -> None:
    with open(path, "w") as fh:
        json.dump(library_to_doc(library), fh, indent=1)


def load_library(path) -> ManeuverLibrary:
    with open(path) as fh:
        return library_from_doc(json.load(fh))
