"""Vehicle kinematics, disturbance propagation, and 2-D Gaussian utilities.

The dynamics model is a kinematic bicycle integrated with forward Euler:

    x   += v * cos(heading) * dt
    y   += v * sin(heading) * dt
    heading += v / wheelbase * tan(steer) * dt
    v   += accel * dt          (clamped at zero, no reverse)

All types are immutable value objects and all sampling takes an explicit
seed, so everything here is safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FusionError, InvalidInputError

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to the half-open interval (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, TWO_PI)
    if wrapped <= 0.0:
        wrapped += TWO_PI
    return wrapped - math.pi


def wrap_angle_array(theta: np.ndarray) -> np.ndarray:
    """Vectorized :func:`wrap_angle`."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, TWO_PI) - np.pi
    return np.where(wrapped <= -np.pi, wrapped + TWO_PI, wrapped)


@dataclass(frozen=True)
class VehicleState:
    """Planar pose plus forward speed of one vehicle.

    heading is stored wrapped to (-pi, pi]; speed is non-negative.
    """

    x: float
    y: float
    heading: float
    speed: float

    def __post_init__(self):
        for name in ("x", "y", "heading", "speed"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidInputError(f"VehicleState.{name} must be finite")
        if self.speed < 0.0:
            raise InvalidInputError(f"VehicleState.speed must be >= 0, got {self.speed}")
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Control:
    """Longitudinal acceleration and front-wheel steering angle."""

    accel: float
    steer: float

    def __post_init__(self):
        if not (math.isfinite(self.accel) and math.isfinite(self.steer)):
            raise InvalidInputError("Control fields must be finite")


@dataclass(frozen=True)
class NoiseModel:
    """Standard deviations of additive control disturbances."""

    sigma_accel: float = 0.0
    sigma_steer: float = 0.0

    def __post_init__(self):
        if self.sigma_accel < 0.0 or self.sigma_steer < 0.0:
            raise InvalidInputError("noise standard deviations must be >= 0")


@dataclass(frozen=True)
class DynamicsParams:
    """Bicycle geometry and actuator envelope."""

    wheelbase: float = 2.7
    accel_max: float = 3.0
    steer_max: float = 0.5


DEFAULT_PARAMS = DynamicsParams()


class Gaussian2:
    """A 2-D Gaussian with symmetric positive semi-definite covariance."""

    __slots__ = ("mean", "cov")

    def __init__(self, mean, cov):
        mean = np.asarray(mean, dtype=float).reshape(2)
        cov = np.asarray(cov, dtype=float).reshape(2, 2)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise InvalidInputError("Gaussian2 fields must be finite")
        scale = max(1.0, float(np.abs(cov).max()))
        if abs(cov[0, 1] - cov[1, 0]) > 1e-9 * scale:
            raise InvalidInputError("Gaussian2 covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        if min_eig_2x2(cov) < -1e-9:
            raise InvalidInputError("Gaussian2 covariance must be PSD")
        self.mean = mean
        self.cov = cov

    def __repr__(self):
        return f"Gaussian2(mean={self.mean.tolist()}, cov={self.cov.tolist()})"


def min_eig_2x2(cov: np.ndarray) -> float:
    """Smaller eigenvalue of a symmetric 2x2 matrix, in closed form."""
    a, b, c = cov[0, 0], cov[0, 1], cov[1, 1]
    half_trace = 0.5 * (a + c)
    radius = math.hypot(0.5 * (a - c), b)
    return half_trace - radius


def step_dynamics(
    state: VehicleState,
    control: Control,
    dt: float,
    params: DynamicsParams = DEFAULT_PARAMS,
) -> VehicleState:
    """Advance one vehicle state through a single Euler step.

    Deterministic; raises InvalidInputError for non-positive dt or controls
    outside the actuator envelope.
    """
    if not (math.isfinite(dt) and dt > 0.0):
        raise InvalidInputError(f"dt must be positive and finite, got {dt}")
    if abs(control.accel) > params.accel_max + 1e-9:
        raise InvalidInputError(f"accel {control.accel} exceeds limit {params.accel_max}")
    if abs(control.steer) > params.steer_max + 1e-9:
        raise InvalidInputError(f"steer {control.steer} exceeds limit {params.steer_max}")
    v = state.speed
    x = state.x + v * math.cos(state.heading) * dt
    y = state.y + v * math.sin(state.heading) * dt
    heading = wrap_angle(state.heading + v / params.wheelbase * math.tan(control.steer) * dt)
    speed = max(v + control.accel * dt, 0.0)
    return VehicleState(x, y, heading, speed)


def rollout(
    state: VehicleState,
    controls,
    dt: float,
    params: DynamicsParams = DEFAULT_PARAMS,
) -> list[VehicleState]:
    """Deterministic forward simulation; returns len(controls)+1 states."""
    states = [state]
    for u in controls:
        states.append(step_dynamics(states[-1], u, dt, params))
    return states


def propagate_samples(
    state: VehicleState,
    controls,
    noise: NoiseModel,
    n: int,
    seed: int,
    dt: float = 0.1,
    params: DynamicsParams = DEFAULT_PARAMS,
) -> np.ndarray:
    """Monte Carlo rollout under perturbed controls.

    Each of the n trajectories starts at `state` and applies every control
    with independent Gaussian perturbations (clamped to the actuator
    envelope) before the Euler step. Returns an (n, len(controls)+1, 4)
    array with columns (x, y, heading, speed); reproducible per seed.
    """
    controls = list(controls)
    if n < 1:
        raise InvalidInputError(f"sample count must be >= 1, got {n}")
    if not controls:
        raise InvalidInputError("controls must be non-empty")

    if noise.sigma_accel == 0.0 and noise.sigma_steer == 0.0:
        # Zero noise collapses every sample onto the deterministic rollout;
        # reuse it so the equality holds bit for bit.
        states = rollout(state, controls, dt, params)
        one = np.array([[s.x, s.y, s.heading, s.speed] for s in states])
        return np.repeat(one[np.newaxis, :, :], n, axis=0)

    rng = np.random.default_rng(seed)
    steps = len(controls)
    out = np.empty((n, steps + 1, 4))
    x = np.full(n, state.x)
    y = np.full(n, state.y)
    heading = np.full(n, state.heading)
    speed = np.full(n, state.speed)
    out[:, 0, 0], out[:, 0, 1], out[:, 0, 2], out[:, 0, 3] = x, y, heading, speed
    for k, u in enumerate(controls):
        accel = u.accel + rng.normal(0.0, noise.sigma_accel, n)
        steer = u.steer + rng.normal(0.0, noise.sigma_steer, n)
        np.clip(accel, -params.accel_max, params.accel_max, out=accel)
        np.clip(steer, -params.steer_max, params.steer_max, out=steer)
        x = x + speed * np.cos(heading) * dt
        y = y + speed * np.sin(heading) * dt
        heading = wrap_angle_array(heading + speed / params.wheelbase * np.tan(steer) * dt)
        speed = np.maximum(speed + accel * dt, 0.0)
        out[:, k + 1, 0], out[:, k + 1, 1] = x, y
        out[:, k + 1, 2], out[:, k + 1, 3] = heading, speed
    return out


def gaussian_fuse(a: Gaussian2, b: Gaussian2) -> Gaussian2:
    """Product-of-Gaussians measurement update (Kalman form).

    mean = a.mean + K (b.mean - a.mean),  cov = a.cov - K a.cov,
    with K = a.cov (a.cov + b.cov)^-1. Raises FusionError when the
    innovation covariance is singular.
    """
    s = a.cov + b.cov
    det = s[0, 0] * s[1, 1] - s[0, 1] * s[1, 0]
    scale = max(1.0, float(np.abs(s).max()) ** 2)
    if abs(det) < 1e-12 * scale:
        raise FusionError("sum of covariances is singular; cannot fuse")
    s_inv = np.array([[s[1, 1], -s[0, 1]], [-s[1, 0], s[0, 0]]]) / det
    gain = a.cov @ s_inv
    mean = a.mean + gain @ (b.mean - a.mean)
    cov = a.cov - gain @ a.cov
    cov = 0.5 * (cov + cov.T)
    return Gaussian2(mean, cov)
