"""Ego maneuver generation: references, tracking control, uncertainty tubes.

Maneuvers are short fixed-duration motions (lane keeps, speed changes,
merges). Each gets a geometric reference (quintic lateral profile, linear
speed ramp), nominal controls from a saturating feedback tracker, and a
flow tube obtained by pushing control noise through the dynamics. The
tracker stands in for a trajectory-optimization layer; anything producing
controls for a reference can replace it.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DEFAULT_PARAMS,
    Control,
    DynamicsParams,
    NoiseModel,
    VehicleState,
    propagate_samples,
    rollout,
    step_dynamics,
    wrap_angle,
)
from .errors import InfeasibleManeuverError, InvalidInputError, MissingManeuverError
from .pft import COV_REGULARIZATION, PFT, transform_pft
from .roads import RoadMap

MICRO_KINDS = ("accelerate", "decelerate", "maintain")


@dataclass(frozen=True)
class MicroAction:
    """Primitive longitudinal action held for a number of steps."""

    kind: str
    magnitude: float
    duration_steps: int

    def __post_init__(self):
        if self.kind not in MICRO_KINDS:
            raise InvalidInputError(f"unknown micro action kind {self.kind!r}")
        if self.magnitude < 0:
            raise InvalidInputError("micro action magnitude must be >= 0")
        if self.kind == "maintain" and self.magnitude != 0:
            raise InvalidInputError("maintain must have zero magnitude")
        if self.duration_steps < 1:
            raise InvalidInputError("micro action duration must be >= 1 step")


@dataclass(frozen=True)
class ManeuverAction:
    """A concrete maneuver anchored at an execution-start pose."""

    id: str
    micro_sequence: tuple
    lateral_offset: float
    duration_steps: int
    nominal_controls: tuple
    tube: PFT
    end_state: VehicleState

    def __post_init__(self):
        if len(self.nominal_controls) != self.duration_steps:
            raise InvalidInputError("nominal_controls length must equal duration_steps")
        if len(self.tube) != self.duration_steps:
            raise InvalidInputError("tube length must equal duration_steps")


@dataclass(frozen=True)
class MacroAction:
    """A named sequence of maneuver ids."""

    id: str
    maneuver_sequence: tuple

    def __post_init__(self):
        if not self.maneuver_sequence:
            raise InvalidInputError(f"macro {self.id!r} must reference at least one maneuver")


@dataclass(frozen=True)
class TrackingGains:
    k_speed: float = 1.5
    k_heading: float = 2.5
    k_lateral: float = 1.2
    speed_floor: float = 1.0
    tracking_tol: float = 0.3  # meters RMS


DEFAULT_GAINS = TrackingGains()


def quintic_blend(s):
    """Smoothstep with zero first and second derivatives at both ends."""
    return 10 * s ** 3 - 15 * s ** 4 + 6 * s ** 5


def make_reference(spec, initial: VehicleState, dt: float = 0.1) -> list[VehicleState]:
    """Reference states for (lateral_offset, target_speed, duration_steps).

    Lateral motion follows a quintic normalized-time profile (zero lateral
    velocity and acceleration at both ends); speed ramps linearly to the
    target. Returns duration_steps + 1 world-frame states.
    """
    lateral_offset, target_speed, duration_steps = spec
    if duration_steps < 2:
        raise InvalidInputError("duration_steps must be >= 2")
    if target_speed < 0:
        raise InvalidInputError("target_speed must be >= 0")
    total = duration_steps * dt
    v0 = initial.speed
    c, s = math.cos(initial.heading), math.sin(initial.heading)
    states = []
    for k in range(duration_steps + 1):
        tau = k * dt
        frac = k / duration_steps
        v = v0 + (target_speed - v0) * frac
        x_rel = v0 * tau + 0.5 * (target_speed - v0) * tau * tau / total
        y_rel = lateral_offset * quintic_blend(frac)
        dy = lateral_offset * (30 * frac ** 2 - 60 * frac ** 3 + 30 * frac ** 4) / total
        heading_rel = math.atan2(dy, v) if (v > 1e-9 or abs(dy) > 1e-9) else 0.0
        states.append(VehicleState(
            initial.x + c * x_rel - s * y_rel,
            initial.y + s * x_rel + c * y_rel,
            wrap_angle(initial.heading + heading_rel),
            v,
        ))
    return states


def track_reference(
    reference,
    initial: VehicleState,
    gains: TrackingGains = DEFAULT_GAINS,
    dt: float = 0.1,
    params: DynamicsParams = DEFAULT_PARAMS,
) -> list[Control]:
    """Nominal controls that follow a reference from `initial`.

    Longitudinal control is a feedforward ramp plus proportional speed
    feedback; steering combines curvature feedforward with heading and
    cross-track feedback, everything saturated at the actuator limits.
    Raises InfeasibleManeuverError when the reference demands accelerations
    beyond the envelope or the closed-loop RMS position error exceeds
    gains.tracking_tol.
    """
    reference = list(reference)
    if len(reference) < 2:
        raise InvalidInputError("reference must contain at least 2 states")
    horizon = (len(reference) - 1) * dt
    mean_required_accel = abs(reference[-1].speed - reference[0].speed) / horizon
    if mean_required_accel > params.accel_max + 1e-9:
        raise InfeasibleManeuverError(
            f"reference needs accel {mean_required_accel:.2f} beyond limit {params.accel_max}"
        )
    # Discontinuous speed profiles are legal inputs (the controller saturates
    # through them) but void the tracking-error guarantee below.
    smooth = all(
        abs(b.speed - a.speed) / dt <= params.accel_max + 1e-9
        for a, b in zip(reference, reference[1:])
    )

    controls = []
    state = initial
    sq_err = 0.0
    for i in range(len(reference) - 1):
        ref_next = reference[i + 1]
        accel_ff = (ref_next.speed - reference[i].speed) / dt
        accel = accel_ff + gains.k_speed * (ref_next.speed - state.speed)
        accel = min(params.accel_max, max(-params.accel_max, accel))

        v_ctl = max(state.speed, gains.speed_floor)
        dtheta = wrap_angle(ref_next.heading - reference[i].heading)
        steer_ff = math.atan2(params.wheelbase * dtheta, v_ctl * dt)
        # Cross-track error in the reference heading frame, left positive.
        cr, sr = math.cos(ref_next.heading), math.sin(ref_next.heading)
        ex = ref_next.x - state.x
        ey = ref_next.y - state.y
        e_lat = -sr * ex + cr * ey
        e_heading = wrap_angle(ref_next.heading - state.heading)
        steer = steer_ff + gains.k_heading * e_heading + math.atan2(gains.k_lateral * e_lat, v_ctl)
        steer = min(params.steer_max, max(-params.steer_max, steer))

        control = Control(accel, steer)
        controls.append(control)
        state = step_dynamics(state, control, dt, params)
        sq_err += (state.x - ref_next.x) ** 2 + (state.y - ref_next.y) ** 2

    rms = math.sqrt(sq_err / (len(reference) - 1))
    if smooth and rms > gains.tracking_tol:
        raise InfeasibleManeuverError(
            f"closed-loop RMS error {rms:.3f} m exceeds {gains.tracking_tol} m"
        )
    return controls


def generate_pft(
    initial: VehicleState,
    controls,
    noise: NoiseModel,
    n: int,
    seed: int,
    dt: float = 0.1,
    params: DynamicsParams = DEFAULT_PARAMS,
) -> PFT:
    """Flow tube from Monte Carlo propagation of noisy controls.

    One Gaussian per control step (the start point is excluded), sample
    mean / covariance with the standard 1e-6 I regularization.
    """
    if n < 50:
        raise InvalidInputError(f"need n >= 50 samples for a stable tube, got {n}")
    samples = propagate_samples(initial, controls, noise, n, seed, dt, params)
    positions = samples[:, 1:, :2]
    speeds = samples[:, 1:, 3]
    means = positions.mean(axis=0)
    centered = positions - means[np.newaxis]
    covs = np.einsum("mti,mtj->tij", centered, centered) / (n - 1)
    covs += COV_REGULARIZATION * np.eye(2)[np.newaxis]
    return PFT(dt, means, covs, speeds.mean(axis=0), frame="world")


def expand_macro(macro: MacroAction, catalog: dict) -> list[ManeuverAction]:
    """Resolve a macro into its ordered concrete maneuvers."""
    out = []
    for mid in macro.maneuver_sequence:
        if mid not in catalog:
            raise MissingManeuverError(f"macro {macro.id!r} references unknown maneuver {mid!r}")
        out.append(catalog[mid])
    return out


# ---------------------------------------------------------------------------
# Catalog generation for the planner.

@dataclass(frozen=True)
class ManeuverSpec:
    """Scenario-configurable maneuver template."""

    id: str
    accel: float = 0.0           # signed, m/s^2, held over the maneuver
    lateral_offset: float = 0.0  # signed, meters, + is left
    duration_steps: int = 30


DEFAULT_MANEUVER_SPECS = (
    ManeuverSpec("maintain"),
    ManeuverSpec("accelerate", accel=1.5),
    ManeuverSpec("decelerate", accel=-1.5),
    ManeuverSpec("merge_left", lateral_offset=3.75),
    ManeuverSpec("merge_right", lateral_offset=-3.75),
)


def _micro_for(spec: ManeuverSpec) -> tuple:
    if spec.accel > 0:
        return (MicroAction("accelerate", spec.accel, spec.duration_steps),)
    if spec.accel < 0:
        return (MicroAction("decelerate", -spec.accel, spec.duration_steps),)
    return (MicroAction("maintain", 0.0, spec.duration_steps),)


def _stable_seed(*parts) -> int:
    text = "|".join(str(p) for p in parts)
    return zlib.crc32(text.encode())


class CatalogProvider:
    """Builds the ego maneuver set for a state, with start-frame tube caching.

    Tubes and controls are computed once per (maneuver, quantized start
    speed) at a canonical origin pose and rigidly re-anchored per call, so
    catalog generation inside the planner is cheap and a deterministic
    function of the query state.
    """

    def __init__(
        self,
        specs=DEFAULT_MANEUVER_SPECS,
        road_map: RoadMap | None = None,
        noise: NoiseModel = NoiseModel(0.3, 0.01),
        n_samples: int = 500,
        base_seed: int = 0,
        dt: float = 0.1,
        params: DynamicsParams = DEFAULT_PARAMS,
        gains: TrackingGains = DEFAULT_GAINS,
        speed_quantum: float = 0.25,
    ):
        self.specs = tuple(specs)
        ids = [s.id for s in self.specs]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("maneuver ids must be unique")
        self.road_map = road_map
        self.noise = noise
        self.n_samples = n_samples
        self.base_seed = base_seed
        self.dt = dt
        self.params = params
        self.gains = gains
        self.speed_quantum = speed_quantum
        self._cache: dict = {}

    def quantize_speed(self, speed: float) -> float:
        return round(speed / self.speed_quantum) * self.speed_quantum

    def _canonical(self, spec: ManeuverSpec, v_q: float):
        """Controls, start-frame tube, and end state at the origin pose."""
        key = (spec.id, v_q)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        start = VehicleState(0.0, 0.0, 0.0, v_q)
        target_speed = max(0.0, v_q + spec.accel * spec.duration_steps * self.dt)
        reference = make_reference(
            (spec.lateral_offset, target_speed, spec.duration_steps), start, self.dt
        )
        controls = track_reference(reference, start, self.gains, self.dt, self.params)
        seed = _stable_seed(self.base_seed, spec.id, round(v_q, 3))
        tube = generate_pft(start, controls, self.noise, self.n_samples, seed,
                            self.dt, self.params)
        tube = PFT(tube.dt, tube.means, tube.covs, tube.mean_speed, frame="maneuver_start")
        result = (tuple(controls), tube, reference[-1])
        self._cache[key] = result
        return result

    def _gated_out(self, spec: ManeuverSpec, state: VehicleState, end_rel: VehicleState) -> bool:
        if self.road_map is None:
            return False
        pos = state.position
        here = self.road_map.lane_containing(pos)
        if spec.accel > 0:
            limit = here.speed_limit if here else self.road_map.max_speed_limit
            if state.speed + spec.accel * spec.duration_steps * self.dt > limit + 1e-9:
                return True
        if spec.lateral_offset != 0.0:
            c, s = math.cos(state.heading), math.sin(state.heading)
            end = np.array([
                state.x + c * end_rel.x - s * end_rel.y,
                state.y + s * end_rel.x + c * end_rel.y,
            ])
            if self.road_map.lane_containing(end) is None:
                return True
        return False

    def catalog(self, state: VehicleState) -> list[ManeuverAction]:
        """All feasible maneuvers anchored at `state`, quantized-speed cached."""
        v_q = self.quantize_speed(state.speed)
        anchor = VehicleState(state.x, state.y, state.heading, v_q)
        actions = []
        for spec in self.specs:
            try:
                controls, tube, end_rel = self._canonical(spec, v_q)
            except InfeasibleManeuverError:
                continue
            if self._gated_out(spec, state, end_rel):
                continue
            c, s = math.cos(anchor.heading), math.sin(anchor.heading)
            end_state = VehicleState(
                anchor.x + c * end_rel.x - s * end_rel.y,
                anchor.y + s * end_rel.x + c * end_rel.y,
                wrap_angle(anchor.heading + end_rel.heading),
                end_rel.speed,
            )
            actions.append(ManeuverAction(
                id=spec.id,
                micro_sequence=_micro_for(spec),
                lateral_offset=spec.lateral_offset,
                duration_steps=spec.duration_steps,
                nominal_controls=controls,
                tube=transform_pft(tube, anchor),
                end_state=end_state,
            ))
        return actions
