"""Scenario documents: schema, validation, and derived runtime artifacts.

A scenario is a JSON document (schema_version 1) describing the road, the
ego vehicle, scripted agents, the route and its temporal constraints, the
ego maneuver catalog, the agent maneuver library, sensing, noise, and the
chance constraint. Loading validates every field (errors name the field),
fills documented defaults, and synthesizes the agent maneuver library from
noisy closed-loop demonstrations so the simulator and the planner share
one motion model.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .core import DynamicsParams, NoiseModel, VehicleState, propagate_samples
from .errors import ScenarioError
from .maneuvers import ManeuverSpec, make_reference, track_reference
from .pft import ManeuverLibrary, Trajectory, fit_pft, load_library
from .planner import ChanceConstraint
from .roads import Lane, RoadMap
from .scene import SensorConfig
from .stn import STN, RouteWaypoint, TemporalConstraint

SCHEMA_VERSION = 1

DEFAULTS = {
    "dt": 0.1,
    "max_steps": 400,
    "seed": 0,
    "goal_tolerance": 6.0,
    "stale_limit": 20,
    "obs_noise": 0.25,
    "risk_aggregation": "independent",
    "v2v_enabled": True,
    "catalog_samples": 500,
    "catalog_seed": 1,
    "speed_quantum": 0.25,
    "library_duration_steps": 30,
    "library_demos": 30,
    "library_seed": 7,
    "maneuver_duration_steps": 30,
}


@dataclass(frozen=True)
class AgentConfig:
    id: str
    state: VehicleState
    footprint_radius: float
    v2v_equipped: bool
    intent_sequence: tuple | None   # maneuver ids, repeated from the last entry
    intent_distribution: dict | None  # maneuver id -> probability


@dataclass(frozen=True)
class LibraryManeuver:
    id: str
    start_speed: float
    accel: float = 0.0
    lateral_offset: float = 0.0


@dataclass(frozen=True)
class LibraryConfig:
    maneuvers: tuple
    duration_steps: int
    demos_per_maneuver: int
    seed: int
    prior: dict | None  # None => uniform


@dataclass(frozen=True)
class RewardWeights:
    w_progress: float = 1.0
    w_time: float = 0.1
    w_lateral: float = 0.2


@dataclass(eq=False)
class Scenario:
    name: str
    document: dict
    dt: float
    max_steps: int
    seed: int
    road_map: RoadMap
    ego_state: VehicleState
    ego_radius: float
    agents: list
    route: list  # RouteWaypoint
    goal_tolerance: float
    stn: STN
    catalog_specs: tuple
    catalog_samples: int
    catalog_seed: int
    speed_quantum: float
    macros: dict
    library_config: LibraryConfig | None
    library_file: str | None
    library: ManeuverLibrary
    sensor: SensorConfig
    v2v_enabled: bool
    ego_noise: NoiseModel
    agent_noise: NoiseModel
    chance: ChanceConstraint
    stale_limit: int
    reward: RewardWeights
    obs_noise: float
    risk_aggregation: str
    dynamics: DynamicsParams

    @property
    def agent_radii(self) -> dict:
        return {a.id: a.footprint_radius for a in self.agents}

    @property
    def goal_position(self) -> np.ndarray:
        wp = self.route[-1]
        return np.array([wp.x, wp.y])

    def route_polyline(self) -> np.ndarray:
        pts = [[self.ego_state.x, self.ego_state.y]]
        pts.extend([wp.x, wp.y] for wp in self.route)
        return np.asarray(pts, dtype=float)

    def library_maneuver(self, mid: str) -> LibraryManeuver:
        if self.library_config is not None:
            for m in self.library_config.maneuvers:
                if m.id == mid:
                    return m
        raise ScenarioError(f"agents.intent: maneuver {mid!r} has no library definition")


def _fail(field_name: str, message: str):
    raise ScenarioError(f"{field_name}: {message}")


def _get(doc, field_name, default=None, required=False):
    parts = field_name.split(".")
    node = doc
    for p in parts:
        if not isinstance(node, dict) or p not in node:
            if required:
                _fail(field_name, "missing required field")
            return default
        node = node[p]
    return node


def _number(doc, field_name, default=None, required=False, lo=None, hi=None):
    value = _get(doc, field_name, default, required)
    if value is None:
        return None
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
        _fail(field_name, f"expected a finite number, got {value!r}")
    if lo is not None and value < lo:
        _fail(field_name, f"must be >= {lo}, got {value}")
    if hi is not None and value > hi:
        _fail(field_name, f"must be <= {hi}, got {value}")
    return float(value)


def _state(doc, field_name) -> VehicleState:
    raw = _get(doc, field_name, required=True)
    try:
        return VehicleState(
            float(raw["x"]), float(raw["y"]),
            float(raw.get("heading", 0.0)), float(raw["speed"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        _fail(field_name, f"invalid vehicle state: {exc}")


def synthesize_library(cfg: LibraryConfig, noise: NoiseModel, dt: float,
                       params: DynamicsParams) -> ManeuverLibrary:
    """Fit one tube per library maneuver from noisy closed-loop demos."""
    entries = {}
    T = cfg.duration_steps
    for m in cfg.maneuvers:
        start = VehicleState(0.0, 0.0, 0.0, m.start_speed)
        target = max(0.0, m.start_speed + m.accel * T * dt)
        reference = make_reference((m.lateral_offset, target, T), start, dt)
        controls = track_reference(reference, start, dt=dt, params=params)
        seed = zlib.crc32(f"{cfg.seed}|{m.id}".encode())
        samples = propagate_samples(start, controls, noise, cfg.demos_per_maneuver,
                                    seed, dt, params)
        trajs = []
        for row in samples:
            pts = [(k * dt, VehicleState(*row[k])) for k in range(T + 1)]
            trajs.append(Trajectory(pts))
        entries[m.id] = fit_pft(trajs, T, dt)
    if cfg.prior is None:
        prior = {mid: 1.0 / len(entries) for mid in entries}
    else:
        prior = dict(cfg.prior)
    return ManeuverLibrary(entries, prior)


def load_scenario(source) -> Scenario:
    """Parse and validate a scenario document (dict, JSON text, or path)."""
    if isinstance(source, dict):
        doc = source
    elif isinstance(source, str) and source.lstrip().startswith("{"):
        doc = json.loads(source)
    else:
        with open(source) as fh:
            doc = json.load(fh)

    version = _get(doc, "schema_version", required=True)
    if version != SCHEMA_VERSION:
        _fail("schema_version", f"expected {SCHEMA_VERSION}, got {version!r}")
    name = _get(doc, "name", default="unnamed")

    dt = _number(doc, "dt", DEFAULTS["dt"], lo=1e-3)
    max_steps = int(_number(doc, "max_steps", DEFAULTS["max_steps"], lo=1))
    seed = int(_number(doc, "seed", DEFAULTS["seed"]))

    lanes_raw = _get(doc, "map.lanes", required=True)
    if not isinstance(lanes_raw, list) or not lanes_raw:
        _fail("map.lanes", "must be a non-empty list")
    lanes = []
    for i, lr in enumerate(lanes_raw):
        try:
            lanes.append(Lane(
                id=str(lr["id"]),
                centerline=np.asarray(lr["centerline"], dtype=float),
                width=float(lr["width"]),
                speed_limit=float(lr.get("speed_limit", 15.0)),
            ))
        except Exception as exc:
            _fail(f"map.lanes[{i}]", str(exc))
    try:
        road_map = RoadMap(lanes)
    except Exception as exc:
        _fail("map.lanes", str(exc))

    ego_state = _state(doc, "ego.state")
    ego_radius = _number(doc, "ego.footprint_radius", 0.9, lo=1e-6)

    dynamics = DynamicsParams(
        wheelbase=_number(doc, "dynamics.wheelbase", 2.7, lo=0.5),
        accel_max=_number(doc, "dynamics.accel_max", 3.0, lo=0.1),
        steer_max=_number(doc, "dynamics.steer_max", 0.5, lo=0.01),
    )

    agent_noise = NoiseModel(
        _number(doc, "agent_noise.sigma_accel", 0.2, lo=0.0),
        _number(doc, "agent_noise.sigma_steer", 0.005, lo=0.0),
    )
    ego_noise = NoiseModel(
        _number(doc, "ego_noise.sigma_accel", 0.3, lo=0.0),
        _number(doc, "ego_noise.sigma_steer", 0.01, lo=0.0),
    )

    # Agent maneuver library: loaded from a file, synthesized from the
    # declared maneuvers, or (agent-free scenarios only) a trivial default.
    lib_doc = _get(doc, "library", default=None)
    library_config = None
    library_file = None
    library = None
    if lib_doc is not None and "file" in lib_doc:
        library_file = str(lib_doc["file"])
        library = load_library(library_file)
    elif lib_doc is not None:
        maneuvers = []
        for i, mr in enumerate(_get(doc, "library.maneuvers", required=True)):
            try:
                maneuvers.append(LibraryManeuver(
                    id=str(mr["id"]),
                    start_speed=float(mr["start_speed"]),
                    accel=float(mr.get("accel", 0.0)),
                    lateral_offset=float(mr.get("lateral_offset", 0.0)),
                ))
            except Exception as exc:
                _fail(f"library.maneuvers[{i}]", str(exc))
        ids = [m.id for m in maneuvers]
        if len(set(ids)) != len(ids):
            _fail("library.maneuvers", "maneuver ids must be unique")
        library_config = LibraryConfig(
            maneuvers=tuple(maneuvers),
            duration_steps=int(_number(doc, "library.duration_steps",
                                       DEFAULTS["library_duration_steps"], lo=2)),
            demos_per_maneuver=int(_number(doc, "library.demos_per_maneuver",
                                           DEFAULTS["library_demos"], lo=2)),
            seed=int(_number(doc, "library.seed", DEFAULTS["library_seed"])),
            prior=_get(doc, "library.prior", default=None),
        )
    else:
        if _get(doc, "agents", default=[]):
            _fail("library", "required when the scenario declares agents")
        library_config = LibraryConfig(
            maneuvers=(LibraryManeuver("cruise", start_speed=ego_state.speed),),
            duration_steps=DEFAULTS["library_duration_steps"],
            demos_per_maneuver=DEFAULTS["library_demos"],
            seed=DEFAULTS["library_seed"],
            prior=None,
        )
    if library is None:
        try:
            library = synthesize_library(library_config, agent_noise, dt, dynamics)
        except ScenarioError:
            raise
        except Exception as exc:
            _fail("library", f"failed to synthesize: {exc}")

    agents = []
    for i, ar in enumerate(_get(doc, "agents", default=[])):
        prefix = f"agents[{i}]"
        try:
            aid = str(ar["id"])
        except Exception:
            _fail(prefix + ".id", "missing agent id")
        state = _state({"s": ar}, "s.state")
        radius = float(ar.get("footprint_radius", 0.9))
        if radius <= 0:
            _fail(prefix + ".footprint_radius", "must be > 0")
        intent = ar.get("intent")
        sequence, distribution = None, None
        if isinstance(intent, list) and intent:
            sequence = tuple(str(x) for x in intent)
            unknown = [m for m in sequence if m not in library.entries]
            if unknown:
                _fail(prefix + ".intent", f"unknown maneuver ids {unknown}")
        elif isinstance(intent, dict) and intent.get("distribution"):
            distribution = {str(k): float(v) for k, v in intent["distribution"].items()}
            unknown = [m for m in distribution if m not in library.entries]
            if unknown:
                _fail(prefix + ".intent", f"unknown maneuver ids {unknown}")
            if abs(sum(distribution.values()) - 1.0) > 1e-9:
                _fail(prefix + ".intent", "distribution must sum to 1")
        else:
            _fail(prefix + ".intent", "need a maneuver id list or a distribution")
        agents.append(AgentConfig(aid, state, radius, bool(ar.get("v2v_equipped", False)),
                                  sequence, distribution))
    ids = [a.id for a in agents]
    if len(set(ids)) != len(ids):
        _fail("agents", "agent ids must be unique")

    # Route and STN.
    wp_raw = _get(doc, "route.waypoints", required=True)
    if not isinstance(wp_raw, list) or not wp_raw:
        _fail("route.waypoints", "must be a non-empty list")
    stn_events = _get(doc, "stn.events", default=None)
    stn_constraints_raw = _get(doc, "stn.constraints", default=[])
    if stn_events is None:
        stn_events = ["origin"] + [f"arrive_{k}" for k in range(len(wp_raw))]
    try:
        constraints = [
            TemporalConstraint(str(c["from"]), str(c["to"]),
                               float(c["lower"]), float(c["upper"]))
            for c in stn_constraints_raw
        ]
        stn = STN([str(e) for e in stn_events], constraints)
    except ScenarioError:
        raise
    except Exception as exc:
        _fail("stn", str(exc))
    route = []
    for k, wr in enumerate(wp_raw):
        try:
            event = str(wr.get("event", f"arrive_{k}"))
            if event not in stn.events:
                _fail(f"route.waypoints[{k}].event", f"event {event!r} not in stn.events")
            route.append(RouteWaypoint(float(wr["x"]), float(wr["y"]),
                                       float(wr.get("speed", ego_state.speed)), event))
        except ScenarioError:
            raise
        except Exception as exc:
            _fail(f"route.waypoints[{k}]", str(exc))
    goal_tolerance = _number(doc, "route.goal_tolerance", DEFAULTS["goal_tolerance"], lo=0.1)

    # Ego maneuver catalog.
    cat_raw = _get(doc, "catalog.maneuvers", default=None)
    duration_default = int(_number(doc, "catalog.duration_steps",
                                   DEFAULTS["maneuver_duration_steps"], lo=2))
    if cat_raw is None:
        lane_width = lanes[0].width
        cat_raw = [
            {"id": "maintain"},
            {"id": "accelerate", "accel": 1.5},
            {"id": "decelerate", "accel": -1.5},
            {"id": "merge_left", "lateral_offset": lane_width},
            {"id": "merge_right", "lateral_offset": -lane_width},
        ]
    specs = []
    for i, cr in enumerate(cat_raw):
        try:
            specs.append(ManeuverSpec(
                id=str(cr["id"]),
                accel=float(cr.get("accel", 0.0)),
                lateral_offset=float(cr.get("lateral_offset", 0.0)),
                duration_steps=int(cr.get("duration_steps", duration_default)),
            ))
        except Exception as exc:
            _fail(f"catalog.maneuvers[{i}]", str(exc))
    spec_ids = [s.id for s in specs]
    if len(set(spec_ids)) != len(spec_ids):
        _fail("catalog.maneuvers", "maneuver ids must be unique")

    macros = {}
    for mid, seq in (_get(doc, "macros", default={}) or {}).items():
        seq = tuple(str(x) for x in seq)
        unknown = [x for x in seq if x not in spec_ids]
        if unknown:
            _fail(f"macros.{mid}", f"references unknown catalog maneuvers {unknown}")
        if not seq:
            _fail(f"macros.{mid}", "must reference at least one maneuver")
        macros[str(mid)] = seq

    sensor = SensorConfig(
        range=_number(doc, "sensor.range", 60.0, lo=0.0),
        pos_noise_std=_number(doc, "sensor.pos_noise_std", 0.5, lo=0.0),
        v2v_range=_number(doc, "sensor.v2v_range", 300.0, lo=0.0),
        v2v_pos_noise_std=_number(doc, "sensor.v2v_pos_noise_std", 0.4, lo=0.0),
        occlusion_enabled=bool(_get(doc, "sensor.occlusion_enabled", default=True)),
    )

    delta = _number(doc, "chance_constraint.delta", 0.01)
    if not 0.0 <= delta <= 1.0:
        _fail("chance_constraint.delta", f"must lie in [0, 1], got {delta}")
    horizon = int(_number(doc, "chance_constraint.horizon_epochs", 3, lo=1))
    mode = _get(doc, "chance_constraint.mode", default="mission")
    if mode not in ("mission", "per_epoch"):
        _fail("chance_constraint.mode", f"unknown mode {mode!r}")
    chance = ChanceConstraint(delta, horizon, mode)

    reward = RewardWeights(
        w_progress=_number(doc, "reward.w_progress", 1.0),
        w_time=_number(doc, "reward.w_time", 0.1, lo=0.0),
        w_lateral=_number(doc, "reward.w_lateral", 0.2, lo=0.0),
    )

    aggregation = _get(doc, "risk_aggregation", default=DEFAULTS["risk_aggregation"])
    if aggregation not in ("independent", "union_bound"):
        _fail("risk_aggregation", f"unknown aggregation {aggregation!r}")

    scenario = Scenario(
        name=str(name),
        document=doc,
        dt=dt,
        max_steps=max_steps,
        seed=seed,
        road_map=road_map,
        ego_state=ego_state,
        ego_radius=ego_radius,
        agents=agents,
        route=route,
        goal_tolerance=goal_tolerance,
        stn=stn,
        catalog_specs=tuple(specs),
        catalog_samples=int(_number(doc, "catalog.samples", DEFAULTS["catalog_samples"], lo=50)),
        catalog_seed=int(_number(doc, "catalog.seed", DEFAULTS["catalog_seed"])),
        speed_quantum=_number(doc, "catalog.speed_quantum", DEFAULTS["speed_quantum"], lo=1e-3),
        macros=macros,
        library_config=library_config,
        library_file=library_file,
        library=library,
        sensor=sensor,
        v2v_enabled=bool(_get(doc, "v2v_enabled", default=DEFAULTS["v2v_enabled"])),
        ego_noise=ego_noise,
        agent_noise=agent_noise,
        chance=chance,
        stale_limit=int(_number(doc, "tracking.stale_limit", DEFAULTS["stale_limit"], lo=0)),
        reward=reward,
        obs_noise=_number(doc, "obs_noise", DEFAULTS["obs_noise"], lo=0.0),
        risk_aggregation=aggregation,
        dynamics=dynamics,
    )
    scenario.document = scenario_to_document(scenario)
    return scenario


def scenario_to_document(sc: Scenario) -> dict:
    """Serialize with every default filled in (echo form)."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "name": sc.name,
        "dt": sc.dt,
        "max_steps": sc.max_steps,
        "seed": sc.seed,
        "map": {"lanes": [
            {"id": l.id, "centerline": l.centerline.tolist(), "width": l.width,
             "speed_limit": l.speed_limit} for l in sc.road_map.lanes
        ]},
        "ego": {"state": _state_doc(sc.ego_state), "footprint_radius": sc.ego_radius},
        "dynamics": {"wheelbase": sc.dynamics.wheelbase,
                     "accel_max": sc.dynamics.accel_max,
                     "steer_max": sc.dynamics.steer_max},
        "agents": [
            {
                "id": a.id,
                "state": _state_doc(a.state),
                "footprint_radius": a.footprint_radius,
                "v2v_equipped": a.v2v_equipped,
                "intent": list(a.intent_sequence) if a.intent_sequence is not None
                          else {"distribution": a.intent_distribution},
            }
            for a in sc.agents
        ],
        "route": {
            "waypoints": [
                {"x": wp.x, "y": wp.y, "speed": wp.speed, "event": wp.event}
                for wp in sc.route
            ],
            "goal_tolerance": sc.goal_tolerance,
        },
        "stn": {
            "events": list(sc.stn.events),
            "constraints": [
                {"from": c.from_event, "to": c.to_event, "lower": c.lower, "upper": c.upper}
                for c in sc.stn.constraints
            ],
        },
        "catalog": {
            "maneuvers": [
                {"id": s.id, "accel": s.accel, "lateral_offset": s.lateral_offset,
                 "duration_steps": s.duration_steps}
                for s in sc.catalog_specs
            ],
            "samples": sc.catalog_samples,
            "seed": sc.catalog_seed,
            "speed_quantum": sc.speed_quantum,
        },
        "macros": {mid: list(seq) for mid, seq in sorted(sc.macros.items())},
        "sensor": {
            "range": sc.sensor.range,
            "pos_noise_std": sc.sensor.pos_noise_std,
            "v2v_range": sc.sensor.v2v_range,
            "v2v_pos_noise_std": sc.sensor.v2v_pos_noise_std,
            "occlusion_enabled": sc.sensor.occlusion_enabled,
        },
        "v2v_enabled": sc.v2v_enabled,
        "ego_noise": {"sigma_accel": sc.ego_noise.sigma_accel,
                      "sigma_steer": sc.ego_noise.sigma_steer},
        "agent_noise": {"sigma_accel": sc.agent_noise.sigma_accel,
                        "sigma_steer": sc.agent_noise.sigma_steer},
        "chance_constraint": {"delta": sc.chance.delta,
                              "horizon_epochs": sc.chance.horizon_epochs,
                              "mode": sc.chance.mode},
        "tracking": {"stale_limit": sc.stale_limit},
        "reward": {"w_progress": sc.reward.w_progress, "w_time": sc.reward.w_time,
                   "w_lateral": sc.reward.w_lateral},
        "obs_noise": sc.obs_noise,
        "risk_aggregation": sc.risk_aggregation,
    }
    if sc.library_file is not None:
        doc["library"] = {"file": sc.library_file}
    elif sc.library_config is not None:
        doc["library"] = {
            "maneuvers": [
                {"id": m.id, "start_speed": m.start_speed, "accel": m.accel,
                 "lateral_offset": m.lateral_offset}
                for m in sc.library_config.maneuvers
            ],
            "duration_steps": sc.library_config.duration_steps,
            "demos_per_maneuver": sc.library_config.demos_per_maneuver,
            "seed": sc.library_config.seed,
            "prior": sc.library_config.prior,
        }
    return doc


def _state_doc(s: VehicleState) -> dict:
    return {"x": s.x, "y": s.y, "heading": s.heading, "speed": s.speed}


def bundled_scenario_names() -> list[str]:
    root = resources.files("riskstack").joinpath("data/scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_bundled_scenario(name: str) -> Scenario:
    path = resources.files("riskstack").joinpath(f"data/scenarios/{name}.json")
    if not path.is_file():
        raise ScenarioError(
            f"scenario: no bundled scenario {name!r} (available: {bundled_scenario_names()})"
        )
    return load_scenario(json.loads(path.read_text()))
