"""Simple temporal networks: consistency, schedules, goal relaxation.

An STN holds events and interval constraints `to - from in [lower, upper]`.
Its distance graph carries one edge from->to with weight upper and one
to->from with weight -lower; the network is consistent iff that graph has
no negative cycle. Schedules come from single-source shortest paths
anchored at the origin event (index 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import InvalidInputError, UnrelaxableError

EPS_CYCLE = 1e-9  # improvements below this are float noise, not cycles


@dataclass(frozen=True)
class TemporalConstraint:
    from_event: str
    to_event: str
    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise InvalidInputError(
                f"constraint {self.from_event}->{self.to_event} has lower > upper"
            )
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise InvalidInputError("constraint bounds must be finite")


@dataclass(frozen=True)
class STN:
    """Events (index 0 is the time origin) plus interval constraints."""

    events: tuple
    constraints: tuple

    def __init__(self, events, constraints):
        events = tuple(events)
        constraints = tuple(constraints)
        if not events:
            raise InvalidInputError("STN needs at least one event")
        if len(set(events)) != len(events):
            raise InvalidInputError("event ids must be unique")
        known = set(events)
        for c in constraints:
            if c.from_event not in known or c.to_event not in known:
                raise InvalidInputError(
                    f"constraint references unknown event: {c.from_event}->{c.to_event}"
                )
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "constraints", constraints)

    @property
    def origin(self) -> str:
        return self.events[0]


@dataclass(frozen=True)
class DistanceEdge:
    tail: int
    head: int
    weight: float
    constraint_index: int
    bound: str  # "upper" or "lower"


@dataclass(frozen=True)
class STNResult:
    feasible: bool
    schedule: dict | None
    negative_cycle: tuple | None  # DistanceEdge tuple when infeasible


@dataclass(frozen=True)
class SetPoint:
    waypoint: tuple
    earliest: float
    latest: float
    target_speed: float

    def __post_init__(self):
        if self.earliest > self.latest + 1e-12:
            raise InvalidInputError("set point window is empty")
        if self.target_speed < 0:
            raise InvalidInputError("target speed must be >= 0")


@dataclass(frozen=True)
class RouteWaypoint:
    x: float
    y: float
    speed: float
    event: str


def distance_edges(stn: STN) -> list[DistanceEdge]:
    index = {e: i for i, e in enumerate(stn.events)}
    edges = []
    for ci, c in enumerate(stn.constraints):
        i, j = index[c.from_event], index[c.to_event]
        edges.append(DistanceEdge(i, j, c.upper, ci, "upper"))
        edges.append(DistanceEdge(j, i, -c.lower, ci, "lower"))
    return edges


def _all_pairs(stn: STN):
    """Floyd-Warshall distance matrix of the distance graph."""
    n = len(stn.events)
    dist = [[math.inf] * n for _ in range(n)]
    for i in range(n):
        dist[i][i] = 0.0
    for e in distance_edges(stn):
        if e.weight < dist[e.tail][e.head]:
            dist[e.tail][e.head] = e.weight
    for k in range(n):
        dk = dist[k]
        for i in range(n):
            dik = dist[i][k]
            if dik == math.inf:
                continue
            row = dist[i]
            for j in range(n):
                via = dik + dk[j]
                if via < row[j]:
                    row[j] = via
    return dist


def _extract_cycle(n: int, edges):
    """Find one negative cycle via Bellman-Ford predecessor walking.

    All-zero initialization (a virtual source feeding every node) makes any
    negative cycle improve some node on the n-th pass; walking predecessors
    from that node with a visited set always closes a pred-graph loop, and
    pred-graph loops are negative by the strict-improvement invariant.
    """
    dist = [0.0] * n
    pred: list = [None] * n
    improved = None
    for _ in range(n):
        improved = None
        for e in edges:
            if dist[e.tail] + e.weight < dist[e.head] - 1e-12:
                dist[e.head] = dist[e.tail] + e.weight
                pred[e.head] = e
                improved = e.head
        if improved is None:
            return None
    node = improved
    seen = set()
    while node not in seen:
        seen.add(node)
        node = pred[node].tail
    cycle = []
    cursor = node
    while True:
        edge = pred[cursor]
        cycle.append(edge)
        cursor = edge.tail
        if cursor == node:
            break
    cycle.reverse()
    return cycle


def _check_connected(stn: STN) -> None:
    n = len(stn.events)
    if n == 1:
        return
    adj = {i: set() for i in range(n)}
    for e in distance_edges(stn):
        adj[e.tail].add(e.head)
    seen, stack = {0}, [0]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    if len(seen) != n:
        missing = [stn.events[i] for i in range(n) if i not in seen]
        raise InvalidInputError(f"events not connected to origin: {missing}")


def stn_check(stn: STN) -> STNResult:
    """Consistency check plus earliest-time schedule or a cycle witness."""
    _check_connected(stn)
    n = len(stn.events)
    dist = _all_pairs(stn)
    if any(dist[i][i] < -EPS_CYCLE for i in range(n)):
        cycle = _extract_cycle(n, distance_edges(stn))
        if cycle is None:  # pragma: no cover - negative diagonal implies a cycle
            raise InvalidInputError("failed to reconstruct negative cycle witness")
        return STNResult(False, None, tuple(cycle))
    schedule = {ev: -dist[i][0] for i, ev in enumerate(stn.events)}
    return STNResult(True, schedule, None)


def latest_times(stn: STN) -> dict:
    """Latest feasible time per event (shortest paths from the origin)."""
    n = len(stn.events)
    dist = _all_pairs(stn)
    if any(dist[i][i] < -EPS_CYCLE for i in range(n)):
        raise InvalidInputError("latest_times requires a consistent STN")
    return {ev: dist[0][i] for i, ev in enumerate(stn.events)}


def make_set_points(route, stn: STN, schedule: dict) -> list[SetPoint]:
    """Attach arrival windows from the schedule to route waypoints."""
    route = list(route)
    if not route:
        return []
    latest = latest_times(stn)
    points = []
    for wp in route:
        if wp.event not in schedule or wp.event not in latest:
            raise InvalidInputError(f"waypoint event {wp.event!r} missing from schedule")
        points.append(SetPoint((wp.x, wp.y), schedule[wp.event], latest[wp.event], wp.speed))
    return points


def _with_upper(stn: STN, updates: dict) -> STN:
    constraints = [
        replace(c, upper=updates.get(ci, c.upper))
        for ci, c in enumerate(stn.constraints)
    ]
    return STN(stn.events, constraints)


def relax_goals(stn: STN) -> STN:
    """Minimally raise upper bounds until the network becomes consistent.

    Each round spreads the current negative cycle's deficit uniformly over
    the cycle's upper-bound edges; a final tightening pass pulls every
    raised bound back down to the exact value feasibility requires, so
    shrinking any relaxed bound by any positive amount restores
    infeasibility. Cycles made solely of lower-bound edges cannot be fixed
    this way and raise UnrelaxableError.
    """
    result = stn_check(stn)
    if result.feasible:
        raise InvalidInputError("relax_goals requires an infeasible STN")

    uppers = {ci: c.upper for ci, c in enumerate(stn.constraints)}
    current = stn
    for _ in range(max(1, len(stn.constraints))):
        res = stn_check(current)
        if res.feasible:
            break
        cycle = res.negative_cycle
        weight = sum(e.weight for e in cycle)
        upper_edges = sorted({e.constraint_index for e in cycle if e.bound == "upper"})
        if not upper_edges:
            raise UnrelaxableError(
                "negative cycle consists of lower bounds only; cannot relax"
            )
        bump = -weight / len(upper_edges)
        for ci in upper_edges:
            uppers[ci] += bump
        current = _with_upper(stn, uppers)
    if not stn_check(current).feasible:
        raise UnrelaxableError("relaxation did not converge to a consistent network")

    # Tightening fixpoint: lower each raised bound to the exact minimum the
    # rest of the network allows (upper of i->j must be >= -d(j, i)).
    # Lowering one bound never forces another up, so this converges.
    index = {e: i for i, e in enumerate(stn.events)}
    raised = [ci for ci, c in enumerate(stn.constraints) if uppers[ci] > c.upper + 1e-12]
    changed = True
    while changed:
        changed = False
        for ci in raised:
            c = stn.constraints[ci]
            dist = _all_pairs(current)
            required = -dist[index[c.to_event]][index[c.from_event]]
            new_upper = max(c.upper, required)
            if new_upper < uppers[ci] - 1e-12:
                uppers[ci] = new_upper
                current = _with_upper(stn, uppers)
                changed = True
    return current
