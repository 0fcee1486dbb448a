"""Chance-constrained short-horizon policy search over belief hypergraphs.

The solver performs best-first AND-OR search in the space of partial
policies. A partial policy assigns actions to some reached belief nodes;
its priority is an optimistic value (exact rewards on the assigned part,
an admissible per-epoch bound at open nodes) and it carries a lower bound
on root execution risk (open subtrees count zero). Candidates whose risk
lower bound already exceeds the chance constraint are pruned, which is
sound because expanding a policy can only add risk. The first complete
policy popped is therefore an exact optimum among policies whose
execution risk meets the bound, matching the exhaustive oracle
brute_force_policy on any instance it can enumerate.

Execution risk follows the standard recursion

    er(b) = risk(b, a) + (1 - risk(b, a)) * sum_o P(o) * er(child_o)

with leaves at zero, enforced at the root (mission mode) or per decision
(per_epoch mode).

Models are duck-typed and must provide:

    actions(belief)            -> action handles with an `id` attribute
    reward(belief, action)     -> float
    risk(belief, action)       -> probability of violation this epoch
    transition(belief, action) -> list of (Observation, prob, child belief)
    max_step_reward(belief)    -> admissible bound on any one-epoch reward

The concrete driving model at the bottom of this module wires the
maneuver catalog, the intent library, and the collision kernel into that
interface.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Gaussian2, VehicleState, wrap_angle
from .errors import (
    IncompletePolicyError,
    InstanceTooLargeError,
    InvalidInputError,
    NoActionError,
)
from .intent import AgentPrediction, ManeuverPosterior, predict_agent
from .pft import ManeuverLibrary, transform_pft
from .risk import mixture_risk
from .roads import RoadMap, project_onto_polyline

RISK_SLACK = 1e-12  # feasibility comparator: er <= delta + RISK_SLACK


# ---------------------------------------------------------------------------
# Belief and policy types.

@dataclass(frozen=True)
class AgentBelief:
    """Per-agent maneuver posterior plus its anchoring."""

    posterior: ManeuverPosterior
    anchor: VehicleState
    elapsed_steps: int

    def __post_init__(self):
        if self.elapsed_steps < 0:
            raise InvalidInputError("elapsed_steps must be >= 0")


@dataclass(frozen=True, eq=False)
class BeliefNode:
    """Ego distribution, per-agent posteriors, and the decision epoch."""

    ego: Gaussian2
    speed: float
    heading: float
    agents: dict
    epoch: int = 0
    depth: int = 0

    def __post_init__(self):
        if self.epoch < 0 or self.depth < 0:
            raise InvalidInputError("epoch and depth must be >= 0")

    @property
    def ego_state(self) -> VehicleState:
        return VehicleState(self.ego.mean[0], self.ego.mean[1], self.heading, self.speed)

    def sorted_agents(self):
        return sorted(self.agents.items())


@dataclass(frozen=True)
class ChanceConstraint:
    delta: float
    horizon_epochs: int
    mode: str = "mission"  # or "per_epoch"

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise InvalidInputError("delta must lie in [0, 1]")
        if self.mode not in ("mission", "per_epoch"):
            raise InvalidInputError(f"unknown chance constraint mode {self.mode!r}")


@dataclass(frozen=True)
class Observation:
    """Per-agent maneuver label assignment (possibly empty)."""

    labels: tuple  # sorted (agent_id, maneuver_id) pairs

    def __init__(self, labels):
        object.__setattr__(self, "labels", tuple(sorted(labels)))

    @property
    def key(self):
        return self.labels


@dataclass(eq=False)
class PolicyNode:
    belief: BeliefNode
    action_id: str | None
    children: dict  # Observation.key -> PolicyNode
    value: float
    exec_risk: float

    @property
    def is_leaf(self) -> bool:
        return self.action_id is None


@dataclass(eq=False)
class Policy:
    root: PolicyNode
    value: float
    exec_risk: float

    def action_at_root(self) -> str | None:
        return self.root.action_id


@dataclass(eq=False)
class PlanResult:
    feasible: bool
    policy: Policy | None
    expanded_nodes: int
    root_action_risks: dict


# ---------------------------------------------------------------------------
# Explicit graph bookkeeping.

@dataclass(eq=False)
class _ActionExpansion:
    action: object
    reward: float
    risk: float
    children: list  # (Observation, prob, _GraphNode)


@dataclass(eq=False)
class _GraphNode:
    uid: int
    belief: BeliefNode
    depth: int
    expansion: dict | None = None  # action id -> _ActionExpansion


class _Explicit:
    """Lazily expanded belief tree shared by all search candidates."""

    def __init__(self, model, horizon):
        self.model = model
        self.horizon = horizon
        self.counter = itertools.count()
        self.expanded = 0

    def fresh(self, belief, depth) -> _GraphNode:
        return _GraphNode(next(self.counter), belief, depth)

    def is_terminal(self, node) -> bool:
        return node.depth >= self.horizon

    def expand(self, node: _GraphNode) -> dict:
        if node.expansion is not None:
            return node.expansion
        actions = sorted(self.model.actions(node.belief), key=lambda a: a.id)
        if not actions:
            raise NoActionError(f"no actions available at depth {node.depth}")
        expansion = {}
        for action in actions:
            branches = self.model.transition(node.belief, action)
            total = sum(p for _, p, _ in branches)
            if abs(total - 1.0) > 1e-9:
                raise InvalidInputError(f"branch probabilities sum to {total}, not 1")
            children = [
                (obs, p, self.fresh(child, node.depth + 1)) for obs, p, child in branches
            ]
            expansion[action.id] = _ActionExpansion(
                action=action,
                reward=float(self.model.reward(node.belief, action)),
                risk=float(self.model.risk(node.belief, action)),
                children=children,
            )
        node.expansion = expansion
        self.expanded += 1
        return expansion


@dataclass(eq=False)
class _Candidate:
    assignment: dict        # node uid -> action id
    nodes: dict             # node uid -> _GraphNode (assigned ones)
    open_entries: tuple     # (node, reach_prob, safe_reach_weight)
    value_bound: float      # optimistic value (f)
    risk_lb: float          # execution risk lower bound at the root


def rao_star(model, b0: BeliefNode, cc: ChanceConstraint) -> PlanResult:
    """Best-first policy search under a chance constraint.

    Returns the maximum-expected-reward policy whose execution risk meets
    the constraint, or an infeasible verdict when every candidate is
    pruned. Ties in expected value are broken toward lexicographically
    earlier action ids through deterministic expansion order.
    """
    if cc.horizon_epochs < 1:
        raise InvalidInputError("horizon must be >= 1 epoch")
    explicit = _Explicit(model, cc.horizon_epochs)
    r_max = float(model.max_step_reward(b0))

    def heuristic(node: _GraphNode) -> float:
        return r_max * (cc.horizon_epochs - node.depth)

    root = explicit.fresh(b0, 0)
    start = _Candidate(
        assignment={}, nodes={}, open_entries=((root, 1.0, 1.0),),
        value_bound=heuristic(root), risk_lb=0.0,
    )
    heap = []
    seq = itertools.count()
    heapq.heappush(heap, (-start.value_bound, next(seq), start))

    while heap:
        neg_f, _, cand = heapq.heappop(heap)
        if not cand.open_entries:
            policy = _build_policy(explicit, cand, root)
            return PlanResult(True, policy, explicit.expanded,
                              _root_risks(explicit, root))
        # Expand the open node with the highest optimistic value in this
        # best partial policy (ties: higher reach probability, older node).
        entry = max(
            cand.open_entries,
            key=lambda e: (heuristic(e[0]), e[1], -e[0].uid),
        )
        node, reach_p, safe_w = entry
        rest = tuple(e for e in cand.open_entries if e[0] is not node)
        expansion = explicit.expand(node)
        for action_id in sorted(expansion):
            exp = expansion[action_id]
            if cc.mode == "per_epoch" and exp.risk > cc.delta + RISK_SLACK:
                continue
            risk_lb = cand.risk_lb + safe_w * exp.risk
            if cc.mode == "mission" and risk_lb > cc.delta + RISK_SLACK:
                continue  # risk pruning: lower bound already busts the budget
            new_open = list(rest)
            optimistic = exp.reward
            for obs, p, child in exp.children:
                if explicit.is_terminal(child):
                    continue
                optimistic += p * heuristic(child)
                new_open.append((child, reach_p * p, safe_w * (1.0 - exp.risk) * p))
            value_bound = cand.value_bound + reach_p * (optimistic - heuristic(node))
            assignment = dict(cand.assignment)
            assignment[node.uid] = action_id
            nodes = dict(cand.nodes)
            nodes[node.uid] = node
            successor = _Candidate(assignment, nodes, tuple(new_open), value_bound, risk_lb)
            heapq.heappush(heap, (-value_bound, next(seq), successor))
    return PlanResult(False, None, explicit.expanded, _root_risks(explicit, root))


def _root_risks(explicit: _Explicit, root: _GraphNode) -> dict:
    if root.expansion is None:
        return {}
    return {aid: exp.risk for aid, exp in root.expansion.items()}


def _build_policy(explicit: _Explicit, cand: _Candidate, root: _GraphNode) -> Policy:
    def build(node: _GraphNode) -> PolicyNode:
        if explicit.is_terminal(node):
            return PolicyNode(node.belief, None, {}, 0.0, 0.0)
        action_id = cand.assignment[node.uid]
        exp = node.expansion[action_id]
        children = {}
        value = exp.reward
        er = 0.0
        for obs, p, child in exp.children:
            child_policy = build(child)
            children[obs.key] = child_policy
            value += p * child_policy.value
            er += p * child_policy.exec_risk
        er = exp.risk + (1.0 - exp.risk) * er
        return PolicyNode(node.belief, action_id, children, value, er)

    root_policy = build(root)
    return Policy(root_policy, root_policy.value, root_policy.exec_risk)


def brute_force_policy(model, b0: BeliefNode, cc: ChanceConstraint,
                       guard: int = 1_000_000) -> PlanResult:
    """Exhaustive depth-limited policy enumeration (verification oracle).

    Enumerates every closed policy, evaluates value and execution risk by
    exact recursion, and returns the feasible maximum with ties broken by
    the lexicographically smallest action-id assignment in preorder.
    """
    if cc.horizon_epochs < 1:
        raise InvalidInputError("horizon must be >= 1 epoch")
    explicit = _Explicit(model, cc.horizon_epochs)
    root = explicit.fresh(b0, 0)

    def count(node) -> int:
        if explicit.is_terminal(node):
            return 1
        total = 0
        for exp in explicit.expand(node).values():
            prod = 1
            for _, _, child in exp.children:
                prod *= count(child)
                if prod > guard:
                    raise InstanceTooLargeError("policy space exceeds enumeration guard")
            total += prod
            if total > guard:
                raise InstanceTooLargeError("policy space exceeds enumeration guard")
        return total

    count(root)

    def enumerate_policies(node):
        if explicit.is_terminal(node):
            return [(PolicyNode(node.belief, None, {}, 0.0, 0.0), (), 0.0)]
        out = []
        for action_id in sorted(node.expansion):
            exp = node.expansion[action_id]
            child_options = [enumerate_policies(child) for _, _, child in exp.children]
            for combo in itertools.product(*child_options):
                children = {}
                value = exp.reward
                er_tail = 0.0
                worst_immediate = exp.risk
                tie_key = [action_id]
                for (obs, p, _), (child_policy, child_key, child_worst) in zip(exp.children, combo):
                    children[obs.key] = child_policy
                    value += p * child_policy.value
                    er_tail += p * child_policy.exec_risk
                    worst_immediate = max(worst_immediate, child_worst)
                    tie_key.extend(child_key)
                er = exp.risk + (1.0 - exp.risk) * er_tail
                out.append((PolicyNode(node.belief, action_id, children, value, er),
                            tuple(tie_key), worst_immediate))
        return out

    best = None
    for policy_node, tie_key, worst_immediate in enumerate_policies(root):
        if cc.mode == "mission" and policy_node.exec_risk > cc.delta + RISK_SLACK:
            continue
        if cc.mode == "per_epoch" and worst_immediate > cc.delta + RISK_SLACK:
            continue
        key = (-policy_node.value, tie_key)
        if best is None or key < best[0]:
            best = (key, policy_node)
    if best is None:
        return PlanResult(False, None, explicit.expanded, _root_risks(explicit, root))
    policy_node = best[1]
    return PlanResult(
        True,
        Policy(policy_node, policy_node.value, policy_node.exec_risk),
        explicit.expanded,
        _root_risks(explicit, root),
    )


def evaluate_policy(model, policy: Policy, b0: BeliefNode) -> tuple[float, float]:
    """Exact recursive (value, execution risk) of a closed policy.

    Recomputes transitions from the model rather than trusting search
    annotations; raises IncompletePolicyError at any reachable node that
    lacks an action or an observation branch.
    """

    def walk(pnode: PolicyNode, belief: BeliefNode, depth: int) -> tuple[float, float]:
        if pnode.is_leaf:
            return 0.0, 0.0
        actions = {a.id: a for a in model.actions(belief)}
        if pnode.action_id not in actions:
            raise IncompletePolicyError(f"action {pnode.action_id!r} unavailable at depth {depth}")
        action = actions[pnode.action_id]
        reward = float(model.reward(belief, action))
        risk = float(model.risk(belief, action))
        value = reward
        er_tail = 0.0
        for obs, p, child_belief in model.transition(belief, action):
            child = pnode.children.get(obs.key)
            if child is None:
                raise IncompletePolicyError(f"missing branch for observation {obs.key}")
            v, er = walk(child, child_belief, depth + 1)
            value += p * v
            er_tail += p * er
        return value, risk + (1.0 - risk) * er_tail

    return walk(policy.root, b0, 0)


# ---------------------------------------------------------------------------
# Driving model: catalog + intent + collision kernel behind the interface.

OBSERVATION_TOP_K = 2
LABEL_DIFFUSION = 0.05


def collapse_and_diffuse(library: ManeuverLibrary, observed: str,
                         epsilon: float = LABEL_DIFFUSION) -> ManeuverPosterior:
    """Point mass on the observed label softened by a uniform error kernel."""
    ids = library.ids
    if len(ids) == 1:
        return ManeuverPosterior({observed: 1.0})
    spread = epsilon / (len(ids) - 1)
    probs = {mid: (1.0 - epsilon if mid == observed else spread) for mid in ids}
    return ManeuverPosterior(probs)


def _advance_agent(library: ManeuverLibrary, ab: AgentBelief, observed: str,
                   duration: int, epsilon: float) -> AgentBelief:
    posterior = collapse_and_diffuse(library, observed, epsilon)
    tube = library.entries[observed]
    elapsed = ab.elapsed_steps + duration
    if elapsed < len(tube):
        return AgentBelief(posterior, ab.anchor, elapsed)
    # Maneuver completed: re-anchor at the observed tube's endpoint.
    world = transform_pft(tube, ab.anchor)
    end = world.means[-1]
    if len(world) >= 2:
        d = world.means[-1] - world.means[-2]
        heading = math.atan2(d[1], d[0]) if (abs(d[0]) + abs(d[1])) > 1e-12 else ab.anchor.heading
    else:
        heading = ab.anchor.heading
    anchor = VehicleState(end[0], end[1], wrap_angle(heading),
                          max(0.0, float(world.mean_speed[-1])))
    return AgentBelief(posterior, anchor, 0)


def belief_transition(b: BeliefNode, a, model) -> list:
    """Observation-indexed children of (belief, maneuver).

    The ego distribution advances to the endpoint Gaussian of the
    maneuver's tube. Each agent contributes its top-k posterior labels
    (renormalized) as observation branches; the joint observation set is
    the cross product and child posteriors collapse onto the observed
    label softened by the classification-noise kernel.
    """
    actions = {act.id for act in model.actions(b)}
    if not actions:
        raise NoActionError("empty maneuver catalog")
    if a.id not in actions:
        raise InvalidInputError(f"action {a.id!r} not in the catalog at this belief")
    tube = a.tube
    child_ego = Gaussian2(tube.means[-1], tube.covs[-1])
    per_agent = []
    for agent_id, ab in b.sorted_agents():
        retained = ab.posterior.top(model.obs_top_k)
        mass = sum(ab.posterior.probs[mid] for mid in retained)
        branches = []
        for mid in retained:
            p = ab.posterior.probs[mid] / mass if mass > 0 else 1.0 / len(retained)
            child_ab = _advance_agent(model.library, ab, mid, a.duration_steps,
                                      model.label_epsilon)
            branches.append((mid, p, child_ab))
        per_agent.append((agent_id, branches))

    out = []
    if not per_agent:
        child = BeliefNode(child_ego, a.end_state.speed, a.end_state.heading,
                           {}, b.epoch + 1, b.depth + 1)
        return [(Observation(()), 1.0, child)]
    for combo in itertools.product(*(branches for _, branches in per_agent)):
        prob = 1.0
        labels = []
        agents = {}
        for (agent_id, _), (mid, p, child_ab) in zip(per_agent, combo):
            prob *= p
            labels.append((agent_id, mid))
            agents[agent_id] = child_ab
        child = BeliefNode(child_ego, a.end_state.speed, a.end_state.heading,
                           agents, b.epoch + 1, b.depth + 1)
        out.append((Observation(labels), prob, child))
    return out


def action_risk(b: BeliefNode, a, model) -> float:
    """Collision probability of executing one maneuver from a belief.

    Per agent, the maneuver-horizon slice of the posterior-weighted tube
    mixture meets the ego tube in the collision kernel; distinct agents
    combine as independent failure events.
    """
    ego_tube = a.tube
    survive = 1.0
    for agent_id, ab in b.sorted_agents():
        horizon = min(ab.elapsed_steps + a.duration_steps, model.library.min_length)
        if horizon <= ab.elapsed_steps:
            continue
        prediction = predict_agent(model.library, ab.posterior, ab.anchor, horizon)
        if ab.elapsed_steps > 0:
            prediction = AgentPrediction([
                (w, t.sliced(ab.elapsed_steps, horizon)) for w, t in prediction.components
            ])
        risk = mixture_risk(ego_tube, prediction, model.ego_radius,
                            model.agent_radius(agent_id), model.aggregation)
        survive *= 1.0 - min(1.0, risk)
    return 1.0 - survive


class DrivingPlannerModel:
    """Planner model for one decision epoch of the driving stack."""

    def __init__(
        self,
        catalog_provider,
        library: ManeuverLibrary,
        route_polyline: np.ndarray,
        road_map: RoadMap | None = None,
        ego_radius: float = 0.9,
        agent_radii: dict | None = None,
        default_agent_radius: float = 1.0,
        w_progress: float = 1.0,
        w_time: float = 0.1,
        w_lateral: float = 0.2,
        obs_top_k: int = OBSERVATION_TOP_K,
        label_epsilon: float = LABEL_DIFFUSION,
        aggregation: str = "independent",
        dt: float = 0.1,
    ):
        self.catalog_provider = catalog_provider
        self.library = library
        self.route = np.asarray(route_polyline, dtype=float)
        self.road_map = road_map
        self.ego_radius = ego_radius
        self.agent_radii = dict(agent_radii or {})
        self.default_agent_radius = default_agent_radius
        self.w_progress = w_progress
        self.w_time = w_time
        self.w_lateral = w_lateral
        self.obs_top_k = obs_top_k
        self.label_epsilon = label_epsilon
        self.aggregation = aggregation
        self.dt = dt

    def agent_radius(self, agent_id: str) -> float:
        return self.agent_radii.get(agent_id, self.default_agent_radius)

    def route_progress(self, p) -> float:
        s, _ = project_onto_polyline(self.route, p)
        return s

    def actions(self, b: BeliefNode):
        return self.catalog_provider.catalog(b.ego_state)

    def reward(self, b: BeliefNode, a) -> float:
        gained = self.route_progress(a.end_state.position) - self.route_progress(b.ego.mean)
        duration = a.duration_steps * self.dt
        return (self.w_progress * gained - self.w_time * duration
                - self.w_lateral * abs(a.lateral_offset))

    def risk(self, b: BeliefNode, a) -> float:
        return action_risk(b, a, self)

    def transition(self, b: BeliefNode, a):
        return belief_transition(b, a, self)

    def max_step_reward(self, b0: BeliefNode) -> float:
        v_bound = b0.speed
        if self.road_map is not None:
            v_bound = max(v_bound, self.road_map.max_speed_limit)
        duration = max(s.duration_steps for s in self.catalog_provider.specs) * self.dt
        return self.w_progress * v_bound * duration - self.w_time * duration
