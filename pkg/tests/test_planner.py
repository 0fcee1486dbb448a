import itertools
import math
from dataclasses import dataclass

import numpy as np
import pytest

from riskstack.core import Gaussian2, NoiseModel, VehicleState
from riskstack.errors import (
    IncompletePolicyError,
    InstanceTooLargeError,
    InvalidInputError,
)
from riskstack.intent import ManeuverPosterior
from riskstack.maneuvers import CatalogProvider, ManeuverSpec
from riskstack.pft import PFT, ManeuverLibrary
from riskstack.planner import (
    AgentBelief,
    BeliefNode,
    ChanceConstraint,
    DrivingPlannerModel,
    Observation,
    action_risk,
    belief_transition,
    brute_force_policy,
    collapse_and_diffuse,
    evaluate_policy,
    rao_star,
)
from riskstack.risk import mixture_risk
from riskstack.intent import predict_agent


@dataclass(frozen=True)
class Act:
    id: str


class TabularModel:
    """Dict-driven test model: node key -> action id -> outcome spec."""

    def __init__(self, table):
        self.table = table

    def actions(self, key):
        return [Act(a) for a in sorted(self.table[key])]

    def reward(self, key, act):
        return self.table[key][act.id]["reward"]

    def risk(self, key, act):
        return self.table[key][act.id]["risk"]

    def transition(self, key, act):
        return [
            (Observation(((("obs", label)),)), p, child)
            for label, p, child in self.table[key][act.id]["branches"]
        ]

    def max_step_reward(self, key):
        return max(
            spec["reward"] for node in self.table.values() for spec in node.values()
        )


def chain_model(rewards, risks):
    """Single action, single observation branch, depth = len(rewards)."""
    table = {}
    for d, (r, q) in enumerate(zip(rewards, risks)):
        table[f"n{d}"] = {"go": {"reward": r, "risk": q,
                                 "branches": [("only", 1.0, f"n{d + 1}")]}}
    table[f"n{len(rewards)}"] = {}
    return TabularModel(table)


def test_chain_value_and_exec_risk():
    rewards, risks = [1.0, 2.0, 3.0], [0.1, 0.2, 0.05]
    model = chain_model(rewards, risks)
    cc = ChanceConstraint(1.0, 3)
    result = rao_star(model, "n0", cc)
    assert result.feasible
    assert result.policy.value == pytest.approx(6.0)
    expected_er = 1 - (1 - 0.1) * (1 - 0.2) * (1 - 0.05)
    assert result.policy.exec_risk == pytest.approx(expected_er, abs=1e-12)
    v, er = evaluate_policy(model, result.policy, "n0")
    assert v == pytest.approx(result.policy.value, abs=1e-9)
    assert er == pytest.approx(result.policy.exec_risk, abs=1e-9)


def test_delta_zero_with_risky_actions_infeasible():
    model = chain_model([1.0], [0.05])
    result = rao_star(model, "n0", ChanceConstraint(0.0, 1))
    assert not result.feasible
    assert result.policy is None
    assert result.root_action_risks == {"go": pytest.approx(0.05)}


def test_horizon_zero_rejected():
    with pytest.raises(InvalidInputError):
        rao_star(chain_model([1.0], [0.0]), "n0", ChanceConstraint(0.5, 0))


def random_instance(rng):
    depth = int(rng.integers(1, 4))
    n_actions = int(rng.integers(1, 4))
    table = {}

    def build(key, d):
        if d == depth:
            table[key] = {}
            return
        node = {}
        for ai in range(n_actions):
            n_obs = int(rng.integers(1, 3))
            raw = rng.uniform(0.2, 1.0, n_obs)
            probs = raw / raw.sum()
            branches = []
            for oi, p in enumerate(probs):
                child = f"{key}.{ai}.{oi}"
                branches.append((f"o{oi}", float(p), child))
                build(child, d + 1)
            risk = float(rng.choice([0.0, rng.uniform(0, 0.5)]))
            node[f"a{ai}"] = {
                "reward": float(rng.uniform(-1, 2)),
                "risk": risk,
                "branches": branches,
            }
        table[key] = node

    build("root", 0)
    delta = float(rng.choice([0.0, 0.02, 0.1, 0.3, 1.0]))
    return TabularModel(table), ChanceConstraint(delta, depth)


def test_solver_matches_oracle_on_random_instances():
    rng = np.random.default_rng(12345)
    verdict_counts = {True: 0, False: 0}
    for _ in range(60):
        model, cc = random_instance(rng)
        fast = rao_star(model, "root", cc)
        slow = brute_force_policy(model, "root", cc)
        assert fast.feasible == slow.feasible
        verdict_counts[fast.feasible] += 1
        if fast.feasible:
            assert fast.policy.value == pytest.approx(slow.policy.value, abs=1e-9)
            # Soundness: recomputed exec risk meets the bound.
            _, er = evaluate_policy(model, fast.policy, "root")
            assert er <= cc.delta + 1e-9
    assert verdict_counts[True] > 10
    assert verdict_counts[False] > 3


def test_delta_one_equals_unconstrained_optimum():
    rng = np.random.default_rng(5)
    for _ in range(10):
        model, _ = random_instance(rng)
        depth = 0
        key = "root"
        while model.table[key]:
            key = model.table[key][sorted(model.table[key])[0]]["branches"][0][2]
            depth += 1
        free = rao_star(model, "root", ChanceConstraint(1.0, depth))
        oracle = brute_force_policy(model, "root", ChanceConstraint(1.0, depth))
        assert free.feasible and oracle.feasible
        assert free.policy.value == pytest.approx(oracle.policy.value, abs=1e-9)


def test_value_monotone_in_delta():
    rng = np.random.default_rng(77)
    for _ in range(20):
        model, cc = random_instance(rng)
        values = []
        for delta in (0.001, 0.05, 0.3, 1.0):
            res = rao_star(model, "root", ChanceConstraint(delta, cc.horizon_epochs))
            values.append(res.policy.value if res.feasible else -math.inf)
        for lo, hi in zip(values, values[1:]):
            assert lo <= hi + 1e-9


def test_heuristic_bound_admissible_at_root():
    rng = np.random.default_rng(9)
    for _ in range(20):
        model, cc = random_instance(rng)
        res = brute_force_policy(model, "root", ChanceConstraint(1.0, cc.horizon_epochs))
        bound = model.max_step_reward("root") * cc.horizon_epochs
        assert bound >= res.policy.value - 1e-9


def test_branch_probabilities_must_sum_to_one():
    table = {
        "root": {"a": {"reward": 1.0, "risk": 0.0,
                       "branches": [("x", 0.5, "l"), ("y", 0.4, "r")]}},
        "l": {}, "r": {},
    }
    with pytest.raises(InvalidInputError):
        rao_star(TabularModel(table), "root", ChanceConstraint(1.0, 1))


def test_brute_force_guard():
    rng = np.random.default_rng(0)

    table = {}

    def build(key, d):
        if d == 6:
            table[key] = {}
            return
        node = {}
        for ai in range(3):
            branches = []
            for oi in range(2):
                child = f"{key}.{ai}.{oi}"
                branches.append((f"o{oi}", 0.5, child))
                build(child, d + 1)
            node[f"a{ai}"] = {"reward": 1.0, "risk": 0.0, "branches": branches}
        table[key] = node

    build("root", 0)
    with pytest.raises(InstanceTooLargeError):
        brute_force_policy(TabularModel(table), "root", ChanceConstraint(1.0, 6))


def test_evaluate_policy_matches_monte_carlo():
    rng = np.random.default_rng(3)
    model, _ = random_instance(rng)
    depth = 0
    key = "root"
    while model.table[key]:
        key = model.table[key][sorted(model.table[key])[0]]["branches"][0][2]
        depth += 1
    res = rao_star(model, "root", ChanceConstraint(1.0, depth))
    value, er = evaluate_policy(model, res.policy, "root")

    sim_rng = np.random.default_rng(99)
    n = 100000
    values = np.zeros(n)
    failures = np.zeros(n)
    for i in range(n):
        node, belief = res.policy.root, "root"
        total = 0.0
        failed = False
        while not node.is_leaf:
            spec = model.table[belief][node.action_id]
            total += spec["reward"]
            if not failed and sim_rng.random() < spec["risk"]:
                failed = True
            labels, probs, children = zip(*spec["branches"])
            idx = sim_rng.choice(len(probs), p=probs)
            node = node.children[Observation(((("obs", labels[idx])),)).key]
            belief = children[idx]
        values[i] = total
        failures[i] = failed
    se_v = values.std(ddof=1) / math.sqrt(n)
    se_f = max(failures.std(ddof=1) / math.sqrt(n), 1e-6)
    assert abs(values.mean() - value) < 3 * se_v + 1e-9
    assert abs(failures.mean() - er) < 3 * se_f


def test_evaluate_policy_open_node_rejected():
    model = chain_model([1.0, 1.0], [0.0, 0.0])
    res = rao_star(model, "n0", ChanceConstraint(1.0, 2))
    res.policy.root.children[next(iter(res.policy.root.children))].action_id = None
    broken_leaf = res.policy.root.children[next(iter(res.policy.root.children))]
    broken_leaf.children = {}
    v, er = evaluate_policy(model, res.policy, "n0")
    assert v == pytest.approx(1.0)  # treating the node as leaf loses the tail
    res2 = rao_star(model, "n0", ChanceConstraint(1.0, 2))
    res2.policy.root.children.clear()
    with pytest.raises(IncompletePolicyError):
        evaluate_policy(model, res2.policy, "n0")


# ---------------------------------------------------------------------------
# Driving-model semantics.

def make_library(T=10):
    def tube(dx, dy, speed):
        k = np.arange(1, T + 1)
        means = np.stack([dx * k, dy * k], axis=1)
        covs = np.repeat(0.05 * np.eye(2)[np.newaxis], T, axis=0)
        return PFT(0.1, means, covs, np.full(T, speed))

    return ManeuverLibrary(
        {"cruise": tube(1.0, 0.0, 10.0), "drift": tube(1.0, 0.5, 10.0)},
        {"cruise": 0.5, "drift": 0.5},
    )


def driving_model(agent_states=(), posteriors=(), library=None):
    library = library or make_library()
    provider = CatalogProvider(
        specs=(ManeuverSpec("keep", duration_steps=5),
               ManeuverSpec("slow", accel=-1.0, duration_steps=5)),
        road_map=None,
        noise=NoiseModel(0.0, 0.0),
        n_samples=50,
        base_seed=1,
        dt=0.1,
    )
    route = np.array([[0.0, 0.0], [500.0, 0.0]])
    model = DrivingPlannerModel(provider, library, route, ego_radius=0.9,
                                default_agent_radius=0.9, dt=0.1)
    agents = {}
    for i, (state, post) in enumerate(zip(agent_states, posteriors)):
        agents[f"agent{i}"] = AgentBelief(ManeuverPosterior(post), state, 0)
    belief = BeliefNode(Gaussian2([0, 0], 1e-6 * np.eye(2)), 10.0, 0.0, agents)
    return model, belief


def test_transition_no_agents_single_branch():
    model, belief = driving_model()
    action = {a.id: a for a in model.actions(belief)}["keep"]
    branches = belief_transition(belief, action, model)
    assert len(branches) == 1
    obs, p, child = branches[0]
    assert p == 1.0 and obs.key == ()
    assert child.depth == 1 and child.epoch == 1
    assert child.ego.mean[0] == pytest.approx(5.0)  # 10 m/s for 0.5 s


def test_transition_single_agent_posterior_read_off():
    model, belief = driving_model(
        agent_states=[VehicleState(30, 0, 0, 10)],
        posteriors=[{"cruise": 0.7, "drift": 0.3}],
    )
    action = {a.id: a for a in model.actions(belief)}["keep"]
    branches = belief_transition(belief, action, model)
    probs = sorted(p for _, p, _ in branches)
    assert probs == [pytest.approx(0.3), pytest.approx(0.7)]
    assert sum(p for _, p, _ in branches) == pytest.approx(1.0, abs=1e-9)
    for obs, p, child in branches:
        label = dict(obs.labels)["agent0"]
        post = child.agents["agent0"].posterior.probs
        assert post[label] == pytest.approx(0.95)
        other = "drift" if label == "cruise" else "cruise"
        assert post[other] == pytest.approx(0.05)
        assert child.agents["agent0"].elapsed_steps == 5


def test_transition_two_agents_cross_product():
    model, belief = driving_model(
        agent_states=[VehicleState(30, 0, 0, 10), VehicleState(50, 5, 0, 10)],
        posteriors=[{"cruise": 0.7, "drift": 0.3}, {"cruise": 0.6, "drift": 0.4}],
    )
    action = {a.id: a for a in model.actions(belief)}["keep"]
    branches = belief_transition(belief, action, model)
    probs = sorted((p for _, p, _ in branches), reverse=True)
    assert probs == [pytest.approx(x) for x in (0.42, 0.28, 0.18, 0.12)]


def test_transition_reanchors_after_maneuver_completes():
    model, belief0 = driving_model(
        agent_states=[VehicleState(30, 0, 0, 10)],
        posteriors=[{"cruise": 1.0, "drift": 0.0}],
    )
    action = {a.id: a for a in model.actions(belief0)}["keep"]
    b = belief0
    # Library tubes are 10 steps; after two 5-step actions the agent
    # re-anchors at the observed tube endpoint.
    b = belief_transition(b, action, model)[0][2]
    assert b.agents["agent0"].elapsed_steps == 5
    branches = [br for br in belief_transition(b, action, model)
                if dict(br[0].labels)["agent0"] == "cruise"]
    child = branches[0][2]
    ab = child.agents["agent0"]
    assert ab.elapsed_steps == 0
    assert ab.anchor.x == pytest.approx(40.0)  # 30 + 10 steps of 1 m
    assert ab.anchor.y == pytest.approx(0.0)


def test_action_risk_vacuous_and_far():
    model, belief = driving_model()
    action = model.actions(belief)[0]
    assert action_risk(belief, action, model) == 0.0

    model2, belief2 = driving_model(
        agent_states=[VehicleState(400, 200, 0, 10)],
        posteriors=[{"cruise": 1.0, "drift": 0.0}],
    )
    action2 = model2.actions(belief2)[0]
    assert action_risk(belief2, action2, model2) <= 1e-9


def test_action_risk_independent_aggregation_over_agents():
    states = [VehicleState(1.2, 0.3, 0, 10), VehicleState(2.0, -0.4, math.pi, 10)]
    posts = [{"cruise": 0.8, "drift": 0.2}, {"cruise": 0.5, "drift": 0.5}]
    model, belief = driving_model(agent_states=states, posteriors=posts)
    action = {a.id: a for a in model.actions(belief)}["keep"]

    singles = []
    for state, post in zip(states, posts):
        m, b = driving_model(agent_states=[state], posteriors=[post])
        a = {x.id: x for x in m.actions(b)}["keep"]
        singles.append(action_risk(b, a, m))
    combined = action_risk(belief, action, model)
    expected = 1 - (1 - singles[0]) * (1 - singles[1])
    assert combined == pytest.approx(expected, abs=1e-9)
    assert singles[0] > 0.01  # the geometry actually produces risk


def test_action_risk_audit_arithmetic():
    # Two independent per-agent risks of 0.1 and 0.2 combine to 0.28.
    assert 1 - (1 - 0.1) * (1 - 0.2) == pytest.approx(0.28)


def test_collapse_and_diffuse_kernel():
    lib = make_library()
    post = collapse_and_diffuse(lib, "cruise")
    assert post.probs == {"cruise": pytest.approx(0.95), "drift": pytest.approx(0.05)}
    single = ManeuverLibrary({"only": lib.entries["cruise"]}, {"only": 1.0})
    assert collapse_and_diffuse(single, "only").probs == {"only": 1.0}


def test_rao_star_on_driving_model_prefers_progress():
    model, belief = driving_model()
    result = rao_star(model, belief, ChanceConstraint(0.1, 2))
    assert result.feasible
    assert result.policy.action_at_root() == "keep"  # slow loses progress
    _, er = evaluate_policy(model, result.policy, belief)
    assert er <= 0.1 + 1e-9
