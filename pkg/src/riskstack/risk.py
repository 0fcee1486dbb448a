"""Collision probability between temporally aligned flow tubes.

The single-step kernel computes P(||D|| <= r) for the relative position
D ~ N(m, S) with S the sum of the two step covariances and r the sum of
the two disc footprints. After whitening (D = m + L Z with S = L L^T and
Z standard normal), the disc becomes an ellipse in z-space and the radial
part of the polar integral has a closed form, leaving a single periodic
angular quadrature that is refined until successive estimates agree to
1e-5:

    P = (1/2pi) * integral over phi of [exp(-lo^2/2) - exp(-hi^2/2)]

where [lo, hi] is the radial slice of the ellipse along direction phi.
Far-separated and fully-contained configurations short-circuit to 0 and 1
with error below 1e-10, well inside the 1e-4 kernel tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Gaussian2, min_eig_2x2
from .errors import AlignmentError, InvalidInputError
from .intent import AgentPrediction
from .pft import PFT

ANGLE_GRID_START = 64
ANGLE_GRID_MAX = 8192
REFINE_TOL = 1e-5
SHORTCUT_SIGMAS = 7.0  # tail mass below ~1e-11


@dataclass(frozen=True)
class RiskProfile:
    """Per-step collision probabilities and their aggregate."""

    per_step: tuple
    total: float

    def __post_init__(self):
        if any(not (0.0 <= p <= 1.0) for p in self.per_step):
            raise InvalidInputError("per-step probabilities must lie in [0, 1]")
        if not (0.0 <= self.total <= 1.0):
            raise InvalidInputError("total risk must lie in [0, 1]")


def aggregate_step_risks(per_step, aggregation: str = "independent") -> float:
    """Combine per-step collision probabilities into a trajectory risk."""
    per_step = list(per_step)
    if aggregation == "independent":
        survive = 1.0
        for p in per_step:
            survive *= 1.0 - p
        return 1.0 - survive
    if aggregation == "union_bound":
        return min(1.0, float(sum(per_step)))
    raise InvalidInputError(f"unknown aggregation {aggregation!r}")


def _disc_prob(m: np.ndarray, s: np.ndarray, r: float) -> float:
    """P(||D|| <= r), D ~ N(m, s); no input validation."""
    dist = float(np.hypot(m[0], m[1]))
    lam_max = max(float(np.linalg.eigvalsh(s)[1]), 1e-24)
    sigma = math.sqrt(lam_max)
    if dist - r > SHORTCUT_SIGMAS * sigma:
        return 0.0
    if r - dist > SHORTCUT_SIGMAS * sigma:
        return 1.0

    chol = np.linalg.cholesky(s + 1e-12 * np.eye(2))
    c = dist * dist - r * r
    estimate = None
    k = ANGLE_GRID_START
    while True:
        phi = (np.arange(k) + 0.5) * (2.0 * np.pi / k)
        u = np.stack([np.cos(phi), np.sin(phi)], axis=1)
        lu = u @ chol.T
        a = np.einsum("ij,ij->i", lu, lu)
        b = 2.0 * (lu @ m)
        disc = b * b - 4.0 * a * c
        hit = disc > 0.0
        sqrt_disc = np.sqrt(np.where(hit, disc, 0.0))
        lo = np.maximum((-b - sqrt_disc) / (2.0 * a), 0.0)
        hi = np.maximum((-b + sqrt_disc) / (2.0 * a), 0.0)
        contrib = np.where(hit, np.exp(-0.5 * lo * lo) - np.exp(-0.5 * hi * hi), 0.0)
        new_estimate = float(contrib.mean())
        if estimate is not None and abs(new_estimate - estimate) < REFINE_TOL:
            estimate = new_estimate
            break
        estimate = new_estimate
        if k >= ANGLE_GRID_MAX:
            break
        k *= 2
    return min(1.0, max(0.0, estimate))


def step_collision_prob(a: Gaussian2, b: Gaussian2, r: float) -> float:
    """Probability that two disc-footprint positions overlap at one step."""
    if not (r > 0.0 and math.isfinite(r)):
        raise InvalidInputError("combined radius must be positive")
    s = a.cov + b.cov
    if min_eig_2x2(s) < -1e-9:
        raise InvalidInputError("covariance sum must be PSD")
    return _disc_prob(a.mean - b.mean, s, r)


def pft_collision_risk(
    ego: PFT,
    agent: PFT,
    r_ego: float,
    r_agent: float,
    aggregation: str = "independent",
) -> RiskProfile:
    """Stepwise collision risk over the common prefix of two tubes."""
    if r_ego <= 0.0 or r_agent <= 0.0:
        raise InvalidInputError("footprint radii must be positive")
    if abs(ego.dt - agent.dt) > 1e-12:
        raise AlignmentError(f"tube steps differ: {ego.dt} vs {agent.dt}")
    n = min(len(ego), len(agent))
    r = r_ego + r_agent
    diffs = ego.means[:n] - agent.means[:n]
    dists = np.hypot(diffs[:, 0], diffs[:, 1])
    cov_sums = ego.covs[:n] + agent.covs[:n]
    # lam_max <= trace for PSD matrices: cheap vectorized far-step filter.
    sigma_bound = np.sqrt(np.trace(cov_sums, axis1=1, axis2=2))
    near = (dists - r) <= SHORTCUT_SIGMAS * sigma_bound
    per_step = np.zeros(n)
    for k in np.nonzero(near)[0]:
        per_step[k] = _disc_prob(diffs[k], cov_sums[k], r)
    total = aggregate_step_risks(per_step, aggregation)
    return RiskProfile(tuple(float(p) for p in per_step), float(total))


def mixture_risk(
    ego: PFT,
    prediction: AgentPrediction,
    r_ego: float,
    r_agent: float,
    aggregation: str = "independent",
) -> float:
    """Posterior-weighted collision risk against a mixture prediction."""
    return float(sum(
        w * pft_collision_risk(ego, tube, r_ego, r_agent, aggregation).total
        for w, tube in prediction.components
    ))
