"""Bayesian maneuver recognition and probabilistic agent prediction.

The posterior over library maneuvers is recomputed from the full observed
prefix at every call (no recursive filtering), in log space with a
log-sum-exp normalization. Predictions anchor each library tube at the
agent's maneuver-start pose and weight it by the posterior, dropping
negligible components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import VehicleState
from .errors import InvalidInputError
from .pft import PFT, ManeuverLibrary, pft_loglik, transform_pft

COMPONENT_PRUNE_THRESHOLD = 1e-4


@dataclass(frozen=True)
class ManeuverPosterior:
    """Normalized probabilities over maneuver ids.

    `degenerate` marks the fallback case where no hypothesis explained the
    evidence and the prior was returned unchanged.
    """

    probs: dict
    degenerate: bool = False

    def __post_init__(self):
        if not self.probs:
            raise InvalidInputError("posterior must be non-empty")
        total = sum(self.probs.values())
        if any(p < 0 for p in self.probs.values()) or abs(total - 1.0) > 1e-9:
            raise InvalidInputError("posterior must be a probability vector")

    def top(self, k: int):
        """The k most probable ids, ties broken lexicographically."""
        ranked = sorted(self.probs.items(), key=lambda kv: (-kv[1], kv[0]))
        return [mid for mid, _ in ranked[:k]]

    @property
    def argmax(self) -> str:
        return self.top(1)[0]


@dataclass(frozen=True)
class AgentPrediction:
    """Mixture of world-frame tubes: list of (weight, PFT)."""

    components: tuple

    def __init__(self, components):
        components = tuple((float(w), t) for w, t in components)
        if not components:
            raise InvalidInputError("prediction needs at least one component")
        if abs(sum(w for w, _ in components) - 1.0) > 1e-9:
            raise InvalidInputError("prediction weights must sum to 1")
        lengths = {len(t) for _, t in components}
        dts = {t.dt for _, t in components}
        if len(lengths) != 1 or len(dts) != 1:
            raise InvalidInputError("prediction components must share dt and length")
        object.__setattr__(self, "components", components)


def normalize_log_weights(log_weights: dict) -> dict | None:
    """exp-normalize via log-sum-exp; None when all weights are -inf."""
    vals = np.array(list(log_weights.values()), dtype=float)
    peak = vals.max()
    if not np.isfinite(peak):
        return None
    shifted = np.exp(vals - peak)
    total = shifted.sum()
    return {mid: float(w / total) for mid, w in zip(log_weights, shifted)}


def classify_maneuver(
    library: ManeuverLibrary,
    prefix,
    obs_noise: float,
) -> ManeuverPosterior:
    """Posterior over maneuvers given observed agent-start-frame positions.

    probs_k is proportional to prior_k * exp(loglik_k). When every
    hypothesis has zero likelihood the prior is returned with the
    degenerate flag set.
    """
    prefix = np.asarray(prefix, dtype=float).reshape(-1, 2)
    if prefix.shape[0] > library.min_length:
        raise InvalidInputError(
            f"prefix length {prefix.shape[0]} exceeds shortest tube {library.min_length}"
        )
    log_post = {}
    for mid in library.ids:
        prior = library.prior[mid]
        if prior <= 0.0:
            log_post[mid] = -math.inf
            continue
        log_post[mid] = math.log(prior) + pft_loglik(library.entries[mid], prefix, obs_noise)
    probs = normalize_log_weights(log_post)
    if probs is None:
        return ManeuverPosterior(dict(library.prior), degenerate=True)
    return ManeuverPosterior(probs)


def predict_agent(
    library: ManeuverLibrary,
    posterior: ManeuverPosterior,
    anchor: VehicleState,
    horizon_steps: int,
) -> AgentPrediction:
    """Posterior-weighted mixture of library tubes anchored at `anchor`.

    Components lighter than 1e-4 are dropped and the rest renormalized.
    """
    if horizon_steps < 1 or horizon_steps > library.min_length:
        raise InvalidInputError(
            f"horizon {horizon_steps} outside (0, {library.min_length}]"
        )
    kept = [
        (posterior.probs[mid], mid)
        for mid in library.ids
        if posterior.probs.get(mid, 0.0) >= COMPONENT_PRUNE_THRESHOLD
    ]
    if not kept:
        # Degenerate pruning (near-uniform tiny masses); keep the argmax.
        best = posterior.argmax
        kept = [(posterior.probs[best], best)]
    total = sum(w for w, _ in kept)
    components = [
        (w / total, transform_pft(library.entries[mid], anchor).truncated(horizon_steps))
        for w, mid in kept
    ]
    return AgentPrediction(components)
