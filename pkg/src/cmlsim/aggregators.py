"""Update evaluators and robust aggregation rules.

Two families are implemented. Distance-style rules score an update by how
far it sits from a reference point (cumulative-nearest-neighbour scoring
with selection, a fixed norm ball around zero, and clipping towards the
receiver's own update). Behaviour-style rules score an update by how the
model behaves after applying it (hinge-loss comparison against the current
model, and leave-one-out error-rate differences). Plain averaging is the
non-robust baseline.

Every rule returns an AggregationOutcome whose per-update fields are
aligned with the received order; ties are always broken by that order so
runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Dataset

EVALUATOR_KINDS = (
    "mean",
    "multi_krum",
    "scc",
    "rofl_norm",
    "rd_svm_hinge",
    "err_rejection",
)

DISTANCE_BASED = ("multi_krum", "scc", "rofl_norm")
BEHAVIOR_BASED = ("rd_svm_hinge", "err_rejection")


class AggregationError(ValueError):
    """Precondition violation (too few updates, bad threshold, ...)."""


@dataclass(frozen=True)
class AggregatorSpec:
    """Which evaluator to run and with what parameters.

    ``delta`` is the acceptance radius (or clip radius); ``delta_policy``
    selects a fixed value or the per-epoch neighbour-variance rule.
    ``f`` is the assumed number of Byzantine senders. ``eval_set_size``
    caps behaviour-evaluation batches.
    """

    kind: str
    delta: float = 1.0
    delta_policy: str = "fixed"
    f: int = 0
    eval_set_size: int = 256

    def __post_init__(self):
        if self.kind not in EVALUATOR_KINDS:
            raise AggregationError(f"unknown aggregator kind {self.kind!r}")
        if self.delta < 0:
            raise AggregationError("delta must be >= 0")
        if self.delta_policy not in ("fixed", "dynamic_variance"):
            raise AggregationError(f"unknown delta policy {self.delta_policy!r}")
        if self.f < 0:
            raise AggregationError("f must be >= 0")
        if self.eval_set_size < 1:
            raise AggregationError("eval_set_size must be positive")


@dataclass
class AggregationOutcome:
    aggregate: np.ndarray
    per_update_score: list[float]
    accepted: list[bool]
    clipped: list[bool] = field(default_factory=list)
    none_accepted: bool = False


def _as_matrix(updates: list[np.ndarray], what: str = "updates") -> np.ndarray:
    if not updates:
        raise AggregationError(f"need at least one update for {what}")
    mat = np.asarray([np.asarray(u, dtype=np.float64) for u in updates])
    if mat.ndim != 2:
        raise AggregationError(f"{what} must all be vectors of equal length")
    return mat


def mean_aggregate(updates: list[np.ndarray]) -> AggregationOutcome:
    """Plain arithmetic mean; accepts everything."""
    mat = _as_matrix(updates)
    n = mat.shape[0]
    return AggregationOutcome(
        aggregate=mat.mean(axis=0),
        per_update_score=[0.0] * n,
        accepted=[True] * n,
        clipped=[False] * n,
    )


def krum_score(theta: np.ndarray, others: list[np.ndarray], n: int, f: int) -> float:
    """Cumulative L2 distance from `theta` to its n-f-2 nearest peers.

    `theta` itself must not appear in `others`: including it would add a
    guaranteed zero term and distort the selection.
    """
    k = n - f - 2
    if k < 1:
        raise AggregationError(f"n - f - 2 must be >= 1, got n={n}, f={f}")
    if len(others) < k:
        raise AggregationError(
            f"need at least {k} peer updates for the score, got {len(others)}"
        )
    mat = _as_matrix(others, "peer updates")
    d = np.linalg.norm(mat - np.asarray(theta, dtype=np.float64), axis=1)
    return float(np.sort(d)[:k].sum())


def multi_krum_aggregate(updates: list[np.ndarray], spec: AggregatorSpec) -> AggregationOutcome:
    """Keep the n-f lowest-scoring updates and average them.

    Ties on the score boundary are resolved in favour of earlier updates.
    """
    mat = _as_matrix(updates)
    n = mat.shape[0]
    if n - spec.f - 2 < 1:
        raise AggregationError(f"multi-krum needs n - f - 2 >= 1, got n={n}, f={spec.f}")
    scores = []
    for i in range(n):
        others = [mat[j] for j in range(n) if j != i]
        scores.append(krum_score(mat[i], others, n, spec.f))
    keep = n - spec.f
    chosen = np.argsort(scores, kind="stable")[:keep]
    accepted = [False] * n
    for i in chosen:
        accepted[i] = True
    return AggregationOutcome(
        aggregate=mat[np.sort(chosen)].mean(axis=0),
        per_update_score=scores,
        accepted=accepted,
        clipped=[False] * n,
    )


def scc_clip(theta: np.ndarray, reference: np.ndarray, delta: float) -> np.ndarray:
    """Pull `theta` into the delta-ball around `reference`.

    Returns min(1, delta/||theta - reference||) * (theta - reference)
    + reference; inside the ball the update passes through unchanged.
    """
    if delta < 0:
        raise AggregationError("delta must be >= 0")
    theta = np.asarray(theta, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if theta.shape != reference.shape:
        raise AggregationError("update and reference must have equal lengths")
    dev = theta - reference
    dist = float(np.linalg.norm(dev))
    if dist <= delta:
        return theta
    return reference + (delta / dist) * dev


def scc_aggregate(
    updates: list[np.ndarray], own_update: np.ndarray, delta: float
) -> AggregationOutcome:
    """Clip every received update towards the receiver's own, then average.

    The receiver's own update always enters the average; nothing is ever
    dropped outright, only shortened. Scores are the pre-clip distances.
    """
    mat = _as_matrix(updates)
    own = np.asarray(own_update, dtype=np.float64)
    if mat.shape[1] != own.size:
        raise AggregationError("own update length does not match received updates")
    dists = np.linalg.norm(mat - own, axis=1)
    clipped_flags = [bool(d > delta) for d in dists]
    clipped = np.array([scc_clip(row, own, delta) for row in mat])
    total = np.vstack([clipped, own[None, :]])
    return AggregationOutcome(
        aggregate=total.mean(axis=0),
        per_update_score=[float(d) for d in dists],
        accepted=[True] * mat.shape[0],
        clipped=clipped_flags,
    )


def dynamic_delta(own_update: np.ndarray, neighbor_updates: list[np.ndarray]) -> float:
    """Root-mean-square distance from the own update to the neighbours'.

    This is the per-epoch, per-user clip radius under the
    ``dynamic_variance`` policy; every neighbour contributes, which is
    exactly what the dissensus attack exploits.
    """
    mat = _as_matrix(neighbor_updates, "neighbour updates")
    own = np.asarray(own_update, dtype=np.float64)
    d2 = np.sum((mat - own) ** 2, axis=1)
    return float(np.sqrt(d2.mean()))


def rofl_aggregate(updates: list[np.ndarray], spec: AggregatorSpec) -> AggregationOutcome:
    """Accept updates whose norm is at most delta, then average.

    The boundary counts as accepted. If nothing passes, the aggregate is
    the zero vector and ``none_accepted`` is set so the caller can log it.
    """
    if spec.delta <= 0:
        raise AggregationError("the norm bound must be positive")
    mat = _as_matrix(updates)
    norms = np.linalg.norm(mat, axis=1)
    accepted = [bool(v <= spec.delta) for v in norms]
    if any(accepted):
        aggregate = mat[np.asarray(accepted)].mean(axis=0)
        empty = False
    else:
        aggregate = np.zeros(mat.shape[1])
        empty = True
    return AggregationOutcome(
        aggregate=aggregate,
        per_update_score=[float(v) for v in norms],
        accepted=accepted,
        clipped=[False] * mat.shape[0],
        none_accepted=empty,
    )


def rd_svm_evaluate(
    candidate: np.ndarray, reference_model: nn.Model, eval_set: Dataset
) -> float:
    """Hinge-loss difference between a candidate model and the reference.

    The candidate vector is interpreted as full model weights for the
    reference's architecture. Positive values mean the candidate behaves
    worse on the evaluation set; the caller rejects when the result is
    greater than zero.
    """
    if len(eval_set) == 0:
        raise AggregationError("hinge evaluation needs a non-empty dataset")
    cand_model = reference_model.with_params(np.asarray(candidate, dtype=np.float64))
    cand = nn.mean_loss(cand_model, eval_set.inputs, eval_set.labels, "hinge")
    ref = nn.mean_loss(reference_model, eval_set.inputs, eval_set.labels, "hinge")
    return float(cand - ref)


def _apply_pool(
    current_model: nn.Model, pool: np.ndarray, update_kind: str
) -> nn.Model:
    combined = pool.mean(axis=0)
    if update_kind == "delta":
        return current_model.with_params(current_model.params + combined)
    return current_model.with_params(combined)


def err_scores(
    updates: list[np.ndarray],
    current_model: nn.Model,
    eval_set: Dataset,
    update_kind: str = "delta",
) -> list[float]:
    """Leave-one-out error-rate contribution of each update.

    score[k] = error(model with all updates) - error(model with all but k):
    positive means including update k makes the pooled model worse.
    """
    mat = _as_matrix(updates)
    if len(eval_set) == 0:
        raise AggregationError("error-rate evaluation needs a non-empty dataset")
    full = _apply_pool(current_model, mat, update_kind)
    err_full = nn.evaluate(full, eval_set.inputs, eval_set.labels, "error_rate")
    scores = []
    for k in range(mat.shape[0]):
        rest = np.delete(mat, k, axis=0)
        if rest.shape[0] == 0:
            base_err = nn.evaluate(
                current_model, eval_set.inputs, eval_set.labels, "error_rate"
            )
        else:
            base_err = nn.evaluate(
                _apply_pool(current_model, rest, update_kind),
                eval_set.inputs,
                eval_set.labels,
                "error_rate",
            )
        scores.append(float(err_full - base_err))
    return scores


def err_aggregate(
    updates: list[np.ndarray],
    current_model: nn.Model,
    eval_set: Dataset,
    spec: AggregatorSpec,
    update_kind: str = "delta",
) -> AggregationOutcome:
    """Reject the f updates that contribute most to the pooled error rate.

    Ranking is by score; equal scores keep received order, so within a
    tied group the earliest update is rejected first.
    """
    mat = _as_matrix(updates)
    n = mat.shape[0]
    if spec.f >= n:
        raise AggregationError(f"cannot reject f={spec.f} of only {n} updates")
    scores = err_scores(updates, current_model, eval_set, update_kind)
    reject = np.argsort([-s for s in scores], kind="stable")[: spec.f]
    accepted = [True] * n
    for k in reject:
        accepted[k] = False
    kept = mat[np.asarray(accepted)]
    if kept.shape[0]:
        aggregate = kept.mean(axis=0)
        empty = False
    else:
        aggregate = np.zeros(mat.shape[1])
        empty = True
    return AggregationOutcome(
        aggregate=aggregate,
        per_update_score=scores,
        accepted=accepted,
        clipped=[False] * n,
        none_accepted=empty,
    )
