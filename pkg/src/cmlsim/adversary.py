"""Strategic attack payloads.

The override attack crafts an update so that the victim's post-aggregation
mean lands exactly on a chosen target. Against a clipping receiver the
refined variant cancels the clipped honest contributions instead. The
dissensus payload is a fixed direction, built from the first epoch's
updates, that inflates the spread among neighbours and with it any
variance-derived acceptance radius.

All functions are pure; the attacker observes honest updates through an
immutable AdversaryView. When several senders are adversarial the required
mass is computed once and split equally, which preserves the override
identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aggregators import AggregatorSpec, multi_krum_aggregate, scc_clip
from .nn import Model

ATTACK_KINDS = ("none", "state_override", "state_override_scc", "dissensus")
BUDGET_POLICIES = ("exact", "fit_norm", "fit_acceptance")


class AttackError(ValueError):
    """Missing observations or malformed attack configuration."""


@dataclass(frozen=True)
class AttackSpec:
    """What the adversary does, towards which target, from which seats.

    ``budget`` bounds the payload so it survives the receiver's check:
    ``exact`` sends the raw mass, ``fit_norm`` rescales it into the norm
    ball of radius delta, ``fit_acceptance`` rescales it to the largest
    multiple the selection rule still accepts. A bounded payload achieves
    only partial progress per epoch; progress then accumulates across
    epochs.
    """

    kind: str = "none"
    target: np.ndarray | None = None
    adversary_ids: frozenset[int] = field(default_factory=frozenset)
    budget: str = "exact"

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}")
        if self.budget not in BUDGET_POLICIES:
            raise AttackError(f"unknown budget policy {self.budget!r}")
        if self.kind != "none" and not self.adversary_ids:
            raise AttackError("an active attack needs at least one adversary id")
        if self.target is not None:
            object.__setattr__(
                self, "target", np.asarray(self.target, dtype=np.float64)
            )


@dataclass(frozen=True)
class AdversaryView:
    """Honest updates observable this epoch, before the adversary sends."""

    visible_updates: dict[int, np.ndarray]
    victim_own_update: np.ndarray | None = None
    epoch: int = 0


def _visible_matrix(view: AdversaryView) -> np.ndarray:
    if not view.visible_updates:
        raise AttackError("adversary view contains no honest updates")
    return np.asarray(
        [np.asarray(view.visible_updates[k], dtype=np.float64) for k in sorted(view.visible_updates)]
    )


def state_override(
    view: AdversaryView, target: np.ndarray, n: int, n_adversaries: int = 1
) -> np.ndarray:
    """Craft the update that forces the mean of all n updates onto `target`.

    Requires every honest update to be visible (n - n_adversaries of
    them). The total mass is n*target - sum(honest); with several
    adversaries each sends an equal share.
    """
    if n_adversaries < 1:
        raise AttackError("need at least one adversary")
    mat = _visible_matrix(view)
    if mat.shape[0] != n - n_adversaries:
        raise AttackError(
            f"missing honest updates: saw {mat.shape[0]}, "
            f"expected {n - n_adversaries} for n={n}"
        )
    target = np.asarray(target, dtype=np.float64)
    mass = n * target - mat.sum(axis=0)
    return mass / n_adversaries


def state_override_scc(
    view: AdversaryView, delta: float, n_adversaries: int = 1
) -> np.ndarray:
    """Craft the update that cancels the victim's clipped honest inputs.

    The victim clips every received update into the delta-ball around its
    own update; the payload is the negative of the sum of those clipped
    deviations, so when the payload itself survives clipping the honest
    contributions cancel out of the victim's average.
    """
    if view.victim_own_update is None:
        raise AttackError("the clipping variant needs the victim's own update")
    own = np.asarray(view.victim_own_update, dtype=np.float64)
    if not view.visible_updates:
        return np.zeros_like(own)
    total = np.zeros_like(own)
    for k in sorted(view.visible_updates):
        clipped = scc_clip(view.visible_updates[k], own, delta)
        total += clipped - own
    return -total / n_adversaries


def dissensus(
    initial_updates: dict[int, np.ndarray], victim_id: int, n: int
) -> np.ndarray:
    """Fixed payload pushing the victim away from its first-epoch peers.

    Computes (1/n) * sum_j (theta_victim^0 - theta_j^0) over the recorded
    first-epoch updates of the other users; the same vector is sent every
    epoch thereafter.
    """
    if victim_id not in initial_updates:
        raise AttackError(f"victim {victim_id} missing from the first-epoch snapshot")
    if n < 1:
        raise AttackError("n must be positive")
    own = np.asarray(initial_updates[victim_id], dtype=np.float64)
    total = np.zeros_like(own)
    for j in sorted(initial_updates):
        if j == victim_id:
            continue
        total += own - np.asarray(initial_updates[j], dtype=np.float64)
    return total / n


def build_target(
    kind: str, model: Model, overrides: dict[int, float] | None = None
) -> np.ndarray:
    """Target parameter vector: the all-zero model, or the current model
    with a handful of coordinates replaced."""
    if kind == "all_zero":
        return np.zeros_like(model.params)
    if kind == "weight_override":
        target = model.params.copy()
        for idx, value in (overrides or {}).items():
            if not 0 <= int(idx) < target.size:
                raise AttackError(
                    f"override index {idx} out of range for {target.size} parameters"
                )
            target[int(idx)] = float(value)
        return target
    raise AttackError(f"unknown target kind {kind!r}")


def fit_norm_budget(payload: np.ndarray, delta: float) -> np.ndarray:
    """Rescale the payload into the norm ball of radius delta."""
    norm = float(np.linalg.norm(payload))
    if norm <= delta or norm == 0.0:
        return payload
    return payload * (delta / norm)


def fit_acceptance_budget(
    payload: np.ndarray,
    honest_updates: list[np.ndarray],
    spec: AggregatorSpec,
    n_adversaries: int,
    iterations: int = 24,
) -> np.ndarray:
    """Largest multiple of the payload the selection rule still accepts.

    Binary search over the scale factor: at each step the adversary
    simulates the receiver's multi-krum selection with its n_adversaries
    identical copies appended after the honest updates, and keeps the
    largest scale at which every copy is selected. Scale zero (send the
    zero update) is the fallback.
    """
    if spec.kind != "multi_krum":
        raise AttackError("acceptance fitting is defined for the multi_krum rule")

    def all_in(scale: float) -> bool:
        pool = [np.asarray(u, dtype=np.float64) for u in honest_updates]
        pool += [payload * scale] * n_adversaries
        outcome = multi_krum_aggregate(pool, spec)
        return all(outcome.accepted[len(honest_updates) :])

    if all_in(1.0):
        return payload
    lo, hi = 0.0, 1.0
    best = 0.0
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if all_in(mid):
            best = mid
            lo = mid
        else:
            hi = mid
    return payload * best
