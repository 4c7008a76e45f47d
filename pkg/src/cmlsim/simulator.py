"""Deterministic epoch-by-epoch collaborative training.

Each epoch runs the three protocol steps: every user trains locally and
produces an update (an additive delta or its full parameter vector,
depending on the configured exchange); adversaries observe the honest
updates and substitute crafted payloads; then every aggregation point
(the server in a star, every user in a complete graph) applies the
configured rule and advances its model.

A single seed fixes the entire run: model init, data partition, batch
order, and evaluation subsets all derive named streams from it, so traces
are bit-reproducible regardless of how the per-user work would be
scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import adversary as adv
from . import aggregators as agg
from . import nn
from .data import Dataset, Partition, partition_by_label, partition_fixed_sizes, partition_iid, seeded_subset
from .rng import stream

TOPOLOGIES = ("star", "complete")
UPDATE_KINDS = ("delta", "model")


class SimulationError(ValueError):
    """Invalid run configuration or mid-run precondition failure."""


@dataclass(frozen=True)
class Topology:
    kind: str
    n_users: int

    def __post_init__(self):
        if self.kind not in TOPOLOGIES:
            raise SimulationError(f"unknown topology {self.kind!r}")
        if self.n_users < 1:
            raise SimulationError("need at least one user")

    @property
    def server_present(self) -> bool:
        return self.kind == "star"


@dataclass
class UserState:
    id: int
    model: nn.Model
    optimizer: nn.OptimizerState
    inputs: np.ndarray
    labels: np.ndarray
    is_adversary: bool = False


@dataclass
class EpochTrace:
    epoch: int
    updates: dict[int, np.ndarray]
    outcomes: dict[str, agg.AggregationOutcome]
    metrics: dict[str, float]


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run; the seed makes it reproducible."""

    train: Dataset
    n_users: int
    topology: str = "star"
    n_adversaries: int = 0
    epochs: int = 1
    seed: int = 0
    update_kind: str = "delta"

    # model and optimizer
    layer_sizes: tuple[int, ...] = (784, 128, 64, 10)
    activation: str = "relu"
    output_head: str = "softmax_xent"
    init_scale: float = 1.0
    optimizer: str = "sgd"
    learning_rate: float = 0.1
    batch_size: int = 32
    local_passes: int = 1

    # aggregation
    aggregator: agg.AggregatorSpec = field(
        default_factory=lambda: agg.AggregatorSpec("mean")
    )

    # attack
    attack_kind: str = "none"
    target_kind: str = "all_zero"
    target_overrides: tuple[tuple[int, float], ...] = ()
    attack_budget: str = "exact"
    observation: str = "current"  # current-epoch honest updates, or previous-epoch estimates

    # data wiring
    val: Dataset | None = None
    partition: str = "iid"
    partition_sizes: tuple[int, ...] | None = None

    # bookkeeping
    eval_cap: int = 1000
    keep_updates: bool = False

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise SimulationError(f"unknown topology {self.topology!r}")
        if self.update_kind not in UPDATE_KINDS:
            raise SimulationError(f"unknown update kind {self.update_kind!r}")
        if self.attack_kind not in adv.ATTACK_KINDS:
            raise SimulationError(f"unknown attack kind {self.attack_kind!r}")
        if self.observation not in ("current", "previous"):
            raise SimulationError(f"unknown observation mode {self.observation!r}")
        if self.epochs < 0:
            raise SimulationError("epochs must be >= 0")
        if not 0 <= self.n_adversaries < self.n_users:
            raise SimulationError("adversary count must leave at least one honest user")
        if self.attack_kind != "none" and self.n_adversaries < 1:
            raise SimulationError(f"attack {self.attack_kind!r} needs adversaries")
        if self.aggregator.kind == "scc" and self.topology != "complete":
            raise SimulationError("self-centered clipping is peer-to-peer only")
        if self.attack_kind in ("state_override_scc", "dissensus") and self.topology != "complete":
            raise SimulationError(f"attack {self.attack_kind!r} needs the complete topology")

    @property
    def adversary_ids(self) -> tuple[int, ...]:
        return tuple(range(self.n_users - self.n_adversaries, self.n_users))

    @property
    def shape(self) -> nn.ModelShape:
        return nn.ModelShape(self.layer_sizes, self.activation, self.output_head)


@dataclass
class _RunContext:
    cfg: RunConfig
    target: np.ndarray | None
    server_eval: Dataset | None
    metric_val: Dataset | None
    prev_honest_sent: dict[int, np.ndarray] | None = None
    dissensus_snapshot: dict[int, np.ndarray] | None = None


def _build_partition(cfg: RunConfig) -> Partition:
    if cfg.partition == "iid":
        return partition_iid(cfg.train, cfg.n_users, cfg.seed)
    if cfg.partition == "by_label":
        return partition_by_label(cfg.train, cfg.n_users)
    if cfg.partition == "fixed_sizes":
        if cfg.partition_sizes is None or len(cfg.partition_sizes) != cfg.n_users:
            raise SimulationError("fixed_sizes partition needs one size per user")
        return partition_fixed_sizes(cfg.train, list(cfg.partition_sizes), cfg.seed)
    raise SimulationError(f"unknown partition scheme {cfg.partition!r}")


def init_states(cfg: RunConfig) -> list[UserState]:
    """Common public initial model, per-user data shards and optimizers."""
    shape = cfg.shape
    model = nn.init_model(shape, stream(cfg.seed, "init"), cfg.init_scale)
    partition = _build_partition(cfg)
    adv_ids = set(cfg.adversary_ids)
    states = []
    for uid in range(cfg.n_users):
        idx = partition.assignments[uid]
        states.append(
            UserState(
                id=uid,
                model=model,
                optimizer=nn.init_optimizer(cfg.optimizer, cfg.learning_rate, shape.param_count),
                inputs=cfg.train.inputs[idx],
                labels=cfg.train.labels[idx],
                is_adversary=uid in adv_ids,
            )
        )
    return states


def distance_to_target(states: list[UserState], target: np.ndarray) -> float:
    """Mean L2 distance of the honest users' parameters to the target."""
    honest = [s for s in states if not s.is_adversary]
    if not honest:
        raise SimulationError("no honest users to measure")
    return float(
        np.mean([np.linalg.norm(s.model.params - target) for s in honest])
    )


def _apply_aggregate(base: nn.Model, aggregate: np.ndarray, update_kind: str) -> nn.Model:
    if update_kind == "delta":
        return base.with_params(base.params + aggregate)
    return base.with_params(aggregate)


def _aggregate_point(
    cfg: RunConfig,
    ordered: list[np.ndarray],
    own: np.ndarray | None,
    base_model: nn.Model,
    eval_set: Dataset | None,
    delta_value: float,
) -> agg.AggregationOutcome:
    kind = cfg.aggregator.kind
    if kind == "mean":
        pool = ordered + ([own] if own is not None else [])
        return agg.mean_aggregate(pool)
    if kind == "multi_krum":
        pool = ordered + ([own] if own is not None else [])
        return agg.multi_krum_aggregate(pool, cfg.aggregator)
    if kind == "rofl_norm":
        pool = ordered + ([own] if own is not None else [])
        return agg.rofl_aggregate(pool, cfg.aggregator)
    if kind == "scc":
        assert own is not None
        return agg.scc_aggregate(ordered, own, delta_value)
    if eval_set is None or len(eval_set) == 0:
        raise SimulationError(f"aggregator {kind!r} needs an evaluation set")
    if kind == "err_rejection":
        pool = ordered + ([own] if own is not None else [])
        return agg.err_aggregate(pool, base_model, eval_set, cfg.aggregator, cfg.update_kind)
    if kind == "rd_svm_hinge":
        pool = ordered + ([own] if own is not None else [])
        scores, accepted = [], []
        for vec in pool:
            candidate = base_model.params + vec if cfg.update_kind == "delta" else vec
            r = agg.rd_svm_evaluate(candidate, base_model, eval_set)
            scores.append(r)
            accepted.append(r <= 0.0)
        kept = [v for v, ok in zip(pool, accepted) if ok]
        if kept:
            aggregate = np.mean(kept, axis=0)
            empty = False
        else:
            aggregate = np.zeros_like(pool[0])
            empty = True
        return agg.AggregationOutcome(
            aggregate=aggregate,
            per_update_score=scores,
            accepted=accepted,
            clipped=[False] * len(pool),
            none_accepted=empty,
        )
    raise SimulationError(f"unknown aggregator kind {kind!r}")


def _craft_payloads(
    cfg: RunConfig,
    ctx: _RunContext,
    states: list[UserState],
    sent: dict[int, np.ndarray],
    epoch: int,
) -> dict[int, dict[int, np.ndarray]]:
    """Per-victim payloads, keyed victim id -> adversary id -> vector.

    Key -1 stands for the server in the star topology. The adversary
    observes the honest updates of the current epoch by default, or uses
    the previous epoch's as an estimate under a communication schedule.
    """
    honest_ids = [s.id for s in states if not s.is_adversary]
    adv_ids = list(cfg.adversary_ids)
    n_adv = len(adv_ids)

    observed = {uid: sent[uid] for uid in honest_ids}
    if cfg.observation == "previous" and ctx.prev_honest_sent is not None:
        observed = ctx.prev_honest_sent

    payloads: dict[int, dict[int, np.ndarray]] = {}

    if cfg.attack_kind == "state_override":
        if cfg.topology == "star":
            base = states[honest_ids[0]].model
            target_u = ctx.target - base.params if cfg.update_kind == "delta" else ctx.target
            view = adv.AdversaryView(observed, None, epoch)
            share = adv.state_override(view, target_u, cfg.n_users, n_adv)
            share = _apply_budget(cfg, share, observed, n_adv)
            payloads[-1] = {a: share for a in adv_ids}
        else:
            for vid in honest_ids:
                base = states[vid].model
                target_u = (
                    ctx.target - base.params if cfg.update_kind == "delta" else ctx.target
                )
                view = adv.AdversaryView(observed, None, epoch)
                share = adv.state_override(view, target_u, cfg.n_users, n_adv)
                share = _apply_budget(cfg, share, observed, n_adv)
                payloads[vid] = {a: share for a in adv_ids}
        return payloads

    if cfg.attack_kind == "state_override_scc":
        for vid in honest_ids:
            others = {uid: vec for uid, vec in observed.items() if uid != vid}
            view = adv.AdversaryView(others, sent[vid], epoch)
            delta_value = cfg.aggregator.delta
            if cfg.aggregator.delta_policy == "dynamic_variance" and others:
                delta_value = agg.dynamic_delta(sent[vid], list(others.values()))
            share = adv.state_override_scc(view, delta_value, n_adv)
            payloads[vid] = {a: share for a in adv_ids}
        return payloads

    if cfg.attack_kind == "dissensus":
        if ctx.dissensus_snapshot is None:
            ctx.dissensus_snapshot = {uid: observed[uid].copy() for uid in honest_ids}
        snapshot = ctx.dissensus_snapshot
        for vid in honest_ids:
            payload = adv.dissensus(snapshot, vid, cfg.n_users - 1)
            payloads[vid] = {a: payload for a in adv_ids}
        return payloads

    raise SimulationError(f"unhandled attack kind {cfg.attack_kind!r}")


def _apply_budget(
    cfg: RunConfig,
    share: np.ndarray,
    observed: dict[int, np.ndarray],
    n_adv: int,
) -> np.ndarray:
    if cfg.attack_budget == "exact":
        return share
    if cfg.attack_budget == "fit_norm":
        return adv.fit_norm_budget(share, cfg.aggregator.delta)
    if cfg.attack_budget == "fit_acceptance":
        honest = [observed[uid] for uid in sorted(observed)]
        return adv.fit_acceptance_budget(share, honest, cfg.aggregator, n_adv)
    raise SimulationError(f"unknown attack budget {cfg.attack_budget!r}")


def run_epoch(
    states: list[UserState], cfg: RunConfig, ctx: _RunContext, epoch: int
) -> tuple[list[UserState], EpochTrace, dict[int, np.ndarray], nn.Model]:
    """Advance the system by one epoch; returns the updated user states,
    the trace, the sent updates, and the pre-aggregation base model."""
    attack_on = cfg.attack_kind != "none"
    adv_ids = set(cfg.adversary_ids) if attack_on else set()
    base_model = states[0].model  # common across users in the star topology

    # (1) Local training. Adversaries under an active attack skip it:
    # their transmission is crafted, not trained.
    trained: dict[int, tuple[nn.Model, np.ndarray, nn.OptimizerState]] = {}
    sent: dict[int, np.ndarray] = {}
    for st in states:
        if st.id in adv_ids:
            continue
        seed = stream(cfg.seed, "train", st.id, epoch).integers(0, 2**63 - 1)
        model, delta, opt = nn.local_train_step(
            st.model,
            st.optimizer,
            st.inputs,
            st.labels,
            cfg.batch_size,
            int(seed),
            passes=cfg.local_passes,
        )
        trained[st.id] = (model, delta, opt)
        sent[st.id] = delta if cfg.update_kind == "delta" else model.params

    # Norm-bounded protocols have honest senders scale their own update
    # into the ball before transmitting, otherwise nothing would pass.
    if cfg.aggregator.kind == "rofl_norm":
        for uid in list(sent):
            sent[uid] = adv.fit_norm_budget(sent[uid], cfg.aggregator.delta)

    # (2) Adversarial payloads (observing honest updates).
    payloads: dict[int, dict[int, np.ndarray]] = {}
    if attack_on:
        try:
            payloads = _craft_payloads(cfg, ctx, states, sent, epoch)
        except adv.AttackError as exc:
            raise SimulationError(f"epoch {epoch}: {exc}") from exc

    def updates_for(victim: int) -> dict[int, np.ndarray]:
        out = dict(sent)
        if attack_on:
            per_victim = payloads.get(victim, {})
            for a in cfg.adversary_ids:
                if a in per_victim:
                    out[a] = per_victim[a]
        return out

    # (3) Aggregation and model advance.
    new_states = [replace(s) for s in states]
    outcomes: dict[str, agg.AggregationOutcome] = {}
    dynamic_deltas: list[float] = []
    try:
        if cfg.topology == "star":
            pool_map = updates_for(-1)
            ordered = [pool_map[uid] for uid in sorted(pool_map)]
            outcome = _aggregate_point(
                cfg, ordered, None, base_model, ctx.server_eval, cfg.aggregator.delta
            )
            outcomes["server"] = outcome
            new_global = _apply_aggregate(base_model, outcome.aggregate, cfg.update_kind)
            for st in new_states:
                st.model = new_global
                if st.id in trained:
                    st.optimizer = trained[st.id][2]
        else:
            for st in new_states:
                if st.id in adv_ids:
                    continue
                pool_map = updates_for(st.id)
                own = pool_map.pop(st.id)
                ordered = [pool_map[uid] for uid in sorted(pool_map)]
                delta_value = cfg.aggregator.delta
                if (
                    cfg.aggregator.kind == "scc"
                    and cfg.aggregator.delta_policy == "dynamic_variance"
                ):
                    delta_value = agg.dynamic_delta(own, ordered)
                    dynamic_deltas.append(delta_value)
                local_eval = None
                if cfg.aggregator.kind in agg.BEHAVIOR_BASED:
                    local_eval = seeded_subset(
                        Dataset(st.inputs, st.labels, f"user{st.id}"),
                        cfg.aggregator.eval_set_size,
                        cfg.seed,
                    )
                outcome = _aggregate_point(
                    cfg, ordered, own, st.model, local_eval, delta_value
                )
                outcomes[str(st.id)] = outcome
                st.model = _apply_aggregate(st.model, outcome.aggregate, cfg.update_kind)
                st.optimizer = trained[st.id][2]
    except agg.AggregationError as exc:
        raise SimulationError(f"epoch {epoch}: {exc}") from exc

    # Adversaries keep their previous model when skipping training.
    for st in new_states:
        if st.id in adv_ids and cfg.topology == "complete":
            st.model = states[st.id].model

    ctx.prev_honest_sent = {uid: sent[uid] for uid in sent}

    metrics = _epoch_metrics(cfg, ctx, new_states, dynamic_deltas)
    trace_updates: dict[int, np.ndarray] = {}
    if cfg.keep_updates:
        trace_updates = dict(sent)
        if attack_on and payloads:
            first = next(iter(payloads.values()))
            for a in cfg.adversary_ids:
                if a in first:
                    trace_updates[a] = first[a]
    trace = EpochTrace(epoch=epoch, updates=trace_updates, outcomes=outcomes, metrics=metrics)
    return new_states, trace, sent, base_model


def _epoch_metrics(
    cfg: RunConfig,
    ctx: _RunContext,
    states: list[UserState],
    dynamic_deltas: list[float],
) -> dict[str, float]:
    metrics: dict[str, float] = {}
    honest = [s for s in states if not s.is_adversary]
    classification = cfg.shape.output_head in nn.CLASSIFICATION_HEADS

    if ctx.metric_val is not None and len(ctx.metric_val):
        ev = ctx.metric_val
        if cfg.topology == "star":
            models = [honest[0].model]
        else:
            models = [s.model for s in honest]
        if classification:
            accs = [nn.evaluate(m, ev.inputs, ev.labels, "accuracy") for m in models]
            metrics["accuracy"] = float(np.mean(accs))
            metrics["error_rate"] = 1.0 - metrics["accuracy"]
        elif cfg.shape.output_head == "linear_mse":
            metrics["rmse"] = float(
                np.mean([nn.evaluate(m, ev.inputs, ev.labels, "rmse") for m in models])
            )

    losses = [
        nn.mean_loss(s.model, s.inputs, s.labels)
        for s in honest
        if s.inputs.shape[0]
    ]
    if losses:
        metrics["train_loss"] = float(np.mean(losses))

    if cfg.attack_kind != "none" and ctx.target is not None:
        metrics["distance_to_target"] = distance_to_target(states, ctx.target)
    if dynamic_deltas:
        metrics["dynamic_delta_mean"] = float(np.mean(dynamic_deltas))
    return metrics


EpochHook = Callable[[int, dict[int, np.ndarray], nn.Model, list[UserState]], None]


def run(cfg: RunConfig, epoch_hook: EpochHook | None = None) -> list[EpochTrace]:
    """Execute the configured number of epochs and return one trace each.

    ``epoch_hook`` (if given) receives the epoch index, the sent updates,
    the pre-aggregation base model, and the post-aggregation states; the
    measurement harnesses use it to score updates without storing them.
    """
    states = init_states(cfg)
    target = None
    if cfg.attack_kind != "none":
        target = adv.build_target(
            cfg.target_kind, states[0].model, dict(cfg.target_overrides)
        )
    server_eval = None
    if cfg.topology == "star" and cfg.aggregator.kind in agg.BEHAVIOR_BASED:
        source = cfg.val if cfg.val is not None else cfg.train
        server_eval = seeded_subset(source, cfg.aggregator.eval_set_size, cfg.seed)
    metric_val = None
    if cfg.val is not None and len(cfg.val):
        metric_val = seeded_subset(cfg.val, cfg.eval_cap, cfg.seed)

    ctx = _RunContext(cfg=cfg, target=target, server_eval=server_eval, metric_val=metric_val)
    traces: list[EpochTrace] = []
    for epoch in range(cfg.epochs):
        states, trace, sent, base_model = run_epoch(states, cfg, ctx, epoch)
        if epoch_hook is not None:
            epoch_hook(epoch, sent, base_model, states)
        traces.append(trace)
    return traces
