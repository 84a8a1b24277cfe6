"""End-to-end trainer: counting sampler, grouped epochs, adaptive schedule,
validation AUC, metrics log, and simulated data-parallel workers."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .graph import HeteroGraph, NodeRef
from .model import LinkPredictionModel, ModelConfig, PairBatch, ParamStore
from .model.encoder import HopEntry, hops_from_samples
from .pipeline import (
    AdaptiveState,
    GroupedBatch,
    PrefetchPipeline,
    PrefetchQueueConfig,
    TrainingRecord,
    adaptive_step,
    group_and_slice,
    grouped_step,
    local_gradient_aggregate,
    mlp_init,
)
from .samplers import (
    PPRConfig,
    WalkConfig,
    ppr_forward_push,
    ppr_two_hop_random_walk,
    sample_random_multihop,
    sample_temporal_last_n,
    sample_weighted_multihop,
)


def binary_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """ROC AUC by the rank statistic, ties get average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    r_pos = ranks[labels].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


class GraphSampler:
    """Neighborhood sampler with per-role query/fetch counters.

    Counters are locked so prefetch producer threads may share an instance.
    Evaluation queries are tracked separately and excluded from the
    training fetch totals.
    """

    def __init__(
        self,
        graph: HeteroGraph,
        strategy: str = "random",
        rng_seed: int = 0,
        hops: int = 1,
        alpha: float = 0.15,
        r_max: float = 1e-4,
        num_walks: int = 2000,
        edge_type_weights: dict[int, float] | None = None,
    ):
        if strategy not in ("random", "weighted", "ppr-push", "ppr-2hop"):
            raise ValueError(f"unknown sampling strategy {strategy}")
        self.graph = graph
        self.strategy = strategy
        self.rng_seed = rng_seed
        self.hops = hops
        self.alpha = alpha
        self.r_max = r_max
        self.num_walks = num_walks
        self.edge_type_weights = edge_type_weights
        self.queries: dict[str, int] = {}
        self.neighbors_fetched = 0
        self._lock = threading.Lock()

    @property
    def flat_attach(self) -> bool:
        return self.strategy in ("ppr-push", "ppr-2hop") and self.hops == 1

    def _count(self, role: str, entries: int) -> None:
        with self._lock:
            self.queries[role] = self.queries.get(role, 0) + 1
            if role != "eval":
                self.neighbors_fetched += entries

    def fetch(self, ref: NodeRef, neighbor_count: int, role: str) -> list[list[HopEntry]]:
        """One engine query: the sampled compute graph for one node."""
        if self.strategy == "random":
            [hops] = sample_random_multihop(
                self.graph, [ref], [neighbor_count] * self.hops, self.rng_seed
            )
            out = hops_from_samples(hops)
        elif self.strategy == "weighted":
            [hops] = sample_weighted_multihop(
                self.graph, [ref], [neighbor_count] * self.hops,
                self.edge_type_weights, self.rng_seed,
            )
            out = hops_from_samples(hops)
        elif self.strategy == "ppr-push":
            cfg = PPRConfig(alpha=self.alpha, r_max=self.r_max, top_k=neighbor_count)
            sample = ppr_forward_push(self.graph, ref, cfg)
            out = hops_from_samples(sample, flatten=self.flat_attach)
        else:  # ppr-2hop
            cfg = WalkConfig(
                num_walks=self.num_walks, alpha=self.alpha,
                top_k=neighbor_count, rng_seed=self.rng_seed,
            )
            sample = ppr_two_hop_random_walk(self.graph, ref, cfg)
            out = hops_from_samples(sample, flatten=self.flat_attach)
        self._count(role, sum(len(h) for h in out))
        return out


@dataclass
class TrainSettings:
    epochs: int = 5
    lr: float = 0.1
    group_size: int = 4
    gradient_step: int = 1
    neighbor_count: int = 20
    strategy: str = "random"
    rng_seed: int = 0
    adaptive: AdaptiveState | None = None
    mlp_init_epochs: int = 0
    val_fraction: float = 0.2
    eval_neighbor_count: int | None = None
    activity_edge_type: int = 0
    prefetch: PrefetchQueueConfig | None = None
    metrics_path: str | None = None
    shuffle: bool = True


@dataclass
class EpochMetrics:
    epoch: int
    auc: float
    neighbor_count: int
    queue_depth_max: int
    ge_queries: int
    train_loss: float

    def as_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "auc": self.auc,
                "neighbor_count": self.neighbor_count,
                "queue_depth_max": self.queue_depth_max,
                "ge_queries": self.ge_queries,
                "train_loss": self.train_loss,
            }
        )


def split_records(
    records: Sequence[TrainingRecord], val_fraction: float, seed: int
) -> tuple[list[TrainingRecord], list[TrainingRecord]]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_val = int(len(records) * val_fraction)
    val_idx = set(order[:n_val].tolist())
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return train, val


class Trainer:
    def __init__(
        self,
        graph: HeteroGraph,
        config: ModelConfig,
        settings: TrainSettings,
        store: ParamStore | None = None,
    ):
        self.graph = graph
        self.config = config.with_graph(graph) if not config.feature_dims else config
        self.settings = settings
        self.sampler = GraphSampler(
            graph, settings.strategy, settings.rng_seed, hops=self.config.hops
        )
        self.model = LinkPredictionModel(graph, self.config, store)
        self.history: list[EpochMetrics] = []

    # -- batch building -------------------------------------------------------

    def _activities_for(self, member: NodeRef, before_ts: int) -> tuple[list[NodeRef], list[float]]:
        cfg = self.config.temporal
        assert cfg is not None
        events = sample_temporal_last_n(
            self.graph, member, self.settings.activity_edge_type, before_ts, cfg.seq_len
        )
        refs = [ref for ref, _ in events]
        ages = [float(max(0, before_ts - ts)) for _, ts in events]
        return refs, ages

    def eval_batch(self, records: Sequence[TrainingRecord], neighbor_count: int) -> PairBatch:
        src_refs = [self.graph.resolve(r.member) for r in records]
        dst_refs = [self.graph.resolve(r.item) for r in records]
        src_hops = [self.sampler.fetch(r, neighbor_count, "eval") for r in src_refs]
        dst_hops = [self.sampler.fetch(r, neighbor_count, "eval") for r in dst_refs]
        batch = PairBatch(
            src_refs=src_refs,
            dst_refs=dst_refs,
            labels=np.array([r.label for r in records], dtype=np.float64),
            mask=np.ones(len(records), dtype=bool),
            src_hops=src_hops,
            dst_hops=dst_hops,
            flat_attach=self.sampler.flat_attach,
        )
        if self.config.temporal is not None:
            acts = [self._activities_for(ref, rec.timestamp) for ref, rec in zip(src_refs, records)]
            batch.activity_refs = [a[0] for a in acts]
            batch.activity_ages = [a[1] for a in acts]
            k = self.config.temporal.dst_neighbor_count
            if k > 0:
                batch.dst_neighbor_refs = [
                    [e.ref for e in (hops[0] if hops else [])][:k] for hops in dst_hops
                ]
        return batch

    def validation_auc(self, val_records: Sequence[TrainingRecord], neighbor_count: int) -> float:
        scores: list[float] = []
        labels: list[int] = []
        for lo in range(0, len(val_records), 256):
            chunk = val_records[lo : lo + 256]
            batch = self.eval_batch(chunk, neighbor_count)
            scores.extend(self.model.pair_scores(batch).tolist())
            labels.extend(r.label for r in chunk)
        return binary_auc(np.array(scores), np.array(labels))

    # -- training loop ----------------------------------------------------------

    def train(self, records: Sequence[TrainingRecord]) -> list[EpochMetrics]:
        s = self.settings
        train_recs, val_recs = split_records(records, s.val_fraction, s.rng_seed)
        if s.mlp_init_epochs > 0:
            self.model.store = mlp_init(
                train_recs, self.graph, self.config, epochs=s.mlp_init_epochs, lr=s.lr
            )
        adaptive = s.adaptive
        eval_count = s.eval_neighbor_count or (
            adaptive.final_count if adaptive else s.neighbor_count
        )
        rng = np.random.default_rng(s.rng_seed)
        metrics_fh = open(s.metrics_path, "w", encoding="utf-8") if s.metrics_path else None
        temporal = self.config.temporal is not None
        try:
            for epoch in range(1, s.epochs + 1):
                count = adaptive.current_count if adaptive else s.neighbor_count
                epoch_recs = list(train_recs)
                if s.shuffle:
                    order = rng.permutation(len(epoch_recs))
                    epoch_recs = [epoch_recs[i] for i in order]
                grouped = list(group_and_slice(epoch_recs, s.group_size))
                queue_depth = 0
                losses: list[float] = []

                def run_batch(batch: GroupedBatch) -> None:
                    activity_fn = self._activities_for if temporal else None
                    sub = grouped_step(
                        self.model,
                        batch,
                        s.gradient_step,
                        s.lr,
                        lambda ref, role: self.sampler.fetch(ref, count, role),
                        flat_attach=self.sampler.flat_attach,
                        activity_fn=activity_fn,
                    )
                    losses.extend(sub)

                if s.prefetch is not None:
                    pipe = PrefetchPipeline(
                        self._make_producer(grouped, s.prefetch.producers, count), s.prefetch
                    )
                    for batch in pipe:
                        run_batch(batch)
                    queue_depth = pipe.max_observed_depth
                else:
                    for batch in grouped:
                        run_batch(batch)

                auc = self.validation_auc(val_recs, eval_count)
                if adaptive is not None:
                    adaptive = adaptive_step(adaptive, auc)
                m = EpochMetrics(
                    epoch=epoch,
                    auc=auc,
                    neighbor_count=count,
                    queue_depth_max=queue_depth,
                    ge_queries=sum(
                        v for k, v in self.sampler.queries.items() if k != "eval"
                    ),
                    train_loss=float(np.mean(losses)) if losses else 0.0,
                )
                self.history.append(m)
                if metrics_fh:
                    metrics_fh.write(m.as_json() + "\n")
        finally:
            if metrics_fh:
                metrics_fh.close()
        if adaptive is not None:
            self.settings = replace(s, adaptive=adaptive)
        return self.history

    def _make_producer(self, grouped: list[GroupedBatch], producers: int, count: int):
        """Deterministic (shard, index) -> GroupedBatch partitioning."""

        def producer_fn(shard: int, index: int):
            pos = shard + index * producers
            if pos >= len(grouped):
                return None
            return grouped[pos]

        return producer_fn


def data_parallel_step(
    models: Sequence[LinkPredictionModel],
    batches: Sequence[PairBatch],
    lr: float,
    scale_lr_by_workers: bool = False,
) -> dict[str, np.ndarray]:
    """Simulated synchronous workers: aggregate local gradients, apply the
    same update to every replica (the all-reduce contract)."""
    if len(models) != len(batches):
        raise ValueError("one batch per worker")
    grads = []
    sizes = []
    for model, batch in zip(models, batches):
        _, g, _ = model.loss_and_grads(batch)
        grads.append(g)
        sizes.append(int(batch.mask.sum()))
    agg = local_gradient_aggregate(grads, sizes)
    step = lr * len(models) if scale_lr_by_workers else lr
    for model in models:
        model.store.sgd_step(agg, step)
    return agg
