"""Training-throughput machinery: grouping & slicing of member/item records,
the adaptive neighbor-count controller, MLP-init, local gradient aggregation,
and the bounded multi-producer prefetch queue."""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .graph import HeteroGraph, NodeRef
from .model import LinkPredictionModel, ModelConfig, PairBatch, ParamStore, init_params
from .model.encoder import HopEntry

DUMMY_ITEM_ID = (1 << 64) - 1  # reserved sentinel for padded slots


class TrainingRecord(NamedTuple):
    member_type: int
    member_id: int
    item_type: int
    item_id: int
    label: int
    timestamp: int

    @property
    def member(self) -> tuple[int, int]:
        return (self.member_type, self.member_id)

    @property
    def item(self) -> tuple[int, int]:
        return (self.item_type, self.item_id)


def parse_records(lines: Iterable[str]) -> list[TrainingRecord]:
    """records.tsv: member_type, member_id, item_type, item_id, label, ts."""
    out = []
    for raw in lines:
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        parts = raw.rstrip("\n").split("\t")
        if len(parts) != 6:
            raise ValueError(f"bad record row: {raw!r}")
        out.append(TrainingRecord(*(int(p) for p in parts)))
    return out


@dataclass(frozen=True)
class GroupedBatch:
    """One member with group_size item slots; padded slots have mask False."""

    member: tuple[int, int]
    items: tuple[tuple[int, int], ...]
    labels: tuple[int, ...]
    mask: tuple[bool, ...]
    timestamps: tuple[int, ...]

    @property
    def real_count(self) -> int:
        return sum(self.mask)


def group_and_slice(
    records: Iterable[TrainingRecord], group_size: int
) -> Iterator[GroupedBatch]:
    """Group records by member and slice into fixed-size padded batches.

    Members appear in first-occurrence order; a member's items keep input
    order. The final partial batch pads with the dummy item id, label 0,
    mask False.
    """
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    by_member: dict[tuple[int, int], list[TrainingRecord]] = {}
    for rec in records:
        by_member.setdefault(rec.member, []).append(rec)
    for member, recs in by_member.items():
        for lo in range(0, len(recs), group_size):
            chunk = recs[lo : lo + group_size]
            pad = group_size - len(chunk)
            items = tuple(r.item for r in chunk) + ((chunk[0].item_type, DUMMY_ITEM_ID),) * pad
            labels = tuple(r.label for r in chunk) + (0,) * pad
            mask = (True,) * len(chunk) + (False,) * pad
            stamps = tuple(r.timestamp for r in chunk) + (0,) * pad
            yield GroupedBatch(member, items, labels, mask, stamps)


class QueryCounts(NamedTuple):
    before_member: int
    before_item: int
    after_member: int
    after_item: int

    @property
    def before_total(self) -> int:
        return self.before_member + self.before_item

    @property
    def after_total(self) -> int:
        return self.after_member + self.after_item

    @property
    def reduction(self) -> float:
        return self.before_total / max(1, self.after_total)


def engine_query_count(records: Sequence[TrainingRecord], group_size: int) -> QueryCounts:
    """Closed-form graph-engine query counts before/after grouping.

    Ungrouped training queries member and item once per pair. Grouped
    training queries each member once per batch (ceil(count/group_size))
    and each item once.
    """
    counts: dict[tuple[int, int], int] = {}
    for rec in records:
        counts[rec.member] = counts.get(rec.member, 0) + 1
    n = len(records)
    after_member = sum(-(-c // group_size) for c in counts.values())
    return QueryCounts(n, n, after_member, n)


# -- adaptive neighbor sampling ---------------------------------------------------


@dataclass(frozen=True)
class AdaptiveState:
    """Controller state for the neighbor-count schedule.

    The count grows by ``stride`` when the metric stalls (fails to improve
    by more than the current tolerance) or on every ``min_update_freq``-th
    epoch, capped at ``final_count``; the tolerance decays every epoch.
    """

    current_count: int = 2
    final_count: int = 200
    tolerance: float = 1e-3
    tolerance_decay: float = 0.95
    stride: int = 20
    min_update_freq: int = 5
    last_metric: float = 0.0
    epoch: int = 0

    def validate(self) -> None:
        if not (1 <= self.current_count <= self.final_count):
            raise ValueError("need 1 <= current_count <= final_count")
        if self.tolerance < 0 or self.stride < 1 or self.min_update_freq < 1:
            raise ValueError("bad adaptive parameters")


def adaptive_step(state: AdaptiveState, current_metric: float) -> AdaptiveState:
    """One epoch of the schedule; returns the next state."""
    if not np.isfinite(current_metric):
        raise ValueError("metric must be finite")
    state.validate()
    epoch = state.epoch + 1
    count = state.current_count
    if current_metric <= state.last_metric + state.tolerance or epoch % state.min_update_freq == 0:
        count = min(count + state.stride, state.final_count)
    return replace(
        state,
        current_count=count,
        last_metric=current_metric,
        tolerance=state.tolerance * state.tolerance_decay,
        epoch=epoch,
    )


# -- grouped training step ---------------------------------------------------------


SampleFn = Callable[[NodeRef, str], list[list[HopEntry]]]  # (node, role)
ActivityFn = Callable[[NodeRef, int], tuple[list[NodeRef], list[float]]]


def grouped_step(
    model: LinkPredictionModel,
    batch: GroupedBatch,
    gradient_step: int,
    lr: float,
    sample_fn: SampleFn,
    flat_attach: bool = False,
    activity_fn: ActivityFn | None = None,
) -> list[float]:
    """Train on one grouped batch with the configured number of updates.

    The member compute graph is fetched once for the whole batch; items are
    fetched once each. Items are then split into ``gradient_step`` contiguous
    slices of group_size / gradient_step and each slice does forward, masked
    loss, backward, update. gradient_step=1 is one averaged update;
    gradient_step=group_size is per-pair updates. With ``activity_fn`` the
    member's activity sequence is cut at the slice's earliest real timestamp
    (no future leakage into the sequence).
    """
    group_size = len(batch.items)
    if gradient_step < 1 or group_size % gradient_step != 0:
        raise ValueError("gradient_step must divide group_size")
    slice_size = group_size // gradient_step

    graph = model.graph
    member_ref = graph.resolve(batch.member)
    member_hops = sample_fn(member_ref, "member")
    item_refs: list[NodeRef | None] = []
    item_hops: dict[int, list[list[HopEntry]]] = {}
    for j, (item, real) in enumerate(zip(batch.items, batch.mask)):
        if not real:
            item_refs.append(None)
            continue
        ref = graph.resolve(item)
        item_refs.append(ref)
        item_hops[j] = sample_fn(ref, "item")

    filler = next((r for r in item_refs if r is not None), member_ref)
    losses = []
    for i in range(gradient_step):
        sl = slice(i * slice_size, (i + 1) * slice_size)
        mask = np.array(batch.mask[sl], dtype=bool)
        if not mask.any():
            continue  # all-padded slice: nothing to learn from
        refs = [r if r is not None else filler for r in item_refs[sl]]
        hops = [item_hops.get(i * slice_size + j, []) for j in range(slice_size)]
        pair = PairBatch(
            src_refs=[member_ref],
            dst_refs=refs,
            labels=np.array(batch.labels[sl], dtype=np.float64),
            mask=mask,
            src_hops=[member_hops],
            dst_hops=hops,
            src_slot=np.zeros(slice_size, dtype=np.int64),
            flat_attach=flat_attach,
        )
        if activity_fn is not None:
            cut_ts = min(t for t, m in zip(batch.timestamps[sl], mask) if m)
            act_refs, act_ages = activity_fn(member_ref, cut_ts)
            pair.activity_refs = [act_refs]
            pair.activity_ages = [act_ages]
        losses.append(model.step(pair, lr))
    return losses


# -- MLP-init -----------------------------------------------------------------------


def mlp_init(
    records: Sequence[TrainingRecord],
    graph: HeteroGraph,
    config: ModelConfig,
    epochs: int = 3,
    lr: float = 0.1,
    batch_size: int = 64,
) -> ParamStore:
    """Two-tower feature-only pretraining of the projection layers.

    Trains a zero-hop link predictor (no graph queries at all) and seeds a
    full parameter store with the learned projections; everything else keeps
    its fresh initialization.
    """
    zero_cfg = replace(
        config.with_graph(graph), hops=0, temporal=None, id_embeddings=False
    )
    pre = LinkPredictionModel(graph, zero_cfg)
    if epochs > 0:
        for _ in range(epochs):
            for lo in range(0, len(records), batch_size):
                chunk = records[lo : lo + batch_size]
                if len(chunk) < 2:
                    continue
                batch = PairBatch(
                    src_refs=[graph.resolve(r.member) for r in chunk],
                    dst_refs=[graph.resolve(r.item) for r in chunk],
                    labels=np.array([r.label for r in chunk], dtype=np.float64),
                    mask=np.ones(len(chunk), dtype=bool),
                    src_hops=[[] for _ in chunk],
                    dst_hops=[[] for _ in chunk],
                )
                pre.step(batch, lr)
    full = init_params(config.with_graph(graph))
    for name in pre.store.names():
        if "/proj/" in name:
            full[name] = pre.store[name].copy()
    return full


# -- local gradient aggregation ------------------------------------------------------


def local_gradient_aggregate(
    micro_gradients: Sequence[dict[str, np.ndarray]],
    micro_batch_sizes: Sequence[int],
) -> dict[str, np.ndarray]:
    """Size-weighted mean of micro-batch gradients.

    For any loss that is a size-weighted mean of per-example losses this
    equals the concatenated-batch gradient exactly.
    """
    if len(micro_gradients) == 0:
        raise ValueError("need at least one micro gradient")
    if len(micro_gradients) != len(micro_batch_sizes):
        raise ValueError("sizes must align with gradients")
    names = list(micro_gradients[0])
    total = float(sum(micro_batch_sizes))
    out: dict[str, np.ndarray] = {}
    for name in names:
        shape = micro_gradients[0][name].shape
        acc = np.zeros(shape, dtype=np.float64)
        for grads, size in zip(micro_gradients, micro_batch_sizes):
            g = grads[name]
            if g.shape != shape:
                raise ValueError(f"shape mismatch for {name}: {g.shape} vs {shape}")
            acc += (size / total) * g
        out[name] = acc
    return out


# -- prefetch pipeline ----------------------------------------------------------------


@dataclass(frozen=True)
class PrefetchQueueConfig:
    capacity: int = 10
    producers: int = 1

    def validate(self) -> None:
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.producers < 1:
            raise ValueError("need at least one producer")


class ProducerError(RuntimeError):
    pass


class _BoundedQueue:
    """Blocking bounded FIFO with a high-water-mark counter."""

    def __init__(self, capacity: int):
        self._capacity = capacity
        self._items: deque = deque()
        self._lock = threading.Lock()
        self._not_full = threading.Condition(self._lock)
        self._not_empty = threading.Condition(self._lock)
        self.max_depth = 0

    def put(self, item) -> None:
        with self._not_full:
            while len(self._items) >= self._capacity:
                self._not_full.wait()
            self._items.append(item)
            self.max_depth = max(self.max_depth, len(self._items))
            self._not_empty.notify()

    def get(self):
        with self._not_empty:
            while not self._items:
                self._not_empty.wait()
            item = self._items.popleft()
            self._not_full.notify()
            return item


_DONE = object()


class PrefetchPipeline:
    """Multi-producer, single-consumer batch prefetcher with backpressure.

    ``producer_fn(shard, index)`` must be a deterministic function returning
    the batch at that coordinate or None when the shard is exhausted. Each
    producer walks its own shard; the consumer iterates delivered batches.
    Producer failures surface as ProducerError after in-flight batches drain.
    """

    def __init__(self, producer_fn: Callable[[int, int], object], config: PrefetchQueueConfig):
        config.validate()
        self._queue = _BoundedQueue(config.capacity)
        self._config = config
        self._errors: list[tuple[int, BaseException]] = []
        self._threads = [
            threading.Thread(target=self._produce, args=(producer_fn, s), daemon=True)
            for s in range(config.producers)
        ]
        for t in self._threads:
            t.start()

    def _produce(self, producer_fn, shard: int) -> None:
        try:
            index = 0
            while True:
                batch = producer_fn(shard, index)
                if batch is None:
                    break
                self._queue.put(batch)
                index += 1
        except BaseException as exc:  # propagate to the consumer
            self._errors.append((shard, exc))
        finally:
            self._queue.put(_DONE)

    @property
    def max_observed_depth(self) -> int:
        return self._queue.max_depth

    def __iter__(self):
        done = 0
        while done < self._config.producers:
            item = self._queue.get()
            if item is _DONE:
                done += 1
                continue
            yield item
        for t in self._threads:
            t.join()
        if self._errors:
            shard, exc = self._errors[0]
            raise ProducerError(f"producer {shard} failed: {exc!r}") from exc


def prefetch_pipeline(
    producer_fn: Callable[[int, int], object], config: PrefetchQueueConfig
) -> PrefetchPipeline:
    return PrefetchPipeline(producer_fn, config)
