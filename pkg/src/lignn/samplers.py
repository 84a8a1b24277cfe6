"""Neighbor sampling strategies over a HeteroGraph.

Every operation is a pure function of (graph, arguments, rng_seed): RNG
streams are counter-based (Philox) keyed by ``mix64(rng_seed, node_type,
node_id, hop)``, never by position in a batch, so batched, threaded, and
partitioned executions all draw the same samples.

All strategies run against an adjacency provider rather than the graph
directly; the remote fan-out client substitutes a network-backed provider
and reuses these exact code paths.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .graph import HeteroGraph, MissingNodeError, NodeRef, mix64


@dataclass(frozen=True)
class PPRConfig:
    """Forward-push parameters.

    ``r_max`` bounds residual-per-weighted-degree at termination: pushing
    stops once r(v) <= r_max * wdeg(v) for all v, where wdeg is the sum of
    effective out-edge weights (edge count in unweighted mode).
    """

    alpha: float = 0.15
    r_max: float = 1e-4
    top_k: int = 200
    max_pushes: int = 50_000_000
    weighted: bool = True
    include_seed: bool = False

    def validate(self) -> None:
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must be in (0, 1)")
        if self.r_max <= 0.0:
            raise ValueError("r_max must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass(frozen=True)
class WalkConfig:
    num_walks: int = 100_000
    alpha: float = 0.15
    top_k: int = 200
    rng_seed: int = 0
    weighted: bool = True
    include_seed: bool = False

    def validate(self) -> None:
        if self.num_walks < 1:
            raise ValueError("num_walks must be >= 1")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must be in (0, 1)")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


class SampleEntry(NamedTuple):
    node: NodeRef
    score: float
    hop: int


@dataclass(frozen=True)
class NeighborSample:
    """Result of one sampling strategy for one seed."""

    seed: NodeRef | tuple[int, int]
    entries: tuple[SampleEntry, ...]
    strategy: str
    truncated: bool = False
    error: str | None = None

    def refs(self) -> list[NodeRef]:
        return [e.node for e in self.entries]


# -- adjacency providers -------------------------------------------------------


class LocalAdjacency:
    """Provider over an in-memory graph, with per-node caching.

    ``neighbors`` returns distinct out-neighbors sorted by (node_type,
    node_id) with aggregated effective weights; unweighted mode replaces the
    weights with ones (after zero-multiplier filtering).
    """

    def __init__(
        self,
        graph: HeteroGraph,
        edge_type_weights: dict[int, float] | None = None,
        edge_types: Sequence[int] | None = None,
        weighted: bool = True,
    ):
        self.graph = graph
        self.edge_type_weights = edge_type_weights
        self.edge_types = list(edge_types) if edge_types is not None else None
        self.weighted = weighted
        self._cache: dict[tuple[int, int], tuple[list[NodeRef], np.ndarray]] = {}

    def neighbors(self, node: NodeRef) -> tuple[list[NodeRef], np.ndarray]:
        key = node.ext()
        hit = self._cache.get(key)
        if hit is None:
            refs, weights = self.graph.merged_neighbors(
                node, self.edge_type_weights, self.edge_types
            )
            if not self.weighted:
                weights = np.ones(len(refs), dtype=np.float64)
            hit = (refs, weights)
            self._cache[key] = hit
        return hit


Provider = LocalAdjacency  # structural: anything with .neighbors(ref)


def _rng_for(rng_seed: int, node: NodeRef, hop: int | None = None) -> np.random.Generator:
    parts = (rng_seed, node.node_type, node.node_id)
    if hop is not None:
        parts = parts + (hop,)
    return np.random.Generator(np.random.Philox(key=mix64(*parts)))


# -- multi-hop fan-out sampling ------------------------------------------------


def _frontier_union(
    provider: Provider, frontier: list[NodeRef]
) -> tuple[list[NodeRef], np.ndarray]:
    """Union of the frontier's neighbors with summed weights, ext-sorted."""
    acc: dict[tuple[int, int], float] = {}
    ref_of: dict[tuple[int, int], NodeRef] = {}
    for node in frontier:
        refs, weights = provider.neighbors(node)
        for ref, w in zip(refs, weights):
            key = ref.ext()
            acc[key] = acc.get(key, 0.0) + float(w)
            ref_of[key] = ref
    keys = sorted(acc)
    return [ref_of[k] for k in keys], np.array([acc[k] for k in keys], dtype=np.float64)


def _weighted_draw_without_replacement(
    gen: np.random.Generator, weights: np.ndarray, k: int
) -> list[int]:
    """Successive proportional draws; zero-weight candidates never picked."""
    remaining = weights.astype(np.float64).copy()
    picked: list[int] = []
    for _ in range(k):
        total = remaining.sum()
        if total <= 0.0:
            break
        target = gen.random() * total
        cum = np.cumsum(remaining)
        idx = int(np.searchsorted(cum, target, side="right"))
        idx = min(idx, len(remaining) - 1)
        picked.append(idx)
        remaining[idx] = 0.0
    return picked


def multihop_sample_core(
    provider: Provider,
    graph_resolve: Callable[[tuple[int, int] | NodeRef], NodeRef],
    seeds: Sequence[NodeRef | tuple[int, int]],
    fanouts: Sequence[int],
    rng_seed: int,
    strategy: str,
    uniform: bool,
) -> list[list[NeighborSample]]:
    if not fanouts:
        raise ValueError("fanouts must be non-empty")
    out: list[list[NeighborSample]] = []
    for seed in seeds:
        try:
            seed_ref = graph_resolve(seed)
        except MissingNodeError as exc:
            out.append([NeighborSample((seed[0], seed[1]), (), strategy, error=str(exc))])
            continue
        hops: list[NeighborSample] = []
        frontier = [seed_ref]
        for h, fanout in enumerate(fanouts):
            cands, weights = _frontier_union(provider, frontier)
            gen = _rng_for(rng_seed, seed_ref, h)
            if fanout <= 0 or not cands:
                chosen: list[int] = []
            elif uniform:
                if fanout >= len(cands):
                    chosen = list(range(len(cands)))
                else:
                    chosen = sorted(gen.choice(len(cands), size=fanout, replace=False).tolist())
            else:
                live = int(np.count_nonzero(weights))
                if fanout >= live:
                    chosen = [i for i in range(len(cands)) if weights[i] > 0.0]
                else:
                    chosen = sorted(_weighted_draw_without_replacement(gen, weights, fanout))
            entries = tuple(
                SampleEntry(cands[i], float(weights[i]), h + 1) for i in chosen
            )
            hops.append(NeighborSample(seed_ref, entries, strategy))
            frontier = [cands[i] for i in chosen]
        out.append(hops)
    return out


def sample_random_multihop(
    graph: HeteroGraph,
    seeds: Sequence[NodeRef | tuple[int, int]],
    fanouts: Sequence[int],
    rng_seed: int,
    edge_types: Sequence[int] | None = None,
) -> list[list[NeighborSample]]:
    """Uniform without-replacement fan-out per hop over frontier unions.

    Hop h draws from the union of hop h-1 nodes' distinct neighbors; an
    undersized frontier is returned whole. Per-seed errors do not abort the
    batch.
    """
    provider = LocalAdjacency(graph, edge_types=edge_types)
    return multihop_sample_core(
        provider, graph.resolve, seeds, fanouts, rng_seed, "random", uniform=True
    )


def sample_weighted_multihop(
    graph: HeteroGraph,
    seeds: Sequence[NodeRef | tuple[int, int]],
    fanouts: Sequence[int],
    edge_type_weights: dict[int, float] | None,
    rng_seed: int,
    edge_types: Sequence[int] | None = None,
) -> list[list[NeighborSample]]:
    """Fan-out with pick probability proportional to weight x type multiplier."""
    if edge_type_weights:
        for et, m in edge_type_weights.items():
            if m < 0:
                raise ValueError(f"negative multiplier for edge type {et}")
    provider = LocalAdjacency(graph, edge_type_weights=edge_type_weights, edge_types=edge_types)
    return multihop_sample_core(
        provider, graph.resolve, seeds, fanouts, rng_seed, "weighted", uniform=False
    )


# -- exact PPR (oracle) ---------------------------------------------------------


class GlobalIndex:
    """Flat index over all nodes of all types, in (type, index) order."""

    def __init__(self, graph: HeteroGraph):
        self.graph = graph
        self.types = graph.node_types
        self.offsets: dict[int, int] = {}
        total = 0
        for t in self.types:
            self.offsets[t] = total
            total += graph.num_nodes(t)
        self.n = total

    def gidx(self, ref: NodeRef) -> int:
        return self.offsets[ref.node_type] + ref.index

    def ref(self, gidx: int) -> NodeRef:
        for t in reversed(self.types):
            if gidx >= self.offsets[t]:
                return self.graph.node_ref_by_index(t, gidx - self.offsets[t])
        raise IndexError(gidx)


class PPRExactResult(NamedTuple):
    scores: np.ndarray  # dense over GlobalIndex order
    l1_change: float
    index: GlobalIndex

    def score_of(self, ref: NodeRef) -> float:
        return float(self.scores[self.index.gidx(ref)])


def _transition_matrix(graph: HeteroGraph, provider: Provider, gindex: GlobalIndex) -> np.ndarray:
    P = np.zeros((gindex.n, gindex.n), dtype=np.float64)
    for t in gindex.types:
        for i in range(graph.num_nodes(t)):
            ref = graph.node_ref_by_index(t, i)
            g = gindex.gidx(ref)
            refs, weights = provider.neighbors(ref)
            total = float(weights.sum()) if len(refs) else 0.0
            if total <= 0.0:
                P[g, g] = 1.0  # dangling node keeps its mass
            else:
                for nref, w in zip(refs, weights):
                    P[g, gindex.gidx(nref)] += float(w) / total
    return P


def ppr_exact(
    graph: HeteroGraph,
    seed: NodeRef | tuple[int, int],
    alpha: float,
    num_iterations: int = 500,
    weighted: bool = True,
) -> PPRExactResult:
    """Power iteration of pi <- alpha*e_seed + (1-alpha)*pi P (dense, oracle).

    Dangling nodes self-loop so P stays row-stochastic. Intended for small
    graphs; cost is O(n^2) per iteration.
    """
    if num_iterations < 1:
        raise ValueError("num_iterations must be >= 1")
    seed_ref = graph.resolve(seed)
    gindex = GlobalIndex(graph)
    provider = LocalAdjacency(graph, weighted=weighted)
    P = _transition_matrix(graph, provider, gindex)
    e = np.zeros(gindex.n)
    e[gindex.gidx(seed_ref)] = 1.0
    pi = e.copy()
    l1 = math.inf
    for _ in range(num_iterations):
        nxt = alpha * e + (1.0 - alpha) * (pi @ P)
        l1 = float(np.abs(nxt - pi).sum())
        pi = nxt
    return PPRExactResult(pi, l1, gindex)


# -- forward push ---------------------------------------------------------------


class _PushState:
    """Per-seed forward-push state with a max-residual lazy priority queue."""

    __slots__ = ("p", "r", "heap", "pushes", "truncated", "seed_ref")

    def __init__(self, seed_ref: NodeRef):
        self.seed_ref = seed_ref
        self.p: dict[tuple[int, int], float] = {}
        self.r: dict[tuple[int, int], float] = {seed_ref.ext(): 1.0}
        # entries: (-residual, node_type, index, ext_key); lazily invalidated
        self.heap: list[tuple[float, int, int, tuple[int, int]]] = []
        self.pushes = 0
        self.truncated = False


def _wdeg(weights: np.ndarray) -> float:
    # dangling nodes act as weight-1 self-loops
    return float(weights.sum()) if len(weights) else 1.0


def _maybe_enqueue(state: _PushState, ref: NodeRef, threshold: float, r_max: float) -> None:
    rv = state.r.get(ref.ext(), 0.0)
    if rv > r_max * threshold:
        heapq.heappush(state.heap, (-rv, ref.node_type, ref.index, ref.ext()))


def _pop_push_target(
    state: _PushState, ref_of: dict[tuple[int, int], NodeRef]
) -> NodeRef | None:
    """Next node due for a push, or None when all residuals are settled."""
    while state.heap:
        neg_r, _, _, key = heapq.heappop(state.heap)
        if state.r.get(key, 0.0) != -neg_r:
            continue  # stale entry
        return ref_of[key]
    return None


def _apply_push(
    state: _PushState,
    node: NodeRef,
    provider: Provider,
    ref_of: dict[tuple[int, int], NodeRef],
    alpha: float,
    r_max: float,
) -> None:
    key = node.ext()
    rv = state.r[key]
    refs, weights = provider.neighbors(node)
    total = _wdeg(weights)
    state.p[key] = state.p.get(key, 0.0) + alpha * rv
    state.r[key] = 0.0
    spread = (1.0 - alpha) * rv
    if len(refs) == 0:
        # self-loop: residual returns to the node itself
        state.r[key] = spread
        ref_of[key] = node
        _maybe_enqueue(state, node, 1.0, r_max)
    else:
        for nref, w in zip(refs, weights):
            nkey = nref.ext()
            state.r[nkey] = state.r.get(nkey, 0.0) + spread * float(w) / total
            ref_of[nkey] = nref
        for nref in refs:
            nrefs, nweights = provider.neighbors(nref)
            _maybe_enqueue(state, nref, _wdeg(nweights), r_max)
    state.pushes += 1


def _advance_one_push(
    state: _PushState,
    provider: Provider,
    ref_of: dict[tuple[int, int], NodeRef],
    config: PPRConfig,
) -> NodeRef | None:
    """Pop the next push target, honoring the max_pushes budget.

    Returns the target to push, or None when the seed is settled (all
    residuals under threshold) or just got truncated.
    """
    target = _pop_push_target(state, ref_of)
    if target is None:
        return None
    if state.pushes >= config.max_pushes:
        state.truncated = True
        return None
    return target


def _hop_labels(
    seed_ref: NodeRef, keys: list[tuple[int, int]], provider: Provider
) -> dict[tuple[int, int], int]:
    """BFS depth from the seed restricted to the sampled support.

    Paths through unsampled nodes are not explored, so labels are an upper
    bound; unreachable support nodes get 255.
    """
    support = set(keys)
    depth = {seed_ref.ext(): 0}
    frontier = [seed_ref]
    d = 0
    while frontier and len(depth) <= len(support):
        d += 1
        nxt: list[NodeRef] = []
        for node in frontier:
            refs, _ = provider.neighbors(node)
            for nref in refs:
                k = nref.ext()
                if k in support and k not in depth:
                    depth[k] = d
                    nxt.append(nref)
        frontier = nxt
    return {k: depth.get(k, 255) for k in keys}


def ppr_forward_push(
    graph_or_provider: HeteroGraph | Provider,
    seed: NodeRef | tuple[int, int],
    config: PPRConfig,
) -> NeighborSample:
    """Forward-push PPR approximation, top_k nodes by estimate.

    Maintains estimate p and residual r with r(seed)=1; repeatedly pushes the
    max-residual node v with r(v) > r_max*wdeg(v): p(v) += alpha*r(v), the
    rest spreads over out-neighbors proportional to edge weight. Stops early
    at max_pushes with the truncated flag set.
    """
    config.validate()
    provider, resolve = _as_provider(graph_or_provider, config)
    try:
        seed_ref = resolve(seed)
    except MissingNodeError as exc:
        return NeighborSample((seed[0], seed[1]), (), "ppr-push", error=str(exc))
    state = _PushState(seed_ref)
    ref_of = {seed_ref.ext(): seed_ref}
    _, sweights = provider.neighbors(seed_ref)
    _maybe_enqueue(state, seed_ref, _wdeg(sweights), config.r_max)
    while True:
        target = _advance_one_push(state, provider, ref_of, config)
        if target is None:
            break
        _apply_push(state, target, provider, ref_of, config.alpha, config.r_max)
    return _finalize_push(state, provider, ref_of, config)


def _finalize_push(
    state: _PushState,
    provider: Provider,
    ref_of: dict[tuple[int, int], NodeRef],
    config: PPRConfig,
) -> NeighborSample:
    ranked = sorted(state.p.items(), key=lambda kv: (-kv[1], kv[0]))
    seed_key = state.seed_ref.ext()
    keep = [(k, s) for k, s in ranked if config.include_seed or k != seed_key]
    keep = keep[: config.top_k]
    hops = _hop_labels(state.seed_ref, [k for k, _ in keep], provider)
    entries = tuple(
        SampleEntry(ref_of[k], float(s), hops[k] if k != seed_key else 0) for k, s in keep
    )
    return NeighborSample(
        state.seed_ref, entries, "ppr-push", truncated=state.truncated
    )


def _as_provider(
    graph_or_provider: HeteroGraph | Provider, config: PPRConfig
) -> tuple[Provider, Callable]:
    if isinstance(graph_or_provider, HeteroGraph):
        provider = LocalAdjacency(graph_or_provider, weighted=config.weighted)
        return provider, graph_or_provider.resolve
    provider = graph_or_provider
    return provider, provider.resolve  # remote providers resolve via ownership map


def ppr_forward_push_batch(
    graph_or_provider: HeteroGraph | Provider,
    seeds: Sequence[NodeRef | tuple[int, int]],
    config: PPRConfig,
) -> list[NeighborSample]:
    """Consolidated-push batch variant; per-seed results are bit-identical
    to sequential ``ppr_forward_push``.

    Each round advances every active seed by one push; the distinct push
    targets of a round share one adjacency fetch. Per-seed push order (and
    therefore floating-point arithmetic order) matches the sequential path
    exactly.
    """
    if not seeds:
        raise ValueError("seeds must be non-empty")
    config.validate()
    provider, resolve = _as_provider(graph_or_provider, config)
    states: list[_PushState | None] = []
    errors: dict[int, NeighborSample] = {}
    ref_of: dict[tuple[int, int], NodeRef] = {}
    for i, seed in enumerate(seeds):
        try:
            seed_ref = resolve(seed)
        except MissingNodeError as exc:
            errors[i] = NeighborSample((seed[0], seed[1]), (), "ppr-push", error=str(exc))
            states.append(None)
            continue
        st = _PushState(seed_ref)
        ref_of[seed_ref.ext()] = seed_ref
        _, sweights = provider.neighbors(seed_ref)
        _maybe_enqueue(st, seed_ref, _wdeg(sweights), config.r_max)
        states.append(st)
    active = [st for st in states if st is not None]
    while active:
        # consolidate this round: collect each active seed's next target first
        targets: list[tuple[_PushState, NodeRef]] = []
        still = []
        for st in active:
            tgt = _advance_one_push(st, provider, ref_of, config)
            if tgt is None:
                continue
            targets.append((st, tgt))
            still.append(st)
        for _, tgt in targets:
            provider.neighbors(tgt)  # one shared fetch per distinct node
        for st, tgt in targets:
            _apply_push(st, tgt, provider, ref_of, config.alpha, config.r_max)
        active = still
    out: list[NeighborSample] = []
    for i, st in enumerate(states):
        if st is None:
            out.append(errors[i])
        else:
            out.append(_finalize_push(st, provider, ref_of, config))
    return out


# -- 2-hop random walk PPR -------------------------------------------------------


class _Ball:
    """2-hop ball around a seed, flattened to a local CSR for the walk."""

    def __init__(self, provider: Provider, seed_ref: NodeRef):
        one_hop, _ = provider.neighbors(seed_ref)
        members: dict[tuple[int, int], NodeRef] = {seed_ref.ext(): seed_ref}
        for ref in one_hop:
            members[ref.ext()] = ref
        for ref in one_hop:
            two_hop, _ = provider.neighbors(ref)
            for r2 in two_hop:
                members.setdefault(r2.ext(), r2)
        keys = sorted(members)
        self.refs = [members[k] for k in keys]
        self.local = {k: i for i, k in enumerate(keys)}
        self.seed_local = self.local[seed_ref.ext()]
        self.one_hop = {r.ext() for r in one_hop}

        indptr = [0]
        dest: list[int] = []
        cum: list[float] = []
        for ref in self.refs:
            refs, weights = provider.neighbors(ref)
            if len(refs) == 0:
                # dangling: self-loop
                dest.append(self.local[ref.ext()])
                cum.append(1.0)
            else:
                total = float(weights.sum())
                c = 0.0
                for nref, w in zip(refs, weights):
                    c += float(w) / total
                    # leaving the ball restarts the walk at the seed
                    dest.append(self.local.get(nref.ext(), self.seed_local))
                    cum.append(min(c, 1.0))
                cum[-1] = 1.0
            indptr.append(len(dest))
        self.indptr = np.array(indptr, dtype=np.int64)
        self.dest = np.array(dest, dtype=np.int64)
        # globally sorted search array: row index + within-row cumulative weight
        row_of = np.repeat(np.arange(len(self.refs)), np.diff(self.indptr))
        self.search = row_of.astype(np.float64) + np.array(cum, dtype=np.float64)

    def step(self, pos: np.ndarray, u: np.ndarray) -> np.ndarray:
        slots = np.searchsorted(self.search, pos.astype(np.float64) + u, side="left")
        return self.dest[slots]


def ppr_two_hop_random_walk(
    graph_or_provider: HeteroGraph | Provider,
    seed: NodeRef | tuple[int, int],
    config: WalkConfig,
) -> NeighborSample:
    """Restart-walk PPR estimate confined to the seed's 2-hop ball.

    Simulates num_walks alpha-restart walk segments; any step that would
    leave the 2-hop ball restarts at the seed instead. Scores are visit
    fractions (they sum to 1 over all visited nodes); the top_k by score
    among ball nodes are returned.
    """
    config.validate()
    if isinstance(graph_or_provider, HeteroGraph):
        provider = LocalAdjacency(graph_or_provider, weighted=config.weighted)
        resolve = graph_or_provider.resolve
    else:
        provider = graph_or_provider
        resolve = provider.resolve
    try:
        seed_ref = resolve(seed)
    except MissingNodeError as exc:
        return NeighborSample((seed[0], seed[1]), (), "ppr-2hop", error=str(exc))

    ball = _Ball(provider, seed_ref)
    gen = _rng_for(config.rng_seed, seed_ref)
    counts = np.zeros(len(ball.refs), dtype=np.int64)
    pos = np.full(config.num_walks, ball.seed_local, dtype=np.int64)
    counts[ball.seed_local] += config.num_walks  # step 0 of every walk
    total = config.num_walks
    while len(pos):
        survive = gen.random(len(pos)) >= config.alpha
        pos = pos[survive]
        if not len(pos):
            break
        pos = ball.step(pos, gen.random(len(pos)))
        np.add.at(counts, pos, 1)
        total += len(pos)

    scores = counts / float(total)
    order = sorted(
        range(len(ball.refs)), key=lambda i: (-scores[i], ball.refs[i].ext())
    )
    entries: list[SampleEntry] = []
    for i in order:
        ref = ball.refs[i]
        if scores[i] <= 0.0:
            break
        if ref.ext() == seed_ref.ext():
            if not config.include_seed:
                continue
            hop = 0
        else:
            hop = 1 if ref.ext() in ball.one_hop else 2
        entries.append(SampleEntry(ref, float(scores[i]), hop))
        if len(entries) == config.top_k:
            break
    return NeighborSample(seed_ref, tuple(entries), "ppr-2hop")


# -- temporal sampling -----------------------------------------------------------


def sample_temporal_last_n(
    graph: HeteroGraph,
    node: NodeRef | tuple[int, int],
    edge_type: int,
    before_ts: int | float,
    n: int | None,
) -> list[tuple[NodeRef, int]]:
    """The n most recent edges before ``before_ts``, ascending in time.

    ``before_ts=math.inf`` and ``n=None`` are the full-adjacency sentinels.
    """
    if n is not None and n < 1:
        raise ValueError("n must be >= 1 (or None for all)")
    ref = graph.resolve(node)
    cut = graph.temporal_cut(ref, edge_type, before_ts)
    lo = 0 if n is None else max(0, len(cut) - n)
    out = []
    for i in range(lo, len(cut)):
        out.append(
            (
                NodeRef(int(cut.dst_type[i]), int(cut.dst_id[i]), int(cut.dst_index[i])),
                int(cut.timestamp[i]),
            )
        )
    return out
