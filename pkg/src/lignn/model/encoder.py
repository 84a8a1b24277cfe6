"""SAGE-style encoder: per-type feature projection, neighborhood aggregation,
and hop-wise combine layers.

The batched path runs on the autograd tape over level-flattened sample trees;
``sage_encode`` is the single-seed wrapper. Aggregators also exist as plain
vector functions matching the batched math one-to-one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from ..graph import HeteroGraph, NodeRef
from ..samplers import NeighborSample
from . import autograd as ag
from .params import ModelConfig, ParamStore


def mean_aggregate(
    neighbor_embeddings: Sequence[np.ndarray], weights: Sequence[float] | None = None
) -> tuple[np.ndarray, bool]:
    """(Weighted) arithmetic mean; empty input gives (zeros-flagged, True).

    The zero vector for the empty case takes its dimension from weights-less
    callers via an empty (0,)-dim guard, so callers should handle the flag.
    """
    if len(neighbor_embeddings) == 0:
        return np.zeros(0), True
    mat = np.stack([np.asarray(v, dtype=np.float64) for v in neighbor_embeddings])
    if weights is None:
        return mat.mean(axis=0), False
    w = np.asarray(weights, dtype=np.float64)
    if w.shape[0] != mat.shape[0]:
        raise ValueError("weights length must match neighbor count")
    total = w.sum()
    if total <= 0:
        raise ValueError("weight sum must be positive")
    return (mat * w[:, None]).sum(axis=0) / total, False


def attention_aggregate(
    center: np.ndarray,
    neighbor_embeddings: Sequence[np.ndarray],
    w_query: np.ndarray,
    w_key: np.ndarray,
    include_center: bool = False,
) -> tuple[np.ndarray, bool]:
    """Scaled dot-product attention pool over the neighbor set.

    score_i = (center W_q) . (n_i W_k) / sqrt(d_att); output is the
    softmax-weighted sum of the neighbor embeddings themselves. The
    self-attention variant adds the center to the key/value set. An empty
    neighborhood returns the center embedding, flagged.
    """
    center = np.asarray(center, dtype=np.float64)
    values = [np.asarray(v, dtype=np.float64) for v in neighbor_embeddings]
    if include_center:
        values = values + [center]
    if len(values) == 0:
        return center.copy(), True
    mat = np.stack(values)
    d_att = w_query.shape[1]
    q = center @ w_query
    scores = (mat @ w_key) @ q / np.sqrt(d_att)
    shifted = np.exp(scores - scores.max())
    att = shifted / shifted.sum()
    return att @ mat, False


class HopEntry(NamedTuple):
    ref: NodeRef
    score: float


def hops_from_samples(
    samples: NeighborSample | Sequence[NeighborSample], flatten: bool = False
) -> list[list[HopEntry]]:
    """Normalize sampler output to per-hop entry lists.

    A per-hop list (multi-hop samplers) maps hop by position. A single flat
    sample (PPR strategies) is split by hop labels, or with ``flatten`` all
    entries become the one-hop neighborhood (a one-hop encoder aggregates
    the whole PPR-selected support directly).
    """
    if isinstance(samples, NeighborSample):
        if flatten:
            return [[HopEntry(e.node, e.score) for e in samples.entries]]
        by_hop: dict[int, list[HopEntry]] = {}
        for e in samples.entries:
            by_hop.setdefault(max(1, e.hop), []).append(HopEntry(e.node, e.score))
        if not by_hop:
            return []
        return [by_hop.get(h, []) for h in range(1, max(by_hop) + 1)]
    return [[HopEntry(e.node, e.score) for e in s.entries] for s in samples]


@dataclass
class EncodeBatch:
    """Level-flattened compute structure for a batch of seeds.

    Level 0 holds the B seeds; level j the sampled hop-j nodes of every seed
    (one slot per (seed, node)). ``edges[j]`` links level-j parents to their
    level-(j+1) children by graph adjacency within the same seed's sample.
    """

    level_refs: list[list[NodeRef]]
    level_seed: list[np.ndarray]           # owning seed per slot
    edges: list[tuple[np.ndarray, np.ndarray]]  # (parent_slot, child_slot)
    missing_features: int = 0
    orphan_nodes: int = 0


def build_encode_batch(
    graph: HeteroGraph,
    seeds: Sequence[NodeRef],
    hop_lists: Sequence[Sequence[Sequence[HopEntry]]],
    depth: int,
    flat_attach: bool = False,
) -> EncodeBatch:
    """Assemble levels and parent/child links for a batch.

    ``flat_attach`` hangs every sampled node directly under its seed (used
    for PPR samples feeding a one-hop encoder, where selection is by score
    rather than strict adjacency). Otherwise hop-h nodes attach to the hop-
    (h-1) nodes they are graph out-neighbors of; nodes with no sampled
    parent are dropped and counted.
    """
    level_refs: list[list[NodeRef]] = [list(seeds)]
    level_seed: list[list[int]] = [list(range(len(seeds)))]
    edges: list[tuple[list[int], list[int]]] = []
    neighbor_cache: dict[tuple[int, int], set[tuple[int, int]]] = {}

    def out_set(ref: NodeRef) -> set[tuple[int, int]]:
        key = ref.ext()
        hit = neighbor_cache.get(key)
        if hit is None:
            refs, _ = graph.merged_neighbors(ref)
            hit = {r.ext() for r in refs}
            neighbor_cache[key] = hit
        return hit

    orphans = 0
    for h in range(depth):
        refs_h: list[NodeRef] = []
        seed_h: list[int] = []
        parent_idx: list[int] = []
        child_idx: list[int] = []
        # slots of the previous level grouped by seed
        prev_slots: dict[int, list[int]] = {}
        for slot, s in enumerate(level_seed[h]):
            prev_slots.setdefault(s, []).append(slot)
        for s in range(len(seeds)):
            entries = hop_lists[s][h] if h < len(hop_lists[s]) else []
            if not entries:
                continue
            parents = prev_slots.get(s, [])
            for entry in entries:
                child_slot = len(refs_h)
                if flat_attach and h == 0:
                    links = [parents[0]] if parents else []
                else:
                    links = [
                        p for p in parents if entry.ref.ext() in out_set(level_refs[h][p])
                    ]
                if not links:
                    orphans += 1
                    continue
                refs_h.append(entry.ref)
                seed_h.append(s)
                for p in links:
                    parent_idx.append(p)
                    child_idx.append(child_slot)
        level_refs.append(refs_h)
        level_seed.append(seed_h)
        edges.append((parent_idx, child_idx))

    return EncodeBatch(
        level_refs,
        [np.asarray(s, dtype=np.int64) for s in level_seed],
        [(np.asarray(p, dtype=np.int64), np.asarray(c, dtype=np.int64)) for p, c in edges],
        orphan_nodes=orphans,
    )


class SageEncoder:
    """Tape-based batched encoder for one tower (side) of the model."""

    def __init__(self, graph: HeteroGraph, config: ModelConfig):
        self.graph = graph
        self.config = config

    def _project_level(
        self,
        taped: dict[str, ag.Tensor],
        side: str,
        refs: Sequence[NodeRef],
        batch: EncodeBatch,
    ) -> ag.Tensor:
        """Per-type feature projection (+ id embedding), back in slot order."""
        cfg = self.config
        by_type: dict[int, list[int]] = {}
        for i, ref in enumerate(refs):
            by_type.setdefault(ref.node_type, []).append(i)
        blocks: list[ag.Tensor] = []
        perm: list[int] = []
        for t in sorted(by_type):
            slots = by_type[t]
            feats = np.zeros((len(slots), cfg.feature_dims[t]))
            for row, slot in enumerate(slots):
                vec = self.graph.features_of(refs[slot])
                if vec is None:
                    batch.missing_features += 1
                else:
                    feats[row] = vec
            proj = ag.add(
                ag.matmul(ag.constant(feats), taped[f"{side}/proj/{t}/W"]),
                taped[f"{side}/proj/{t}/b"],
            )
            if cfg.id_embeddings:
                idx = np.array([refs[slot].index for slot in slots], dtype=np.int64)
                ids = ag.gather_rows(taped[f"{side}/id/{t}"], idx)
                proj = ag.concat([proj, ids], axis=1)
            blocks.append(proj)
            perm.extend(slots)
        stacked = blocks[0] if len(blocks) == 1 else ag.concat(blocks, axis=0)
        inv = np.empty(len(perm), dtype=np.int64)
        inv[np.asarray(perm)] = np.arange(len(perm))
        return ag.gather_rows(stacked, inv)

    def _aggregate(
        self,
        taped: dict[str, ag.Tensor],
        side: str,
        layer: int,
        parents: ag.Tensor,
        children: ag.Tensor | None,
        edge: tuple[np.ndarray, np.ndarray],
    ) -> ag.Tensor:
        cfg = self.config
        n_parents = parents.shape[0]
        parent_idx, child_idx = edge
        if cfg.aggregator == "mean":
            if children is None or len(child_idx) == 0:
                return ag.constant(np.zeros((n_parents, parents.shape[1])))
            rows = ag.gather_rows(children, child_idx)
            return ag.segment_mean(rows, parent_idx, n_parents)

        # attention variants: self_attention adds a parent self-edge
        if cfg.aggregator == "self_attention":
            if children is None:
                children_ext = parents
                child_idx = np.arange(n_parents, dtype=np.int64)
                parent_idx = np.arange(n_parents, dtype=np.int64)
            else:
                n_children = children.shape[0]
                children_ext = ag.concat([children, parents], axis=0)
                self_child = n_children + np.arange(n_parents, dtype=np.int64)
                parent_idx = np.concatenate([parent_idx, np.arange(n_parents, dtype=np.int64)])
                child_idx = np.concatenate([child_idx, self_child])
        else:
            children_ext = children

        if children_ext is None or len(child_idx) == 0:
            return parents  # empty neighborhood: fall back to the center

        wq = taped[f"{side}/att/{layer}/Wq"]
        wk = taped[f"{side}/att/{layer}/Wk"]
        d_att = wq.shape[1]
        q = ag.matmul(parents, wq)
        child_rows = ag.gather_rows(children_ext, child_idx)
        k = ag.matmul(child_rows, wk)
        q_per_edge = ag.gather_rows(q, parent_idx)
        scores = ag.div(
            ag.tsum(ag.mul(q_per_edge, k), axis=1), ag.constant(np.sqrt(d_att))
        )
        att = ag.segment_softmax(scores, parent_idx, n_parents)
        weighted = ag.mul(child_rows, ag.reshape(att, (-1, 1)))
        pooled = ag.segment_sum(weighted, parent_idx, n_parents)
        # parents with no edges keep their own embedding
        counts = np.bincount(parent_idx, minlength=n_parents)
        empty = (counts == 0).astype(np.float64).reshape(-1, 1)
        if empty.any():
            pooled = ag.add(
                ag.mul(pooled, ag.constant(1.0 - empty)), ag.mul(parents, ag.constant(empty))
            )
        return pooled

    def encode(
        self,
        taped: dict[str, ag.Tensor],
        side: str,
        batch: EncodeBatch,
    ) -> ag.Tensor:
        """Embeddings for the level-0 seeds, shape (B, embedding_dim)."""
        cfg = self.config
        depth = len(batch.level_refs) - 1
        emb = {
            (j, 0): self._project_level(taped, side, batch.level_refs[j], batch)
            for j in range(depth + 1)
            if len(batch.level_refs[j])
        }
        for k in range(1, cfg.hops + 1):
            for j in range(0, min(depth, cfg.hops - k) + 1):
                if (j, k - 1) not in emb:
                    continue
                parents = emb[(j, k - 1)]
                children = emb.get((j + 1, k - 1))
                edge = batch.edges[j] if j < len(batch.edges) else (
                    np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
                )
                agg = self._aggregate(taped, side, k, parents, children, edge)
                combined = ag.concat([parents, agg], axis=1)
                emb[(j, k)] = ag.tanh(
                    ag.add(
                        ag.matmul(combined, taped[f"{side}/combine/{k}/W"]),
                        taped[f"{side}/combine/{k}/b"],
                    )
                )
        return emb[(0, cfg.hops)]


def taped_params(store: ParamStore) -> dict[str, ag.Tensor]:
    return {name: ag.parameter(arr) for name, arr in store.items()}


def sage_encode(
    graph: HeteroGraph,
    seed: NodeRef | tuple[int, int],
    samples: NeighborSample | Sequence[NeighborSample],
    store: ParamStore,
    config: ModelConfig,
    side: str = "src",
    flat_attach: bool | None = None,
) -> np.ndarray:
    """Encode one node given its sampled neighborhood (deterministic)."""
    seed_ref = graph.resolve(seed)
    if flat_attach is None:
        flat_attach = isinstance(samples, NeighborSample) and config.hops == 1
    hops = hops_from_samples(samples, flatten=flat_attach)
    batch = build_encode_batch(graph, [seed_ref], [hops], config.hops, flat_attach)
    encoder = SageEncoder(graph, config)
    taped = {name: ag.constant(arr) for name, arr in store.items()}
    out = encoder.encode(taped, config.side_for(side), batch)
    return out.data[0].copy()
