"""Sampling strategies: fan-out distributions, PPR approximations, temporal."""

from __future__ import annotations

import math

import numpy as np
import pytest

from lignn.graph import NodeRef
from lignn.samplers import (
    PPRConfig,
    WalkConfig,
    ppr_exact,
    ppr_forward_push,
    ppr_forward_push_batch,
    ppr_two_hop_random_walk,
    sample_random_multihop,
    sample_temporal_last_n,
    sample_weighted_multihop,
)

from conftest import build, edge_row, random_weighted_digraph


def star(n_leaves, weights=None):
    rows = []
    for i in range(n_leaves):
        w = 1.0 if weights is None else weights[i]
        rows.append(edge_row(0, 0, 0, 0, i + 1, w))
    graph, _ = build(rows)
    return graph


def two_cycle():
    graph, _ = build([edge_row(0, 0, 0, 0, 1, 1.0), edge_row(0, 1, 0, 0, 0, 1.0)])
    return graph


class TestRandomMultihop:
    def test_undersized_frontier_returns_all(self):
        graph = star(3)
        [[hop]] = sample_random_multihop(graph, [(0, 0)], [5], rng_seed=1)
        assert len(hop.entries) == 3

    def test_zero_fanout(self):
        graph = star(3)
        [[hop]] = sample_random_multihop(graph, [(0, 0)], [0], rng_seed=1)
        assert hop.entries == ()

    def test_deterministic_given_seed(self):
        graph = star(10)
        a = sample_random_multihop(graph, [(0, 0)], [4], rng_seed=7)
        b = sample_random_multihop(graph, [(0, 0)], [4], rng_seed=7)
        assert a[0][0].entries == b[0][0].entries
        c = sample_random_multihop(graph, [(0, 0)], [4], rng_seed=8)
        assert a[0][0].entries != c[0][0].entries

    def test_unknown_seed_is_isolated_error(self):
        graph = star(3)
        out = sample_random_multihop(graph, [(0, 999), (0, 0)], [2], rng_seed=1)
        assert out[0][0].error is not None
        assert out[1][0].error is None

    def test_star_frequencies_binomial(self):
        # each leaf appears with probability fanout/L; 10k reseeded draws
        leaves, fanout, trials = 8, 2, 10_000
        graph = star(leaves)
        counts = np.zeros(leaves)
        for t in range(trials):
            [[hop]] = sample_random_multihop(graph, [(0, 0)], [fanout], rng_seed=t)
            for e in hop.entries:
                counts[e.node.node_id - 1] += 1
        p = fanout / leaves
        sigma = math.sqrt(trials * p * (1 - p))
        assert np.all(np.abs(counts - trials * p) <= 3.5 * sigma)

    def test_two_hop_uses_frontier_union(self):
        # path 0 -> 1 -> 2: hop 2 must come from neighbors of hop-1 nodes
        rows = [edge_row(0, 0, 0, 0, 1, 1.0), edge_row(0, 1, 0, 0, 2, 1.0)]
        graph, _ = build(rows)
        [hops] = sample_random_multihop(graph, [(0, 0)], [1, 1], rng_seed=0)
        assert [e.node.node_id for e in hops[0].entries] == [1]
        assert [e.node.node_id for e in hops[1].entries] == [2]
        assert [e.hop for e in hops[1].entries] == [2]


class TestWeightedMultihop:
    def test_zero_weight_never_sampled(self):
        graph = star(2, weights=[1.0, 0.5])
        mult = {0: 1.0}
        for t in range(50):
            [[hop]] = sample_weighted_multihop(
                graph, [(0, 0)], [1], {0: 1.0}, rng_seed=t
            )
            assert len(hop.entries) == 1
        # now force neighbor 2's contribution to zero via edge-type multiplier
        rows = [edge_row(0, 0, 0, 0, 1, 1.0), edge_row(0, 0, 1, 0, 2, 5.0)]
        graph2, _ = build(rows)
        for t in range(50):
            [[hop]] = sample_weighted_multihop(
                graph2, [(0, 0)], [1], {0: 1.0, 1: 0.0}, rng_seed=t
            )
            assert [e.node.node_id for e in hop.entries] == [1]

    def test_all_zero_probabilities_empty_hop(self):
        graph = star(3)
        [[hop]] = sample_weighted_multihop(graph, [(0, 0)], [2], {0: 0.0}, rng_seed=1)
        assert hop.entries == ()

    def test_equal_weights_uniform_chi_square(self):
        leaves, trials = 6, 10_000
        graph = star(leaves)
        counts = np.zeros(leaves)
        for t in range(trials):
            [[hop]] = sample_weighted_multihop(graph, [(0, 0)], [1], None, rng_seed=t)
            counts[hop.entries[0].node.node_id - 1] += 1
        expected = trials / leaves
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        # df=5; P(chi2 > 20.5) ~ 0.001
        assert chi2 < 20.5

    def test_three_to_one_ratio(self):
        trials = 10_000
        graph = star(2, weights=[3.0, 1.0])
        first = 0
        for t in range(trials):
            [[hop]] = sample_weighted_multihop(graph, [(0, 0)], [1], None, rng_seed=t)
            first += hop.entries[0].node.node_id == 1
        p = 0.75
        sigma = math.sqrt(trials * p * (1 - p))
        assert abs(first - trials * p) <= 3.5 * sigma

    def test_negative_multiplier_rejected(self):
        graph = star(2)
        with pytest.raises(ValueError):
            sample_weighted_multihop(graph, [(0, 0)], [1], {0: -1.0}, rng_seed=0)


class TestPPRExact:
    def test_isolated_node_self_loop(self):
        graph, _ = build([], ["0\t5\t0,0,0,0\n"])
        res = ppr_exact(graph, (0, 5), alpha=0.3)
        assert res.score_of(graph.node_ref(0, 5)) == pytest.approx(1.0)
        assert res.scores.sum() == pytest.approx(1.0, abs=1e-12)

    def test_two_cycle_closed_form(self):
        graph = two_cycle()
        res = ppr_exact(graph, (0, 0), alpha=0.5, num_iterations=200)
        # pi(s) = alpha / (1 - (1-alpha)^2)
        assert res.score_of(graph.node_ref(0, 0)) == pytest.approx(2.0 / 3.0, abs=1e-10)
        assert res.score_of(graph.node_ref(0, 1)) == pytest.approx(1.0 / 3.0, abs=1e-10)

    def test_stochasticity(self):
        rng = np.random.default_rng(5)
        graph, _ = build(random_weighted_digraph(rng, 40, 3.0))
        res = ppr_exact(graph, (0, 0), alpha=0.15)
        assert res.scores.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(res.scores >= 0)

    def test_bad_iterations(self):
        graph = two_cycle()
        with pytest.raises(ValueError):
            ppr_exact(graph, (0, 0), alpha=0.5, num_iterations=0)


class TestForwardPush:
    def test_dangling_seed_accumulates_all_mass(self):
        graph, _ = build([], ["0\t5\t0,0,0,0\n"])
        cfg = PPRConfig(alpha=0.5, r_max=1e-6, top_k=5, include_seed=True)
        sample = ppr_forward_push(graph, (0, 5), cfg)
        assert len(sample.entries) == 1
        assert sample.entries[0].score == pytest.approx(1.0, abs=1e-6)
        assert not sample.truncated

    def test_two_cycle_matches_exact(self):
        graph = two_cycle()
        cfg = PPRConfig(alpha=0.5, r_max=1e-9, top_k=5, include_seed=True)
        sample = ppr_forward_push(graph, (0, 0), cfg)
        scores = {e.node.node_id: e.score for e in sample.entries}
        assert scores[0] == pytest.approx(2.0 / 3.0, abs=1e-6)
        assert scores[1] == pytest.approx(1.0 / 3.0, abs=1e-6)

    def test_residual_bound_against_exact(self):
        rng = np.random.default_rng(17)
        lines = random_weighted_digraph(rng, 60, 4.0, symmetric=True)
        graph, _ = build(lines)
        r_max = 1e-6
        cfg = PPRConfig(alpha=0.15, r_max=r_max, top_k=10_000, include_seed=True)
        sample = ppr_forward_push(graph, (0, 0), cfg)
        exact = ppr_exact(graph, (0, 0), alpha=0.15, num_iterations=400)
        approx = {e.node.ext(): e.score for e in sample.entries}
        for gi in range(exact.index.n):
            ref = exact.index.ref(gi)
            wdeg = graph.merged_neighbors(ref)[1].sum() or 1.0
            diff = exact.scores[gi] - approx.get(ref.ext(), 0.0)
            assert diff >= -1e-12  # 0 up to float64 accumulation
            assert diff <= r_max * wdeg + 1e-15

    def test_truncation_flag(self):
        rng = np.random.default_rng(2)
        graph, _ = build(random_weighted_digraph(rng, 30, 3.0))
        cfg = PPRConfig(alpha=0.15, r_max=1e-9, top_k=5, max_pushes=3)
        sample = ppr_forward_push(graph, (0, 0), cfg)
        assert sample.truncated

    def test_seed_excluded_by_default(self):
        graph = two_cycle()
        sample = ppr_forward_push(graph, (0, 0), PPRConfig(alpha=0.5, r_max=1e-6, top_k=5))
        assert all(e.node.node_id != 0 for e in sample.entries)

    def test_unknown_seed_error(self):
        graph = two_cycle()
        sample = ppr_forward_push(graph, (0, 42), PPRConfig())
        assert sample.error is not None


class TestForwardPushBatch:
    def test_batch_of_one_equals_single(self):
        graph = two_cycle()
        cfg = PPRConfig(alpha=0.5, r_max=1e-8, top_k=5, include_seed=True)
        single = ppr_forward_push(graph, (0, 0), cfg)
        [batched] = ppr_forward_push_batch(graph, [(0, 0)], cfg)
        assert single.entries == batched.entries

    def test_batch_bit_identical_to_sequential(self):
        rng = np.random.default_rng(23)
        graph, _ = build(random_weighted_digraph(rng, 80, 4.0))
        cfg = PPRConfig(alpha=0.15, r_max=1e-5, top_k=50, include_seed=True)
        seeds = [(0, i) for i in range(10)]
        sequential = [ppr_forward_push(graph, s, cfg) for s in seeds]
        batched = ppr_forward_push_batch(graph, seeds, cfg)
        for a, b in zip(sequential, batched):
            assert len(a.entries) == len(b.entries)
            for ea, eb in zip(a.entries, b.entries):
                assert ea.node.ext() == eb.node.ext()
                assert ea.score == eb.score  # bit-identical, no tolerance

    def test_unknown_seed_isolated(self):
        rng = np.random.default_rng(29)
        graph, _ = build(random_weighted_digraph(rng, 20, 3.0))
        seeds = [(0, i) for i in range(9)] + [(0, 999)]
        out = ppr_forward_push_batch(graph, seeds, PPRConfig(r_max=1e-4))
        assert sum(1 for s in out if s.error is None) == 9
        assert out[9].error is not None


class TestTwoHopWalk:
    def test_isolated_seed(self):
        graph, _ = build([], ["0\t5\t0,0,0,0\n"])
        cfg = WalkConfig(num_walks=100, rng_seed=3, include_seed=True)
        sample = ppr_two_hop_random_walk(graph, (0, 5), cfg)
        assert len(sample.entries) == 1
        assert sample.entries[0].score == pytest.approx(1.0)

    def test_two_hop_restriction_on_path(self):
        rows = [
            edge_row(0, 0, 0, 0, 1, 1.0),
            edge_row(0, 1, 0, 0, 2, 1.0),
            edge_row(0, 2, 0, 0, 3, 1.0),
        ]
        graph, _ = build(rows)
        cfg = WalkConfig(num_walks=20_000, alpha=0.15, top_k=10, rng_seed=5)
        sample = ppr_two_hop_random_walk(graph, (0, 0), cfg)
        ids = {e.node.node_id for e in sample.entries}
        assert 3 not in ids  # three hops away
        assert ids == {1, 2}

    def test_deterministic(self):
        rng = np.random.default_rng(31)
        graph, _ = build(random_weighted_digraph(rng, 40, 4.0))
        cfg = WalkConfig(num_walks=5_000, rng_seed=11, top_k=10)
        a = ppr_two_hop_random_walk(graph, (0, 0), cfg)
        b = ppr_two_hop_random_walk(graph, (0, 0), cfg)
        assert a.entries == b.entries

    def test_scores_form_distribution(self):
        rng = np.random.default_rng(37)
        graph, _ = build(random_weighted_digraph(rng, 40, 4.0))
        cfg = WalkConfig(num_walks=5_000, rng_seed=13, top_k=10_000, include_seed=True)
        sample = ppr_two_hop_random_walk(graph, (0, 0), cfg)
        assert sum(e.score for e in sample.entries) == pytest.approx(1.0, abs=1e-9)

    def test_hop_labels(self):
        rows = [edge_row(0, 0, 0, 0, 1, 1.0), edge_row(0, 1, 0, 0, 2, 1.0)]
        graph, _ = build(rows)
        cfg = WalkConfig(num_walks=5_000, rng_seed=17, top_k=10)
        sample = ppr_two_hop_random_walk(graph, (0, 0), cfg)
        by_id = {e.node.node_id: e.hop for e in sample.entries}
        assert by_id[1] == 1
        assert by_id[2] == 2

    def test_overlap_with_exact_restricted(self):
        # single-trial version of the acceptance criterion
        rng = np.random.default_rng(41)
        graph, _ = build(random_weighted_digraph(rng, 60, 6.0))
        cfg = WalkConfig(num_walks=100_000, alpha=0.15, top_k=10, rng_seed=19)
        sample = ppr_two_hop_random_walk(graph, (0, 0), cfg)
        walk_top = [e.node.ext() for e in sample.entries]

        exact = ppr_exact(graph, (0, 0), alpha=0.15)
        ball = two_hop_ball(graph, (0, 0))
        ranked = sorted(
            (k for k in ball if k != (0, 0)),
            key=lambda k: (-exact.score_of(graph.resolve(k)), k),
        )[:10]
        overlap = len(set(walk_top) & set(ranked))
        assert overlap >= 9


def two_hop_ball(graph, seed):
    """BFS oracle: external keys of nodes within 2 hops of the seed."""
    seed_ref = graph.resolve(seed)
    ball = {seed_ref.ext()}
    frontier = [seed_ref]
    for _ in range(2):
        nxt = []
        for node in frontier:
            refs, _ = graph.merged_neighbors(node)
            for r in refs:
                if r.ext() not in ball:
                    ball.add(r.ext())
                    nxt.append(r)
        frontier = nxt
    return ball


class TestTemporalLastN:
    def _graph(self, stamps):
        rows = [edge_row(0, 1, 0, 1, 100 + i, 0.5, ts=t) for i, t in enumerate(stamps)]
        graph, _ = build(rows)
        return graph

    def test_fewer_than_n(self):
        graph = self._graph([10, 20, 30])
        out = sample_temporal_last_n(graph, (0, 1), 0, before_ts=100, n=10)
        assert [ts for _, ts in out] == [10, 20, 30]

    def test_before_first_event(self):
        graph = self._graph([10, 20, 30])
        assert sample_temporal_last_n(graph, (0, 1), 0, before_ts=5, n=3) == []

    def test_last_n_matches_linear_scan(self):
        rng = np.random.default_rng(43)
        stamps = sorted(int(t) for t in rng.integers(0, 10_000, size=100))
        graph = self._graph(stamps)
        t = stamps[70]
        out = sample_temporal_last_n(graph, (0, 1), 0, before_ts=t, n=10)
        oracle = [s for s in stamps if s < t][-10:]
        assert [ts for _, ts in out] == oracle

    def test_full_adjacency_sentinels(self):
        graph = self._graph([10, 20, 30])
        out = sample_temporal_last_n(graph, (0, 1), 0, before_ts=math.inf, n=None)
        assert len(out) == 3

    def test_unknown_node(self):
        graph = self._graph([10])
        from lignn.graph import MissingNodeError

        with pytest.raises(MissingNodeError):
            sample_temporal_last_n(graph, (0, 99), 0, before_ts=5, n=1)
