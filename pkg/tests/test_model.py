"""Model: aggregators, encoder, decoders, checkpoint, gradient smoke checks."""

from __future__ import annotations

import math

import numpy as np
import pytest

from lignn.model import (
    DecoderKind,
    LinkPredictionModel,
    ModelConfig,
    PairBatch,
    ParamStore,
    attention_aggregate,
    bce_loss,
    decode_cosine,
    decode_in_batch_negatives,
    hops_from_samples,
    init_params,
    mean_aggregate,
    sage_encode,
)
from lignn.samplers import sample_random_multihop

from conftest import build, edge_row, node_row
from fdcheck import central_diff, max_relative_error


class TestMeanAggregate:
    def test_two_unit_vectors(self):
        out, empty = mean_aggregate([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        np.testing.assert_allclose(out, [0.5, 0.5])
        assert not empty

    def test_single_neighbor_identity(self):
        v = np.array([0.3, -0.7, 2.0])
        out, _ = mean_aggregate([v])
        np.testing.assert_allclose(out, v)

    def test_empty_flagged(self):
        _, empty = mean_aggregate([])
        assert empty

    def test_matches_compensated_summation(self):
        rng = np.random.default_rng(5)
        vecs = [rng.normal(size=6) * 10.0 ** rng.integers(-3, 4) for _ in range(10)]
        out, _ = mean_aggregate(vecs)
        oracle = np.array([math.fsum(v[j] for v in vecs) / len(vecs) for j in range(6)])
        np.testing.assert_allclose(out, oracle, atol=1e-12)

    def test_weighted_mean(self):
        out, _ = mean_aggregate([np.array([1.0, 0.0]), np.array([0.0, 1.0])], weights=[3.0, 1.0])
        np.testing.assert_allclose(out, [0.75, 0.25])


class TestAttentionAggregate:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.wq = rng.normal(size=(4, 3))
        self.wk = rng.normal(size=(4, 3))

    def test_identical_neighbors_pass_through(self):
        v = np.array([0.2, -0.4, 0.6, 0.1])
        center = np.array([1.0, 0.0, 0.0, 0.0])
        out, _ = attention_aggregate(center, [v, v, v], self.wq, self.wk)
        np.testing.assert_allclose(out, v, atol=1e-12)

    def test_single_neighbor(self):
        v = np.array([0.5, 0.5, -0.5, 0.0])
        out, _ = attention_aggregate(np.ones(4), [v], self.wq, self.wk)
        np.testing.assert_allclose(out, v)

    def test_empty_returns_center_flagged(self):
        center = np.array([1.0, 2.0, 3.0, 4.0])
        out, empty = attention_aggregate(center, [], self.wq, self.wk)
        assert empty
        np.testing.assert_allclose(out, center)

    def test_matches_independent_softmax_oracle(self):
        rng = np.random.default_rng(11)
        center = rng.normal(size=4)
        neighbors = [rng.normal(size=4) for _ in range(5)]
        out, _ = attention_aggregate(center, neighbors, self.wq, self.wk)
        # independently coded softmax-weighted sum
        q = center @ self.wq
        raw = [float((n @ self.wk) @ q) / math.sqrt(3) for n in neighbors]
        exps = [math.exp(r) for r in raw]
        z = sum(exps)
        oracle = sum((e / z) * n for e, n in zip(exps, neighbors))
        np.testing.assert_allclose(out, oracle, atol=1e-10)

    def test_self_attention_includes_center(self):
        center = np.array([1.0, 0.0, 0.0, 0.0])
        out, _ = attention_aggregate(center, [], self.wq, self.wk, include_center=True)
        np.testing.assert_allclose(out, center)


def star_graph_with_features(n_leaves, rng, leaf_features=None):
    rows = [edge_row(0, 0, 0, 1, i + 1, 1.0) for i in range(n_leaves)]
    nodes = [node_row(0, 0, rng.normal(size=4))]
    for i in range(n_leaves):
        f = leaf_features if leaf_features is not None else rng.normal(size=4)
        nodes.append(node_row(1, i + 1, f))
    graph, _ = build(rows, nodes)
    return graph


def config_for(graph, **kw) -> ModelConfig:
    base = ModelConfig(out_dim=6, hops=1, attention_dim=4, init_seed=3, **kw)
    return base.with_graph(graph)


class TestSageEncode:
    def test_zero_hops_is_projection_only(self):
        rng = np.random.default_rng(13)
        graph = star_graph_with_features(3, rng)
        from dataclasses import replace

        cfg = replace(config_for(graph), hops=0)
        store = init_params(cfg)
        ref = graph.node_ref(0, 0)
        out = sage_encode(graph, ref, [], store, cfg)
        expected = graph.features_of(ref) @ store["enc/proj/0/W"] + store["enc/proj/0/b"][0]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(17)
        graph = star_graph_with_features(5, rng)
        cfg = config_for(graph)
        store = init_params(cfg)
        samples = sample_random_multihop(graph, [(0, 0)], [5], rng_seed=1)[0]
        out1 = sage_encode(graph, (0, 0), samples, store, cfg)
        # permute the hop entries
        from lignn.samplers import NeighborSample

        perm = NeighborSample(
            samples[0].seed, tuple(reversed(samples[0].entries)), samples[0].strategy
        )
        out2 = sage_encode(graph, (0, 0), [perm], store, cfg)
        np.testing.assert_allclose(out1, out2, atol=1e-12)

    def test_matches_naive_recursion(self):
        rng = np.random.default_rng(19)
        # two-level chain: 0 -> {1, 2} -> ...
        rows = [
            edge_row(0, 0, 0, 0, 1, 1.0),
            edge_row(0, 0, 0, 0, 2, 1.0),
            edge_row(0, 1, 0, 0, 3, 1.0),
            edge_row(0, 2, 0, 0, 3, 1.0),
            edge_row(0, 2, 0, 0, 4, 1.0),
        ]
        nodes = [node_row(0, i, rng.normal(size=4)) for i in range(5)]
        graph, _ = build(rows, nodes)
        from dataclasses import replace

        cfg = replace(config_for(graph), hops=2)
        store = init_params(cfg)
        samples = sample_random_multihop(graph, [(0, 0)], [2, 3], rng_seed=5)[0]
        out = sage_encode(graph, (0, 0), samples, store, cfg)

        # independent naive recursion
        hop_sets = [
            [e.node for e in samples[0].entries],
            [e.node for e in samples[1].entries],
        ]

        def proj(ref):
            return graph.features_of(ref) @ store["enc/proj/0/W"] + store["enc/proj/0/b"][0]

        def children_of(ref, next_hop):
            outs = {r.ext() for r in graph.merged_neighbors(ref)[0]}
            return [c for c in next_hop if c.ext() in outs]

        def encode(ref, depth, layer):
            if layer == 0:
                return proj(ref)
            kids = children_of(ref, hop_sets[depth]) if depth < 2 else []
            if kids:
                agg = np.mean([encode(c, depth + 1, layer - 1) for c in kids], axis=0)
            else:
                prev = encode(ref, depth, layer - 1)
                agg = np.zeros_like(prev)
            h_self = encode(ref, depth, layer - 1)
            w = store[f"enc/combine/{layer}/W"]
            b = store[f"enc/combine/{layer}/b"][0]
            return np.tanh(np.concatenate([h_self, agg]) @ w + b)

        oracle = encode(graph.node_ref(0, 0), 0, 2)
        np.testing.assert_allclose(out, oracle, atol=1e-10)


class TestDecoders:
    def test_cosine_trivials(self):
        u = np.array([1.0, 2.0, 3.0])
        assert decode_cosine(u, u) == pytest.approx(1.0)
        assert decode_cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(0.0)
        assert decode_cosine(u, -u) == pytest.approx(-1.0)

    def test_cosine_scale_invariance(self):
        u, v = np.array([1.0, 2.0]), np.array([-1.0, 0.5])
        assert decode_cosine(3.0 * u, v) == pytest.approx(decode_cosine(u, 7.0 * v))

    def test_cosine_zero_norm_error(self):
        with pytest.raises(ValueError):
            decode_cosine(np.zeros(3), np.ones(3))

    def test_in_batch_orthonormal(self):
        eye = np.eye(3)
        res = decode_in_batch_negatives(eye, eye, temperature=1.0)
        np.testing.assert_allclose(res.logits, eye)
        expected = -math.log(math.e / (math.e + 2.0))
        assert res.loss == pytest.approx(expected, abs=1e-12)
        assert res.loss == pytest.approx(0.55144, abs=1e-5)

    def test_in_batch_all_equal(self):
        v = np.tile(np.array([0.3, 0.4]), (4, 1))
        res = decode_in_batch_negatives(v, v)
        assert res.loss == pytest.approx(math.log(4.0))

    def test_in_batch_duplicate_dst_columns(self):
        rng = np.random.default_rng(3)
        src = rng.normal(size=(3, 4))
        dst = rng.normal(size=(3, 4))
        dst[2] = dst[1]
        res = decode_in_batch_negatives(src, dst)
        np.testing.assert_allclose(res.logits[:, 1], res.logits[:, 2])

    def test_in_batch_needs_two(self):
        with pytest.raises(ValueError):
            decode_in_batch_negatives(np.ones((1, 2)), np.ones((1, 2)))


class TestBCE:
    def test_zero_score_positive_label(self):
        res = bce_loss(0.0, 1)
        assert res.loss == pytest.approx(math.log(2.0))
        assert res.grad == pytest.approx(-0.5)

    def test_saturated_positive(self):
        assert bce_loss(40.0, 1).loss == pytest.approx(0.0, abs=1e-12)

    def test_negative_label_softplus(self):
        res = bce_loss(1.5, 0)
        assert res.loss == pytest.approx(math.log1p(math.exp(1.5)), abs=1e-12)
        assert res.loss == pytest.approx(1.7014, abs=1e-4)

    def test_extreme_scores_stable(self):
        assert np.isfinite(bce_loss(800.0, 0).loss)
        assert np.isfinite(bce_loss(-800.0, 1).loss)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(23)
        store = ParamStore()
        store.add("a/W", rng.normal(size=(3, 4)))
        store.add("b", rng.normal(size=(7,)))
        path = tmp_path / "model.lgnn"
        store.save(str(path))
        loaded = ParamStore.load(str(path))
        assert loaded.names() == store.names()
        for name in store.names():
            np.testing.assert_array_equal(loaded[name], store[name])

    def test_magic_bytes(self, tmp_path):
        store = ParamStore()
        store.add("x", np.ones(2))
        path = tmp_path / "model.lgnn"
        store.save(str(path))
        with open(path, "rb") as fh:
            assert fh.read(4) == b"LGNN"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.lgnn"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            ParamStore.load(str(path))


class TestParamAccounting:
    def test_dual_doubles_encoder_params(self):
        rng = np.random.default_rng(29)
        graph = star_graph_with_features(4, rng)
        from dataclasses import replace

        single = config_for(graph)
        dual = replace(single, encoder="dual")
        s_store = init_params(single)
        d_store = init_params(dual)
        s_count = s_store.total_parameters("enc/")
        assert d_store.total_parameters("src/") == s_count
        assert d_store.total_parameters("dst/") == s_count
        assert d_store.total_parameters() == 2 * s_count

    def test_single_shares_towers(self):
        rng = np.random.default_rng(29)
        graph = star_graph_with_features(4, rng)
        cfg = config_for(graph)
        assert cfg.side_for("src") == cfg.side_for("dst") == "enc"


def bipartite_graph(rng, n_members=6, n_items=6, deg=3):
    rows = []
    for m in range(n_members):
        for j in range(deg):
            rows.append(edge_row(0, m, 0, 1, 100 + (m * 7 + j) % n_items, 1.0, ts=10 * j + 1))
    nodes = [node_row(0, m, rng.normal(size=4)) for m in range(n_members)]
    nodes += [node_row(1, 100 + i, rng.normal(size=4)) for i in range(n_items)]
    graph, _ = build(rows, nodes)
    return graph


def make_batch(graph, config, pairs, rng_seed=0, fanouts=None):
    """PairBatch via random multihop sampling."""
    fanouts = fanouts or [3] * max(1, config.hops)
    src_refs = [graph.resolve(p[0]) for p in pairs]
    dst_refs = [graph.resolve(p[1]) for p in pairs]
    labels = np.array([p[2] for p in pairs], dtype=np.float64)
    src_samples = sample_random_multihop(graph, src_refs, fanouts, rng_seed)
    dst_samples = sample_random_multihop(graph, dst_refs, fanouts, rng_seed)
    return PairBatch(
        src_refs=src_refs,
        dst_refs=dst_refs,
        labels=labels,
        mask=np.ones(len(pairs), dtype=bool),
        src_hops=[hops_from_samples(s) for s in src_samples],
        dst_hops=[hops_from_samples(s) for s in dst_samples],
    )


class TestNetworkGradients:
    @pytest.mark.parametrize("aggregator", ["mean", "attention", "self_attention"])
    def test_fd_smoke_mean_cosine(self, aggregator):
        rng = np.random.default_rng(31)
        graph = bipartite_graph(rng)
        from dataclasses import replace

        cfg = replace(config_for(graph), aggregator=aggregator, out_dim=4, attention_dim=3)
        model = LinkPredictionModel(graph, cfg)
        pairs = [((0, 0), (1, 100), 1), ((0, 1), (1, 101), 0), ((0, 2), (1, 102), 1)]
        batch = make_batch(graph, cfg, pairs)
        _, grads, _ = model.loss_and_grads(batch)
        arrays = {n: model.store[n] for n in model.store.names()}
        numeric = central_diff(lambda: model.loss_value(batch), arrays)
        err, name = max_relative_error(grads, numeric)
        assert err < 1e-4, f"{name}: {err}"

    def test_duplicated_batch_same_gradients(self):
        rng = np.random.default_rng(37)
        graph = bipartite_graph(rng)
        cfg = config_for(graph)
        model = LinkPredictionModel(graph, cfg)
        pairs = [((0, 0), (1, 100), 1), ((0, 1), (1, 101), 0)]
        b1 = make_batch(graph, cfg, pairs)
        b2 = make_batch(graph, cfg, pairs + pairs)
        _, g1, _ = model.loss_and_grads(b1)
        _, g2, _ = model.loss_and_grads(b2)
        for name in g1:
            np.testing.assert_allclose(g1[name], g2[name], atol=1e-12)

    def test_saturated_batch_vanishing_gradient(self):
        rng = np.random.default_rng(41)
        graph = bipartite_graph(rng)
        from dataclasses import replace

        cfg = replace(config_for(graph), decoder=DecoderKind("mlp", mlp_hidden=(4,)))
        model = LinkPredictionModel(graph, cfg)
        # force the output layer to produce huge correct logits
        model.store["dec/mlp/out/W"] *= 0.0
        model.store["dec/mlp/out/b"][:] = 50.0
        pairs = [((0, 0), (1, 100), 1), ((0, 1), (1, 101), 1)]
        batch = make_batch(graph, cfg, pairs)
        loss, grads, _ = model.loss_and_grads(batch)
        assert loss < 1e-12
        total = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
        assert total < 1e-6
