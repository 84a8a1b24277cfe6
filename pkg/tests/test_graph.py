"""Graph store: construction, rejection, degrees, temporal cuts, round-trip."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lignn.graph import (
    EdgeKind,
    GraphSchema,
    MissingNodeError,
    SchemaError,
    build_graph,
    connection_affinity_weight,
)

from conftest import build, edge_row, node_row, random_weighted_digraph, schema


class TestSchema:
    def test_parse(self):
        sch = schema()
        assert sch.kind_of(0) == EdgeKind.ENGAGEMENT
        assert sch.kind_of(2) == EdgeKind.ATTRIBUTE
        assert sch.kind_of(99) is None
        assert sch.feature_dims == {0: 4, 1: 4}

    def test_comments_and_blanks(self):
        sch = GraphSchema.parse("# hi\n\nedge.5 = affinity  # trailing\n")
        assert sch.kind_of(5) == EdgeKind.AFFINITY

    @pytest.mark.parametrize("bad", ["edge.x = affinity", "edge.1 = bogus", "nokey"])
    def test_rejects(self, bad):
        with pytest.raises(SchemaError):
            GraphSchema.parse(bad)


class TestBuild:
    def test_minimal_graph(self):
        graph, report = build([edge_row(0, 1, 0, 1, 2, 0.7)])
        src = graph.node_ref(0, 1)
        assert graph.out_degree(src) == 1
        adj = graph.adjacency(src, 0)
        assert adj.weight[0] == pytest.approx(0.7)
        assert report.total_edges == 1
        assert report.node_counts == {0: 1, 1: 1}

    def test_attribute_weight_must_be_one(self):
        graph, report = build([edge_row(0, 1, 2, 1, 2, 2.0)])
        assert report.rejected_rows == 1
        assert report.rejected_reasons == {"attribute_weight_not_one": 1}
        assert report.total_edges == 0

    def test_unknown_edge_type_rejected(self):
        _, report = build([edge_row(0, 1, 77, 1, 2, 0.5)])
        assert report.rejected_reasons == {"unknown_edge_type": 1}

    def test_malformed_line_rejected(self):
        _, report = build(["not a real row\n", edge_row(0, 1, 0, 1, 2, 0.5)])
        assert report.rejected_rows == 1
        assert report.total_edges == 1

    def test_nonpositive_weight_rejected(self):
        _, report = build([edge_row(0, 1, 0, 1, 2, -0.5), edge_row(0, 1, 0, 1, 3, 0.0)])
        assert report.rejected_reasons == {"nonpositive_weight": 2}

    def test_missing_timestamp_defaults_to_zero(self):
        graph, _ = build(["0\t1\t0\t1\t2\t0.5\n"])
        adj = graph.adjacency(graph.node_ref(0, 1), 0)
        assert adj.timestamp[0] == 0

    def test_duplicates_keep_max_weight(self):
        rows = [
            edge_row(0, 1, 0, 1, 2, 0.3, ts=5),
            edge_row(0, 1, 0, 1, 2, 0.9, ts=5),
            edge_row(0, 1, 0, 1, 2, 0.5, ts=5),
        ]
        graph, report = build(rows)
        adj = graph.adjacency(graph.node_ref(0, 1), 0)
        assert len(adj) == 1
        assert adj.weight[0] == pytest.approx(0.9)
        assert report.duplicates_collapsed == 2

    def test_dedup_count_matches_sort_unique_oracle(self):
        rng = np.random.default_rng(7)
        rows = []
        for _ in range(97):
            rows.append((0, int(rng.integers(0, 30)), 0, 1, int(rng.integers(0, 30)),
                         round(float(rng.uniform(0.1, 1.0)), 3), int(rng.integers(0, 5))))
        # plant 3 duplicates (same src/et/dst/ts, different weight)
        dups = [rows[0], rows[10], rows[20]]
        all_rows = rows + [(s, a, e, d, b, w + 0.01, t) for s, a, e, d, b, w, t in dups]
        lines = [edge_row(s, a, e, d, b, w, t) for s, a, e, d, b, w, t in all_rows]
        graph, report = build(lines)
        unique = {(s, a, e, d, b, t) for s, a, e, d, b, _, t in all_rows}
        assert report.total_edges == len(unique)
        assert report.duplicates_collapsed == len(all_rows) - len(unique)

    def test_feature_rows(self, tiny_graph):
        graph, _ = tiny_graph
        ref = graph.node_ref(0, 10)
        np.testing.assert_allclose(graph.features_of(ref), [1.0, 0.0, 0.0, 0.0])

    def test_feature_dim_mismatch_rejected(self):
        _, report = build([], [node_row(0, 1, [1.0, 2.0])])  # schema declares dim 4
        assert report.rejected_reasons == {"feature_dim_mismatch": 1}

    def test_node_without_features_reports_none(self):
        graph, _ = build([edge_row(0, 1, 0, 1, 2, 0.5)])
        assert graph.features_of(graph.node_ref(0, 1)) is None


class TestOutDegree:
    def test_isolated_node(self):
        graph, _ = build([], [node_row(0, 5, [0, 0, 0, 0])])
        assert graph.out_degree(graph.node_ref(0, 5)) == 0

    def test_filter_by_edge_type(self):
        rows = [edge_row(0, 1, 0, 1, k, 0.5) for k in range(3)]
        rows += [edge_row(0, 1, 2, 1, k, 1.0) for k in (10, 11)]
        graph, _ = build(rows)
        ref = graph.node_ref(0, 1)
        assert graph.out_degree(ref, edge_types={0}) == 3
        assert graph.out_degree(ref, edge_types={2}) == 2
        assert graph.out_degree(ref) == 5

    def test_unknown_node_raises(self, tiny_graph):
        graph, _ = tiny_graph
        from lignn.graph import NodeRef

        with pytest.raises(MissingNodeError):
            graph.out_degree(NodeRef(0, 999, 0))

    def test_degrees_match_recount_from_rows(self):
        rng = np.random.default_rng(3)
        lines = random_weighted_digraph(rng, 50, 4.0)
        graph, _ = build(lines)
        recount: dict[int, int] = {}
        for line in lines:
            parts = line.split("\t")
            recount[int(parts[1])] = recount.get(int(parts[1]), 0) + 1
        for nid, deg in recount.items():
            assert graph.out_degree(graph.node_ref(0, nid)) == deg

    def test_degree_sum_equals_edge_count(self):
        rng = np.random.default_rng(4)
        graph, report = build(random_weighted_digraph(rng, 40, 3.0))
        assert int(graph.out_degrees(0).sum()) == report.total_edges


class TestAffinityWeight:
    def test_full_overlap(self):
        assert connection_affinity_weight(7, 7, 7) == pytest.approx(1.0)

    def test_zero_common(self):
        assert connection_affinity_weight(0, 4, 9) == 0.0

    def test_formula(self):
        assert connection_affinity_weight(2, 4, 9) == pytest.approx(2.0 / 6.0)

    def test_zero_degree_error(self):
        with pytest.raises(ValueError):
            connection_affinity_weight(0, 0, 5)

    def test_common_bound_error(self):
        with pytest.raises(ValueError):
            connection_affinity_weight(5, 4, 9)

    @given(st.integers(1, 100), st.integers(1, 100), st.data())
    def test_symmetry(self, du, dv, data):
        c = data.draw(st.integers(0, min(du, dv)))
        assert connection_affinity_weight(c, du, dv) == pytest.approx(
            connection_affinity_weight(c, dv, du)
        )

    def test_inverse_scaling(self):
        # scaling both degrees by c divides the weight by c
        base = connection_affinity_weight(2, 4, 9)
        scaled = connection_affinity_weight(2, 4 * 9, 9 * 9)
        assert scaled == pytest.approx(base / 9.0)
        assert connection_affinity_weight(2, 4 * 4, 9 * 4) == pytest.approx(base / 4.0)


class TestTemporalCut:
    def _graph(self, stamps):
        rows = [edge_row(0, 1, 0, 1, 100 + i, 0.5, ts=t) for i, t in enumerate(stamps)]
        graph, _ = build(rows)
        return graph, graph.node_ref(0, 1)

    def test_before_everything(self):
        graph, ref = self._graph([10, 20, 30])
        assert len(graph.temporal_cut(ref, 0, 5)) == 0

    def test_infinity_returns_all(self):
        graph, ref = self._graph([10, 20, 30])
        assert len(graph.temporal_cut(ref, 0, math.inf)) == 3

    def test_strictly_less_than(self):
        graph, ref = self._graph([10, 20, 30])
        assert len(graph.temporal_cut(ref, 0, 20)) == 1

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(9)
        stamps = sorted(int(t) for t in rng.integers(0, 1000, size=20))
        graph, ref = self._graph(stamps)
        t = stamps[10]
        cut = graph.temporal_cut(ref, 0, t)
        assert len(cut) == sum(1 for s in stamps if s < t)

    @given(st.lists(st.integers(0, 100), min_size=1, max_size=15), st.integers(0, 100),
           st.integers(0, 100))
    @settings(max_examples=50, deadline=None)
    def test_prefix_property(self, stamps, t1, t2):
        t1, t2 = min(t1, t2), max(t1, t2)
        graph, ref = self._graph(sorted(stamps))
        a = graph.temporal_cut(ref, 0, t1)
        b = graph.temporal_cut(ref, 0, t2)
        assert len(a) <= len(b)
        np.testing.assert_array_equal(a.timestamp, b.timestamp[: len(a)])
        np.testing.assert_array_equal(a.dst_id, b.dst_id[: len(a)])


class TestRoundTrip:
    def test_rebuild_from_dump_is_identical(self, tmp_path):
        rng = np.random.default_rng(11)
        lines = random_weighted_digraph(rng, 30, 3.0)
        lines += [edge_row(0, i, 2, 1, 900 + i, 1.0) for i in range(5)]
        nodes = [node_row(0, i, rng.normal(size=4)) for i in range(30)]
        graph, _ = build(lines, nodes)
        dump = tmp_path / "edges.tsv"
        graph.dump_edges(str(dump))
        with open(dump) as fh:
            graph2, _ = build(list(fh), nodes)
        for key in (0, 2):
            for st_ in graph.node_types:
                b1 = graph._blocks.get((st_, key))
                b2 = graph2._blocks.get((st_, key))
                if b1 is None:
                    assert b2 is None
                    continue
                np.testing.assert_array_equal(b1.indptr, b2.indptr)
                np.testing.assert_array_equal(b1.dst_id, b2.dst_id)
                np.testing.assert_array_equal(b1.weight, b2.weight)
                np.testing.assert_array_equal(b1.timestamp, b2.timestamp)


class TestEpochSwap:
    def test_insert_preserves_base(self, tiny_graph):
        graph, _ = tiny_graph
        src = graph.node_ref(0, 10)
        dst = graph.node_ref(1, 101)
        g2 = graph.with_updated_run(src, 0, dst, 0.8, 70)
        assert graph.out_degree(src, edge_types={0}) == 2
        assert g2.out_degree(g2.node_ref(0, 10), edge_types={0}) == 3
        adj = g2.adjacency(src, 0)
        assert list(adj.timestamp) == [50, 60, 70]

    def test_same_dst_ts_updates_to_max_weight(self, tiny_graph):
        graph, _ = tiny_graph
        src = graph.node_ref(0, 10)
        dst = graph.node_ref(1, 100)
        g2 = graph.with_updated_run(src, 0, dst, 0.2, 50)
        adj = g2.adjacency(src, 0)
        assert adj.weight[0] == pytest.approx(0.7)  # max(0.7, 0.2)
        g3 = graph.with_updated_run(src, 0, dst, 0.95, 50)
        assert g3.adjacency(src, 0).weight[0] == pytest.approx(0.95)

    def test_insert_keeps_timestamp_order(self, tiny_graph):
        graph, _ = tiny_graph
        src = graph.node_ref(0, 10)
        dst = graph.node_ref(1, 101)
        g2 = graph.with_updated_run(src, 0, dst, 0.8, 55)
        assert list(g2.adjacency(src, 0).timestamp) == [50, 55, 60]

    def test_edge_count_tracks_overlay(self, tiny_graph):
        graph, _ = tiny_graph
        before = graph.num_edges()
        src = graph.node_ref(0, 10)
        dst = graph.node_ref(1, 101)
        g2 = graph.with_updated_run(src, 0, dst, 0.8, 70)
        assert g2.num_edges() == before + 1
