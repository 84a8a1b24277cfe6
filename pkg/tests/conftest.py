"""Shared graph builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from lignn.graph import GraphSchema, build_graph

BASE_SCHEMA = """
edge.0 = engagement
edge.1 = affinity
edge.2 = attribute
features.0 = 4
features.1 = 4
"""


def schema() -> GraphSchema:
    return GraphSchema.parse(BASE_SCHEMA)


def edge_row(st, sid, et, dt, did, w, ts=0) -> str:
    return f"{st}\t{sid}\t{et}\t{dt}\t{did}\t{w}\t{ts}\n"


def node_row(nt, nid, feats) -> str:
    return f"{nt}\t{nid}\t" + ",".join(f"{x:.17g}" for x in feats) + "\n"


def build(edge_lines, node_lines=(), sch=None):
    return build_graph(edge_lines, node_lines, sch or schema())


def random_weighted_digraph(rng: np.random.Generator, n: int, avg_out_degree: float,
                            symmetric: bool = False, w_lo: float = 0.5, w_hi: float = 1.5):
    """Random weighted edge rows over node type 0, edge type 0.

    ``symmetric=True`` adds every edge in both directions with equal weight,
    which makes the weighted walk reversible.
    """
    rows = {}
    m = int(n * avg_out_degree)
    while len(rows) < m:
        u = int(rng.integers(0, n))
        v = int(rng.integers(0, n))
        if u == v or (u, v) in rows:
            continue
        w = float(rng.uniform(w_lo, w_hi))
        rows[(u, v)] = w
        if symmetric:
            rows[(v, u)] = w
    # a spanning chain keeps the graph connected
    order = rng.permutation(n)
    for a, b in zip(order[:-1], order[1:]):
        key = (int(a), int(b))
        if key not in rows:
            w = float(rng.uniform(w_lo, w_hi))
            rows[key] = w
            if symmetric:
                rows[(key[1], key[0])] = w
    lines = [edge_row(0, u, 0, 0, v, w) for (u, v), w in sorted(rows.items())]
    return lines


@pytest.fixture
def tiny_graph():
    """Two members, two items, a mix of edge kinds and timestamps."""
    edges = [
        edge_row(0, 10, 0, 1, 100, 0.7, ts=50),
        edge_row(0, 10, 0, 1, 101, 0.3, ts=60),
        edge_row(0, 11, 1, 0, 10, 0.9, ts=10),
        edge_row(0, 11, 2, 1, 100, 1.0),
    ]
    nodes = [
        node_row(0, 10, [1.0, 0.0, 0.0, 0.0]),
        node_row(0, 11, [0.0, 1.0, 0.0, 0.0]),
        node_row(1, 100, [0.0, 0.0, 1.0, 0.0]),
        node_row(1, 101, [0.0, 0.0, 0.0, 1.0]),
    ]
    graph, report = build(edges, nodes)
    return graph, report
