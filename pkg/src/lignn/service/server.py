"""Graph-engine TCP server: answers sampling/feature queries for its shard."""

from __future__ import annotations

import logging
import math
import socketserver
import threading

from ..graph import HeteroGraph, MissingNodeError
from ..samplers import (
    PPRConfig,
    WalkConfig,
    ppr_forward_push_batch,
    ppr_two_hop_random_walk,
    sample_random_multihop,
    sample_temporal_last_n,
    sample_weighted_multihop,
)
from . import wire
from .partition import PartitionMap

logger = logging.getLogger("lignn.server")


class GraphEngineServer:
    """One shard instance. Requests for nodes it does not own get NOT_OWNED
    (misrouted clients are surfaced, never silently proxied)."""

    def __init__(
        self,
        graph: HeteroGraph,
        bind_address: str,
        pmap: PartitionMap,
        shard_index: int = 0,
    ):
        self.graph = graph
        self.pmap = pmap
        self.shard_index = shard_index
        host, port = bind_address.rsplit(":", 1)
        handler = self._make_handler()
        self._server = socketserver.ThreadingTCPServer(
            (host, int(port)), handler, bind_and_activate=False
        )
        self._server.allow_reuse_address = True
        self._server.daemon_threads = True
        self._server.server_bind()
        self._server.server_activate()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        logger.info("shard %d serving on %s", self.shard_index, self.address)

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join()

    # -- request handling ----------------------------------------------------

    def _make_handler(self):
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                try:
                    while True:
                        try:
                            payload = wire.read_frame(self.request)
                        except (ConnectionResetError, ConnectionError):
                            return
                        response = outer.handle_payload(payload)
                        self.request.sendall(response)
                except Exception:
                    logger.exception("handler crashed")

        return Handler

    def handle_payload(self, payload: bytes) -> bytes:
        try:
            request = wire.decode_request(payload)
        except wire.WireError as exc:
            resp = wire.SampleResponse(
                wire.Opcode.SAMPLE_NEIGHBORS, wire.Status.BAD_REQUEST, error=str(exc)
            )
            return wire.encode_response(resp)
        try:
            return wire.encode_response(self._dispatch(request))
        except Exception as exc:  # an unexpected bug, not a bad request
            logger.exception("internal error")
            resp = wire.SampleResponse(request.opcode, wire.Status.INTERNAL, error=repr(exc))
            return wire.encode_response(resp)

    def _owned(self, node) -> bool:
        return self.pmap.owner(node) == self.shard_index

    def _dispatch(self, request):
        op = request.opcode
        if op == wire.Opcode.HEALTH:
            return self._health()
        if op == wire.Opcode.PPR_PUSH_BATCH:
            return self._ppr_push_batch(request)
        node = request.seed if op == wire.Opcode.SAMPLE_NEIGHBORS else request.node
        if not self._owned(node):
            kind = wire._RESPONSE_TYPES[op]
            if kind is wire.SampleResponse:
                return wire.SampleResponse(op, wire.Status.NOT_OWNED, error="not owned")
            return kind(status=wire.Status.NOT_OWNED, error="not owned")
        if op == wire.Opcode.SAMPLE_NEIGHBORS:
            return self._sample_neighbors(request)
        if op == wire.Opcode.GET_FEATURES:
            return self._get_features(request)
        if op == wire.Opcode.PPR_2HOP:
            return self._ppr_2hop(request)
        if op == wire.Opcode.TEMPORAL_LAST_N:
            return self._temporal(request)
        raise AssertionError(f"unhandled opcode {op}")

    def _health(self) -> wire.HealthResponse:
        nodes = tuple(
            (t, self.graph.num_nodes(t)) for t in self.graph.node_types
        )
        edges = []
        for et in self.graph.edge_types:
            count = 0
            for t in self.graph.node_types:
                count += int(self.graph.out_degrees(t, [et]).sum())
            edges.append((et, count))
        return wire.HealthResponse(wire.Status.OK, nodes, tuple(edges))

    def _entries_to_wire(self, sample) -> wire.SampleResponse:
        if sample.error is not None:
            return wire.SampleResponse(
                wire.Opcode.SAMPLE_NEIGHBORS, wire.Status.BAD_REQUEST, error=sample.error
            )
        entries = tuple(
            wire.WireEntry(
                wire.WireNode(e.node.node_type, e.node.node_id), e.score, min(255, e.hop)
            )
            for e in sample.entries
        )
        return wire.SampleResponse(
            wire.Opcode.SAMPLE_NEIGHBORS, wire.Status.OK, entries, sample.truncated
        )

    def _sample_neighbors(self, req: wire.SampleNeighborsRequest) -> wire.SampleResponse:
        fanouts = [
            (self.graph.num_nodes() if f == wire.FANOUT_ALL else f) for f in req.fanouts
        ]
        if req.strategy == 0:
            [hops] = sample_random_multihop(self.graph, [req.seed], fanouts, req.rng_seed)
        elif req.strategy == 1:
            multipliers = {et: m for et, m in req.multipliers}
            [hops] = sample_weighted_multihop(
                self.graph, [req.seed], fanouts, multipliers, req.rng_seed
            )
        else:
            return wire.SampleResponse(
                wire.Opcode.SAMPLE_NEIGHBORS,
                wire.Status.BAD_REQUEST,
                error=f"unknown strategy {req.strategy}",
            )
        if hops[0].error is not None:
            return self._entries_to_wire(hops[0])
        entries = []
        for hop_sample in hops:
            for e in hop_sample.entries:
                entries.append(
                    wire.WireEntry(
                        wire.WireNode(e.node.node_type, e.node.node_id),
                        e.score,
                        min(255, e.hop),
                    )
                )
        return wire.SampleResponse(wire.Opcode.SAMPLE_NEIGHBORS, wire.Status.OK, tuple(entries))

    def _get_features(self, req: wire.GetFeaturesRequest) -> wire.FeaturesResponse:
        try:
            ref = self.graph.resolve(req.node)
        except MissingNodeError as exc:
            return wire.FeaturesResponse(wire.Status.BAD_REQUEST, error=str(exc))
        vec = self.graph.features_of(ref)
        values = () if vec is None else tuple(float(x) for x in vec)
        return wire.FeaturesResponse(wire.Status.OK, values)

    def _ppr_2hop(self, req: wire.PPR2HopRequest) -> wire.SampleResponse:
        cfg = WalkConfig(
            num_walks=req.num_walks, alpha=req.alpha, top_k=req.top_k, rng_seed=req.rng_seed
        )
        sample = ppr_two_hop_random_walk(self.graph, req.node, cfg)
        resp = self._entries_to_wire(sample)
        return wire.SampleResponse(
            wire.Opcode.PPR_2HOP, resp.status, resp.entries, resp.truncated, resp.error
        )

    def _ppr_push_batch(self, req: wire.PPRPushBatchRequest) -> wire.SampleBatchResponse:
        if not req.seeds:
            return wire.SampleBatchResponse(wire.Status.BAD_REQUEST, error="empty batch")
        not_owned = [s for s in req.seeds if not self._owned(s)]
        if not_owned:
            return wire.SampleBatchResponse(
                wire.Status.NOT_OWNED, error=f"{len(not_owned)} seeds not owned"
            )
        cfg = PPRConfig(alpha=req.alpha, r_max=req.r_max, top_k=req.top_k)
        samples = ppr_forward_push_batch(self.graph, list(req.seeds), cfg)
        results = []
        for sample in samples:
            sub = self._entries_to_wire(sample)
            results.append(
                wire.SampleResponse(
                    wire.Opcode.PPR_PUSH_BATCH, sub.status, sub.entries, sub.truncated, sub.error
                )
            )
        return wire.SampleBatchResponse(wire.Status.OK, tuple(results))

    def _temporal(self, req: wire.TemporalLastNRequest) -> wire.TemporalResponse:
        before = math.inf if req.before_ts == wire.TS_MAX else req.before_ts
        n = None if req.n == wire.COUNT_ALL else req.n
        try:
            events = sample_temporal_last_n(self.graph, req.node, req.edge_type, before, n)
        except MissingNodeError as exc:
            return wire.TemporalResponse(wire.Status.BAD_REQUEST, error=str(exc))
        except ValueError as exc:
            return wire.TemporalResponse(wire.Status.BAD_REQUEST, error=str(exc))
        out = tuple(
            wire.WireEvent(wire.WireNode(ref.node_type, ref.node_id), ts) for ref, ts in events
        )
        return wire.TemporalResponse(wire.Status.OK, out)


def serve(
    graph: HeteroGraph, bind_address: str, pmap: PartitionMap, shard_index: int = 0
) -> GraphEngineServer:
    """Start a shard server; returns the running instance (call .stop())."""
    server = GraphEngineServer(graph, bind_address, pmap, shard_index)
    server.start()
    return server
