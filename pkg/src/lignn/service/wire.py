"""Binary wire protocol for the graph-engine service.

Everything is little-endian. A frame is ``u32 payload_length`` followed by
the payload; a request payload starts with ``u8 opcode``, a response payload
with ``u8 opcode, u8 status``. Node addresses travel as (u16 node_type,
u64 node_id); internal dense indices never cross the wire.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple

FANOUT_ALL = 0xFFFFFFFF  # enumeration sentinel: return every neighbor
COUNT_ALL = 0xFFFFFFFF
TS_MAX = (1 << 63) - 1


class Opcode(IntEnum):
    SAMPLE_NEIGHBORS = 0x01
    GET_FEATURES = 0x02
    PPR_2HOP = 0x03
    PPR_PUSH_BATCH = 0x04
    TEMPORAL_LAST_N = 0x05
    HEALTH = 0x06


class Status(IntEnum):
    OK = 0
    NOT_OWNED = 1
    BAD_REQUEST = 2
    INTERNAL = 3


class WireError(ValueError):
    pass


class WireNode(NamedTuple):
    node_type: int
    node_id: int


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise WireError("truncated payload")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def take_bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WireError("truncated payload")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def done(self) -> None:
        if self.pos != len(self.data):
            raise WireError(f"{len(self.data) - self.pos} trailing bytes")


def _pack_node(node) -> bytes:
    return struct.pack("<HQ", node[0], node[1])


def _read_node(r: _Reader) -> WireNode:
    t, i = r.take("<HQ")
    return WireNode(t, i)


# -- requests --------------------------------------------------------------------


@dataclass(frozen=True)
class SampleNeighborsRequest:
    seed: WireNode
    strategy: int = 0  # 0 random, 1 weighted
    fanouts: tuple[int, ...] = (FANOUT_ALL,)
    rng_seed: int = 0
    multipliers: tuple[tuple[int, float], ...] = ()  # (edge_type, multiplier)

    opcode = Opcode.SAMPLE_NEIGHBORS

    def encode_body(self) -> bytes:
        out = [struct.pack("<B", self.strategy), _pack_node(self.seed)]
        out.append(struct.pack("<Q", self.rng_seed))
        out.append(struct.pack("<B", len(self.fanouts)))
        for f in self.fanouts:
            out.append(struct.pack("<I", f))
        out.append(struct.pack("<H", len(self.multipliers)))
        for et, m in self.multipliers:
            out.append(struct.pack("<Hd", et, m))
        return b"".join(out)

    @classmethod
    def decode_body(cls, r: _Reader) -> "SampleNeighborsRequest":
        (strategy,) = r.take("<B")
        seed = _read_node(r)
        (rng_seed,) = r.take("<Q")
        (n_hops,) = r.take("<B")
        fanouts = tuple(r.take("<I")[0] for _ in range(n_hops))
        (n_mult,) = r.take("<H")
        multipliers = tuple(r.take("<Hd") for _ in range(n_mult))
        return cls(seed, strategy, fanouts, rng_seed, multipliers)


@dataclass(frozen=True)
class GetFeaturesRequest:
    node: WireNode

    opcode = Opcode.GET_FEATURES

    def encode_body(self) -> bytes:
        return _pack_node(self.node)

    @classmethod
    def decode_body(cls, r: _Reader) -> "GetFeaturesRequest":
        return cls(_read_node(r))


@dataclass(frozen=True)
class PPR2HopRequest:
    node: WireNode
    alpha: float = 0.15
    num_walks: int = 10_000
    top_k: int = 200
    rng_seed: int = 0

    opcode = Opcode.PPR_2HOP

    def encode_body(self) -> bytes:
        return _pack_node(self.node) + struct.pack(
            "<dIIQ", self.alpha, self.num_walks, self.top_k, self.rng_seed
        )

    @classmethod
    def decode_body(cls, r: _Reader) -> "PPR2HopRequest":
        node = _read_node(r)
        alpha, walks, top_k, rng = r.take("<dIIQ")
        return cls(node, alpha, walks, top_k, rng)


@dataclass(frozen=True)
class PPRPushBatchRequest:
    seeds: tuple[WireNode, ...]
    alpha: float = 0.15
    r_max: float = 1e-4
    top_k: int = 200

    opcode = Opcode.PPR_PUSH_BATCH

    def encode_body(self) -> bytes:
        out = [struct.pack("<I", len(self.seeds))]
        out.extend(_pack_node(s) for s in self.seeds)
        out.append(struct.pack("<ddI", self.alpha, self.r_max, self.top_k))
        return b"".join(out)

    @classmethod
    def decode_body(cls, r: _Reader) -> "PPRPushBatchRequest":
        (count,) = r.take("<I")
        seeds = tuple(_read_node(r) for _ in range(count))
        alpha, r_max, top_k = r.take("<ddI")
        return cls(seeds, alpha, r_max, top_k)


@dataclass(frozen=True)
class TemporalLastNRequest:
    node: WireNode
    edge_type: int
    before_ts: int = TS_MAX
    n: int = COUNT_ALL

    opcode = Opcode.TEMPORAL_LAST_N

    def encode_body(self) -> bytes:
        return _pack_node(self.node) + struct.pack(
            "<HqI", self.edge_type, self.before_ts, self.n
        )

    @classmethod
    def decode_body(cls, r: _Reader) -> "TemporalLastNRequest":
        node = _read_node(r)
        et, ts, n = r.take("<HqI")
        return cls(node, et, ts, n)


@dataclass(frozen=True)
class HealthRequest:
    opcode = Opcode.HEALTH

    def encode_body(self) -> bytes:
        return b""

    @classmethod
    def decode_body(cls, r: _Reader) -> "HealthRequest":
        return cls()


_REQUEST_TYPES = {
    Opcode.SAMPLE_NEIGHBORS: SampleNeighborsRequest,
    Opcode.GET_FEATURES: GetFeaturesRequest,
    Opcode.PPR_2HOP: PPR2HopRequest,
    Opcode.PPR_PUSH_BATCH: PPRPushBatchRequest,
    Opcode.TEMPORAL_LAST_N: TemporalLastNRequest,
    Opcode.HEALTH: HealthRequest,
}


# -- responses --------------------------------------------------------------------


class WireEntry(NamedTuple):
    node: WireNode
    score: float
    hop: int


def _encode_entries(entries) -> bytes:
    out = [struct.pack("<I", len(entries))]
    for e in entries:
        out.append(_pack_node(e.node) + struct.pack("<dB", e.score, e.hop))
    return b"".join(out)


def _decode_entries(r: _Reader) -> tuple[WireEntry, ...]:
    (count,) = r.take("<I")
    entries = []
    for _ in range(count):
        node = _read_node(r)
        score, hop = r.take("<dB")
        entries.append(WireEntry(node, score, hop))
    return tuple(entries)


@dataclass(frozen=True)
class SampleResponse:
    opcode: Opcode
    status: Status = Status.OK
    entries: tuple[WireEntry, ...] = ()
    truncated: bool = False
    error: str = ""

    def encode_body(self) -> bytes:
        if self.status != Status.OK:
            return _encode_error(self.error)
        return struct.pack("<B", int(self.truncated)) + _encode_entries(self.entries)

    @classmethod
    def decode_body(cls, opcode: Opcode, status: Status, r: _Reader) -> "SampleResponse":
        if status != Status.OK:
            return cls(opcode, status, error=_decode_error(r))
        (truncated,) = r.take("<B")
        return cls(opcode, status, _decode_entries(r), bool(truncated))


@dataclass(frozen=True)
class SampleBatchResponse:
    status: Status = Status.OK
    results: tuple[SampleResponse, ...] = ()
    error: str = ""

    opcode = Opcode.PPR_PUSH_BATCH

    def encode_body(self) -> bytes:
        if self.status != Status.OK:
            return _encode_error(self.error)
        out = [struct.pack("<I", len(self.results))]
        for res in self.results:
            body = res.encode_body()
            out.append(struct.pack("<BI", int(res.status), len(body)))
            out.append(body)
        return b"".join(out)

    @classmethod
    def decode_body(cls, opcode: Opcode, status: Status, r: _Reader) -> "SampleBatchResponse":
        if status != Status.OK:
            return cls(status, error=_decode_error(r))
        (count,) = r.take("<I")
        results = []
        for _ in range(count):
            st, size = r.take("<BI")
            sub = _Reader(r.take_bytes(size))
            results.append(SampleResponse.decode_body(Opcode.PPR_PUSH_BATCH, Status(st), sub))
        return cls(status, tuple(results))


@dataclass(frozen=True)
class FeaturesResponse:
    status: Status = Status.OK
    values: tuple[float, ...] = ()
    error: str = ""

    opcode = Opcode.GET_FEATURES

    def encode_body(self) -> bytes:
        if self.status != Status.OK:
            return _encode_error(self.error)
        return struct.pack("<I", len(self.values)) + struct.pack(
            f"<{len(self.values)}d", *self.values
        )

    @classmethod
    def decode_body(cls, opcode: Opcode, status: Status, r: _Reader) -> "FeaturesResponse":
        if status != Status.OK:
            return cls(status, error=_decode_error(r))
        (dim,) = r.take("<I")
        values = r.take(f"<{dim}d") if dim else ()
        return cls(status, tuple(values))


class WireEvent(NamedTuple):
    node: WireNode
    timestamp: int


@dataclass(frozen=True)
class TemporalResponse:
    status: Status = Status.OK
    events: tuple[WireEvent, ...] = ()
    error: str = ""

    opcode = Opcode.TEMPORAL_LAST_N

    def encode_body(self) -> bytes:
        if self.status != Status.OK:
            return _encode_error(self.error)
        out = [struct.pack("<I", len(self.events))]
        for node, ts in self.events:
            out.append(_pack_node(node) + struct.pack("<q", ts))
        return b"".join(out)

    @classmethod
    def decode_body(cls, opcode: Opcode, status: Status, r: _Reader) -> "TemporalResponse":
        if status != Status.OK:
            return cls(status, error=_decode_error(r))
        (count,) = r.take("<I")
        events = []
        for _ in range(count):
            node = _read_node(r)
            (ts,) = r.take("<q")
            events.append(WireEvent(node, ts))
        return cls(status, tuple(events))


@dataclass(frozen=True)
class HealthResponse:
    status: Status = Status.OK
    node_counts: tuple[tuple[int, int], ...] = ()  # (node_type, count)
    edge_counts: tuple[tuple[int, int], ...] = ()  # (edge_type, count)
    error: str = ""

    opcode = Opcode.HEALTH

    def encode_body(self) -> bytes:
        if self.status != Status.OK:
            return _encode_error(self.error)
        out = [struct.pack("<H", len(self.node_counts))]
        for t, c in self.node_counts:
            out.append(struct.pack("<HQ", t, c))
        out.append(struct.pack("<H", len(self.edge_counts)))
        for t, c in self.edge_counts:
            out.append(struct.pack("<HQ", t, c))
        return b"".join(out)

    @classmethod
    def decode_body(cls, opcode: Opcode, status: Status, r: _Reader) -> "HealthResponse":
        if status != Status.OK:
            return cls(status, error=_decode_error(r))
        (n,) = r.take("<H")
        nodes = tuple(r.take("<HQ") for _ in range(n))
        (m,) = r.take("<H")
        edges = tuple(r.take("<HQ") for _ in range(m))
        return cls(status, nodes, edges)


_RESPONSE_TYPES = {
    Opcode.SAMPLE_NEIGHBORS: SampleResponse,
    Opcode.GET_FEATURES: FeaturesResponse,
    Opcode.PPR_2HOP: SampleResponse,
    Opcode.PPR_PUSH_BATCH: SampleBatchResponse,
    Opcode.TEMPORAL_LAST_N: TemporalResponse,
    Opcode.HEALTH: HealthResponse,
}


def _encode_error(msg: str) -> bytes:
    raw = msg.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _decode_error(r: _Reader) -> str:
    (n,) = r.take("<I")
    return r.take_bytes(n).decode("utf-8")


# -- framing -----------------------------------------------------------------------


def encode_request(request) -> bytes:
    body = struct.pack("<B", int(request.opcode)) + request.encode_body()
    return struct.pack("<I", len(body)) + body


def decode_request(payload: bytes):
    r = _Reader(payload)
    (op,) = r.take("<B")
    try:
        opcode = Opcode(op)
    except ValueError:
        raise WireError(f"unknown opcode {op:#x}") from None
    req = _REQUEST_TYPES[opcode].decode_body(r)
    r.done()
    return req


def encode_response(response) -> bytes:
    body = (
        struct.pack("<BB", int(response.opcode), int(response.status))
        + response.encode_body()
    )
    return struct.pack("<I", len(body)) + body


def decode_response(payload: bytes):
    r = _Reader(payload)
    op, st = r.take("<BB")
    try:
        opcode = Opcode(op)
        status = Status(st)
    except ValueError:
        raise WireError("bad opcode/status") from None
    resp = _RESPONSE_TYPES[opcode].decode_body(opcode, status, r)
    r.done()
    return resp


def read_frame(sock) -> bytes:
    header = _read_exact(sock, 4)
    (length,) = struct.unpack("<I", header)
    if length > 64 * 1024 * 1024:
        raise WireError("frame too large")
    return _read_exact(sock, length)


def _read_exact(sock, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionResetError("peer closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)
