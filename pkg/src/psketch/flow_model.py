"""Flow keys, packet records, Jenkins hashing and TCP sequence arithmetic."""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass
from typing import NamedTuple

TCP = 6
UDP = 17

# TCP header flag bits, as they appear on the wire.
FIN = 0x01
SYN = 0x02
RST = 0x04
ACK = 0x10

SEQ_MOD = 1 << 32
_MASK32 = 0xFFFFFFFF
_KEY_STRUCT = struct.Struct("!IIHHB")

DEFAULT_RETRANS_THRESHOLD_NS = 3_000_000


class FlowKey(NamedTuple):
    """IPv4 5-tuple. Addresses are held as 32-bit integers."""

    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    protocol: int

    @classmethod
    def from_strings(cls, src_ip, dst_ip, src_port, dst_port, protocol) -> "FlowKey":
        return cls(
            int(ipaddress.IPv4Address(src_ip)),
            int(ipaddress.IPv4Address(dst_ip)),
            int(src_port),
            int(dst_port),
            int(protocol),
        )

    def to_dict(self) -> dict:
        return {
            "src_ip": str(ipaddress.IPv4Address(self.src_ip)),
            "dst_ip": str(ipaddress.IPv4Address(self.dst_ip)),
            "src_port": self.src_port,
            "dst_port": self.dst_port,
            "protocol": self.protocol,
        }

    def __str__(self) -> str:
        d = self.to_dict()
        return f"{d['src_ip']}:{self.src_port}->{d['dst_ip']}:{self.dst_port}/{self.protocol}"


class PacketRecord(NamedTuple):
    key: FlowKey
    ts_ns: int
    seq: int = 0
    payload_len: int = 0
    tcp_flags: int = 0


@dataclass(slots=True)
class TcpTrackState:
    expected_seq: int
    last_ts_ns: int


def encode_key(key: FlowKey) -> bytes:
    """Canonical 13-byte big-endian encoding of a flow key."""
    return _KEY_STRUCT.pack(*key)


def jenkins_hash(data: bytes, seed: int = 0) -> int:
    """Jenkins one-at-a-time hash, with ``seed`` as the initial accumulator."""
    h = seed & _MASK32
    for b in data:
        h = (h + b) & _MASK32
        h = (h + (h << 10)) & _MASK32
        h ^= h >> 6
    h = (h + (h << 3)) & _MASK32
    h ^= h >> 11
    h = (h + (h << 15)) & _MASK32
    return h


def table_index(key: FlowKey, seed: int, size: int) -> int:
    return jenkins_hash(_KEY_STRUCT.pack(*key), seed) % size


class IndexCache(dict):
    """Memo of ``key -> index`` for one (seed, size) pair.

    Flows repeat far more often than they appear, so the tables look indices
    up here instead of re-hashing. Cleared wholesale once it holds ``limit`` keys.
    """

    def __init__(self, seed: int, size: int, limit: int = 1 << 20):
        super().__init__()
        self.seed = seed
        self.size = size
        self.limit = limit

    def __missing__(self, key):
        if len(self) >= self.limit:
            self.clear()
        idx = self[key] = table_index(key, self.seed, self.size)
        return idx


def next_expected_seq(p: PacketRecord) -> int:
    if p.key.protocol != TCP:
        raise ValueError(f"next_expected_seq needs a TCP packet, got protocol {p.key.protocol}")
    flags = p.tcp_flags
    return (p.seq + p.payload_len + (1 if flags & SYN else 0) + (1 if flags & FIN else 0)) & _MASK32


def seq_before(a: int, b: int) -> bool:
    """Serial-number comparison: is ``a`` strictly before ``b`` modulo 2**32."""
    return ((a - b) & _MASK32) >= 0x80000000


def seq_max(a: int, b: int) -> int:
    return b if seq_before(a, b) else a


def check_retransmission(state: TcpTrackState, p: PacketRecord, threshold_ns: int) -> bool:
    return seq_before(p.seq, state.expected_seq) and p.ts_ns - state.last_ts_ns >= threshold_ns


def track_tcp(state: TcpTrackState | None, p: PacketRecord, threshold_ns: int,
              literal_update: bool = False) -> tuple[TcpTrackState, bool]:
    """Advance per-flow TCP tracking by one packet.

    Returns the (possibly new) state and whether ``p`` was flagged as a
    retransmission. The first packet only initializes the state. A flagged
    packet never rewinds the expected sequence unless ``literal_update`` is set.
    """
    # Same arithmetic as next_expected_seq / check_retransmission / seq_max,
    # inlined because this runs for every tracked TCP packet.
    flags = p.tcp_flags
    nxt = (p.seq + p.payload_len + ((flags & SYN) >> 1) + (flags & FIN)) & _MASK32
    if state is None:
        return TcpTrackState(nxt, p.ts_ns), False
    expected = state.expected_seq
    retrans = ((p.seq - expected) & _MASK32) >= 0x80000000 and p.ts_ns - state.last_ts_ns >= threshold_ns
    if not retrans or literal_update or ((expected - nxt) & _MASK32) >= 0x80000000:
        state.expected_seq = nxt
    state.last_ts_ns = p.ts_ns
    return state, retrans


def parse_flow_key(text: str) -> FlowKey:
    """Parse ``src_ip,dst_ip,src_port,dst_port,proto``."""
    parts = [s.strip() for s in text.split(",")]
    if len(parts) != 5:
        raise ValueError(f"expected 5 comma-separated fields, got {len(parts)}")
    key = FlowKey.from_strings(*parts)
    for port in (key.src_port, key.dst_port):
        if not 0 <= port <= 0xFFFF:
            raise ValueError(f"port out of range: {port}")
    if not 0 <= key.protocol <= 0xFF:
        raise ValueError(f"protocol out of range: {key.protocol}")
    return key
