"""Hash-indexed elephant-flow table with negative-vote eviction."""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass
from typing import NamedTuple

from .flow_model import (
    _MASK32,
    FIN,
    SYN,
    DEFAULT_RETRANS_THRESHOLD_NS,
    TCP,
    FlowKey,
    IndexCache,
    PacketRecord,
    TcpTrackState,
    track_tcp,
)

DEFAULT_SEED = 0x5EED0001


@dataclass(slots=True)
class HeavyEntry:
    occupied: bool = False
    key: FlowKey | None = None
    packet_count: int = 0
    retrans_count: int = 0
    tcp: TcpTrackState | None = None
    negative_count: int = 0
    kick_flag: bool = False


class Outcome(enum.Enum):
    MATCHED = "matched"
    INSTALLED = "installed"  # empty slot taken
    FORWARDED = "forwarded"  # collision without eviction


MATCHED, INSTALLED, FORWARDED = Outcome


class Evicted(NamedTuple):
    old_key: FlowKey
    old_stats: tuple[int, int]  # (packet_count, retrans_count)


def should_evict(negative_count: int, vote_threshold: int, packet_count: int) -> bool:
    """Vote rule; ``negative_count`` already includes the current colliding packet."""
    return negative_count * vote_threshold >= packet_count


class HeavyTable:
    def __init__(self, size: int = 4096, seed: int = DEFAULT_SEED,
                 literal_update: bool = False, reset_votes_on_match: bool = False):
        if size < 1:
            raise ValueError("size must be >= 1")
        self.size = size
        self.seed = seed
        self.literal_update = literal_update
        self.reset_votes_on_match = reset_votes_on_match
        self.slots = [HeavyEntry() for _ in range(size)]
        self._index = IndexCache(seed, size)

    def slot_of(self, key: FlowKey) -> int:
        return self._index[key]

    def lookup(self, key: FlowKey) -> HeavyEntry | None:
        entry = self.slots[self._index[key]]
        if entry.occupied and entry.key == key:
            return entry
        return None

    def _install(self, entry: HeavyEntry, p: PacketRecord, kicked: bool, threshold_ns: int):
        entry.occupied = True
        entry.key = p.key
        entry.packet_count = 1
        entry.retrans_count = 0
        entry.negative_count = 0
        entry.kick_flag = kicked
        entry.tcp = track_tcp(None, p, threshold_ns)[0] if p.key.protocol == TCP else None

    def process(self, p: PacketRecord, vote_threshold: int = 8,
                retrans_threshold_ns: int = DEFAULT_RETRANS_THRESHOLD_NS):
        key = p.key
        entry = self.slots[self._index[key]]
        if not entry.occupied:
            self._install(entry, p, False, retrans_threshold_ns)
            return INSTALLED
        if entry.key is key or entry.key == key:
            entry.packet_count += 1
            if self.reset_votes_on_match:
                entry.negative_count = 0
            if key.protocol == TCP:
                # track_tcp, inlined: this branch carries most of the traffic
                tcp = entry.tcp
                flags = p.tcp_flags
                seq = p.seq
                nxt = (seq + p.payload_len + ((flags & SYN) >> 1) + (flags & FIN)) & _MASK32
                expected = tcp.expected_seq
                if (((seq - expected) & _MASK32) >= 0x80000000
                        and p.ts_ns - tcp.last_ts_ns >= retrans_threshold_ns):
                    entry.retrans_count += 1
                    if self.literal_update or ((expected - nxt) & _MASK32) >= 0x80000000:
                        tcp.expected_seq = nxt
                else:
                    tcp.expected_seq = nxt
                tcp.last_ts_ns = p.ts_ns
            return MATCHED
        entry.negative_count += 1
        if should_evict(entry.negative_count, vote_threshold, entry.packet_count):
            outcome = Evicted(entry.key, (entry.packet_count, entry.retrans_count))
            self._install(entry, p, True, retrans_threshold_ns)
            return outcome
        return FORWARDED

    def occupied(self) -> list[tuple[int, HeavyEntry]]:
        return [(i, e) for i, e in enumerate(self.slots) if e.occupied]

    def snapshot(self) -> list[tuple[int, HeavyEntry]]:
        return [(i, copy.deepcopy(e)) for i, e in enumerate(self.slots) if e.occupied]

    def state_dict(self) -> dict:
        out = {}
        for i, e in enumerate(self.slots):
            if e.occupied:
                tcp = None if e.tcp is None else (e.tcp.expected_seq, e.tcp.last_ts_ns)
                out[i] = (e.key, e.packet_count, e.retrans_count, tcp, e.negative_count, e.kick_flag)
        return out
