"""Exact per-flow counters for operator-designated priority flows."""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass

from .flow_model import (
    DEFAULT_RETRANS_THRESHOLD_NS,
    TCP,
    FlowKey,
    PacketRecord,
    TcpTrackState,
    parse_flow_key,
    track_tcp,
)


class Register(enum.Enum):
    SUCCESS = "success"
    ALREADY_PRESENT = "already_present"
    AT_CAPACITY = "at_capacity"


@dataclass(slots=True)
class PriorityEntry:
    packet_count: int = 0
    retrans_count: int = 0
    tcp: TcpTrackState | None = None
    initialized: bool = False


class PriorityTable:
    """Hash map of registered flows. Keys leave only via :meth:`deregister`."""

    def __init__(self, capacity: int = 1024, literal_update: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.literal_update = literal_update
        self.entries: dict[FlowKey, PriorityEntry] = {}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def register(self, key: FlowKey) -> Register:
        if key in self.entries:
            return Register.ALREADY_PRESENT
        if len(self.entries) >= self.capacity:
            return Register.AT_CAPACITY
        self.entries[key] = PriorityEntry()
        return Register.SUCCESS

    def deregister(self, key: FlowKey) -> bool:
        return self.entries.pop(key, None) is not None

    def process(self, p: PacketRecord, threshold_ns: int = DEFAULT_RETRANS_THRESHOLD_NS) -> bool:
        """Count ``p`` if its flow is registered. Returns True on a hit."""
        entry = self.entries.get(p.key)
        if entry is None:
            return False
        entry.packet_count += 1
        entry.initialized = True
        if p.key.protocol == TCP:
            entry.tcp, retrans = track_tcp(entry.tcp, p, threshold_ns, self.literal_update)
            if retrans:
                entry.retrans_count += 1
        return True

    def snapshot(self) -> list[tuple[FlowKey, PriorityEntry]]:
        return [(k, copy.deepcopy(e)) for k, e in self.entries.items()]

    def state_dict(self) -> dict:
        out = {}
        for k, e in sorted(self.entries.items()):
            tcp = None if e.tcp is None else (e.tcp.expected_seq, e.tcp.last_ts_ns)
            out[k] = (e.packet_count, e.retrans_count, tcp, e.initialized)
        return out


def load_priority_keys(path) -> list[FlowKey]:
    """Read a priority key file: one ``src,dst,sport,dport,proto`` per line, ``#`` comments."""
    keys = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                keys.append(parse_flow_key(line))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return keys
