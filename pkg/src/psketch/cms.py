"""Three-layer Count-Min sketch holding packet and retransmission counters."""

from __future__ import annotations

from typing import NamedTuple

from .flow_model import FlowKey, IndexCache

DEPTH = 3
DEFAULT_SEEDS = (0x5EED0003, 0x5EED0004, 0x5EED0005)


class CmsCell(NamedTuple):
    packet_count: int
    retrans_count: int


class CountMinSketch:
    def __init__(self, width: int = 500, seeds=DEFAULT_SEEDS):
        seeds = tuple(seeds)
        if width < 1:
            raise ValueError("width must be >= 1")
        if len(seeds) != DEPTH:
            raise ValueError(f"need exactly {DEPTH} seeds")
        if len(set(seeds)) != DEPTH:
            raise ValueError("seeds must be pairwise distinct")
        self.width = width
        self.seeds = seeds
        # layer i -> parallel packet / retransmission counter rows
        self.packets = [[0] * width for _ in range(DEPTH)]
        self.retrans = [[0] * width for _ in range(DEPTH)]
        self._index = [IndexCache(s, width) for s in seeds]

    def indices(self, key: FlowKey) -> list[int]:
        return [cache[key] for cache in self._index]

    def cell(self, layer: int, idx: int) -> CmsCell:
        return CmsCell(self.packets[layer][idx], self.retrans[layer][idx])

    def update_packet(self, key: FlowKey) -> None:
        for row, cache in zip(self.packets, self._index):
            row[cache[key]] += 1

    def absorb(self, key: FlowKey, packet_count: int, retrans_count: int) -> None:
        """Add whole-flow counters at the cells ``key`` hashes to."""
        for prow, rrow, cache in zip(self.packets, self.retrans, self._index):
            i = cache[key]
            prow[i] += packet_count
            rrow[i] += retrans_count

    def absorb_evicted(self, old_key: FlowKey, old_stats: tuple[int, int]) -> None:
        self.absorb(old_key, *old_stats)

    def query(self, key: FlowKey) -> CmsCell:
        """Per-field minimum over the three layers."""
        idx = self.indices(key)
        return CmsCell(
            min(row[i] for row, i in zip(self.packets, idx)),
            min(row[i] for row, i in zip(self.retrans, idx)),
        )

    def state_dict(self) -> dict:
        return {
            "width": self.width,
            "packets": [tuple(r) for r in self.packets],
            "retrans": [tuple(r) for r in self.retrans],
        }
