"""Linear counting over a packed bitmap."""

from __future__ import annotations

import math

from .flow_model import FlowKey, IndexCache

DEFAULT_SEED = 0x5EED0002


def linear_count_estimate(m: int, zeros: int) -> float:
    if zeros <= 0:
        return math.inf
    if zeros >= m:
        return 0.0
    return -m * math.log(zeros / m)


class LinearCounter:
    def __init__(self, m: int = 65536, seed: int = DEFAULT_SEED):
        if m < 1:
            raise ValueError("m must be >= 1")
        self.m = m
        self.seed = seed
        self.bits = bytearray((m + 7) // 8)
        self.zeros = m
        self._index = IndexCache(seed, m)

    def record(self, key: FlowKey) -> None:
        idx = self._index[key]
        byte, mask = idx >> 3, 1 << (idx & 7)
        if not self.bits[byte] & mask:
            self.bits[byte] |= mask
            self.zeros -= 1

    def __getitem__(self, idx: int) -> int:
        return (self.bits[idx >> 3] >> (idx & 7)) & 1

    @property
    def saturated(self) -> bool:
        return self.zeros == 0

    def estimate(self) -> float:
        """Distinct-key estimate ``-m * ln(V / m)``.

        Returns ``math.inf`` once every cell is set; check :attr:`saturated`
        before trusting the figure.
        """
        return linear_count_estimate(self.m, self.zeros)

    def state_dict(self) -> dict:
        return {"m": self.m, "bits": bytes(self.bits)}
