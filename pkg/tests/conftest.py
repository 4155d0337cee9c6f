import random

import pytest
from hypothesis import HealthCheck, settings

from psketch.flow_model import ACK, FIN, SYN, TCP, UDP, FlowKey, PacketRecord

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_keys(rng: random.Random, n: int, udp_share=0.3, other_share=0.0):
    keys = set()
    while len(keys) < n:
        r = rng.random()
        proto = 1 if r < other_share else (UDP if r < other_share + udp_share else TCP)
        keys.add(FlowKey(rng.getrandbits(32), rng.getrandbits(32),
                         rng.getrandbits(16), rng.getrandbits(16), proto))
    return sorted(keys)


def random_stream(seed: int, n_packets: int, n_flows: int, other_share=0.02):
    """Skewed packet stream with reordering, stale segments, SYN/FIN and seq wrap."""
    rng = random.Random(seed)
    keys = random_keys(rng, n_flows, other_share=other_share)
    weights = [1.0 / (i + 1) for i in range(n_flows)]
    # start some flows just below the wrap point
    nxt = {k: (rng.getrandbits(32) if rng.random() < 0.7 else 0xFFFFFFFF - rng.randrange(5000))
           for k in keys}
    ts = 0
    out = []
    for k in rng.choices(keys, weights, k=n_packets):
        ts += rng.choice((0, 1, 1000, 500_000, 2_000_000, 4_000_000))
        if k.protocol != TCP:
            out.append(PacketRecord(k, ts, 0, rng.randrange(0, 1400), 0))
            continue
        r = rng.random()
        plen = rng.choice((0, 100, 1000, 1460))
        if r < 0.12:  # stale copy of an older segment
            seq = (nxt[k] - rng.choice((100, 1000, 3000))) & 0xFFFFFFFF
            flags = ACK
        else:
            seq = nxt[k]
            flags = rng.choice((ACK, ACK, ACK, ACK | SYN, ACK | FIN))
            nxt[k] = (seq + plen + (1 if flags & SYN else 0) + (1 if flags & FIN else 0)) & 0xFFFFFFFF
        out.append(PacketRecord(k, ts, seq, plen, flags))
    return keys, out


@pytest.fixture
def stream_factory():
    return random_stream
