"""Packet sources: classic pcap files and a seeded synthetic trace generator."""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass
from itertools import repeat

import numpy as np

from ._validation import check_fraction, check_int
from .evaluation import GroundTruth
from .flow_model import ACK, DEFAULT_RETRANS_THRESHOLD_NS, TCP, UDP, FlowKey, PacketRecord

log = logging.getLogger(__name__)

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
ETH_IPV4 = 0x0800
ETH_VLAN = 0x8100

SEGMENT_PAYLOAD = 1000


class PcapError(ValueError):
    """The file is not a readable classic pcap capture."""


class TraceSource:
    """Re-iterable packet stream. ``skipped`` counts frames dropped by the last pass."""

    origin = "memory"

    def __init__(self, packets=()):
        self._packets = list(packets)
        self.skipped = 0

    def __iter__(self):
        self.skipped = 0
        return iter(self._packets)


# -- pcap --------------------------------------------------------------------


def _decode_ipv4(buf: bytes, off: int, ts_ns: int) -> PacketRecord | None:
    if len(buf) < off + 20 or buf[off] >> 4 != 4:
        return None
    ihl = (buf[off] & 0x0F) * 4
    total_len, frag = struct.unpack_from("!H2xH", buf, off + 2)
    proto = buf[off + 9]
    if ihl < 20 or frag & 0x1FFF or proto not in (TCP, UDP):
        return None
    src, dst = struct.unpack_from("!II", buf, off + 12)
    t = off + ihl
    if proto == TCP:
        if len(buf) < t + 20:
            return None
        sport, dport, seq, _ack, doff, flags = struct.unpack_from("!HHIIBB", buf, t)
        thl = (doff >> 4) * 4
        payload = total_len - ihl - thl
        if thl < 20 or payload < 0:
            return None
        return PacketRecord(FlowKey(src, dst, sport, dport, TCP), ts_ns, seq, payload, flags)
    if len(buf) < t + 8:
        return None
    sport, dport = struct.unpack_from("!HH", buf, t)
    payload = total_len - ihl - 8
    if payload < 0:
        return None
    return PacketRecord(FlowKey(src, dst, sport, dport, UDP), ts_ns, 0, payload, 0)


def decode_frame(frame: bytes, ts_ns: int, linktype: int = LINKTYPE_ETHERNET) -> PacketRecord | None:
    """Decode one captured frame; None when it is not IPv4 TCP/UDP."""
    if linktype == LINKTYPE_RAW:
        return _decode_ipv4(frame, 0, ts_ns)
    if len(frame) < 14:
        return None
    off = 12
    ethertype = struct.unpack_from("!H", frame, off)[0]
    if ethertype == ETH_VLAN:
        if len(frame) < 18:
            return None
        off += 4
        ethertype = struct.unpack_from("!H", frame, off)[0]
    if ethertype != ETH_IPV4:
        return None
    return _decode_ipv4(frame, off + 2, ts_ns)


class PcapTrace(TraceSource):
    """Lazily decoded classic pcap file (micro- or nanosecond, either byte order).

    A record cut off by end of file stops the stream; its byte offset is kept
    in ``truncated_at``.
    """

    origin = "pcap"

    def __init__(self, path):
        self.path = str(path)
        self.skipped = 0
        self.truncated_at = None
        with open(self.path, "rb") as fh:
            self._read_header(fh)

    def _read_header(self, fh):
        raw = fh.read(24)
        if len(raw) != 24:
            raise PcapError(f"{self.path}: short global header ({len(raw)} bytes)")
        for endian in "<>":
            magic = struct.unpack(endian + "I", raw[:4])[0]
            if magic in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
                break
        else:
            raise PcapError(f"{self.path}: bad magic 0x{raw[:4].hex()}")
        self._endian = endian
        self._ns = magic == PCAP_MAGIC_NS
        major, _minor, _zone, _sigfigs, self.snaplen, self.linktype = struct.unpack(
            endian + "HHiIII", raw[4:])
        if major != 2:
            raise PcapError(f"{self.path}: unsupported pcap version {major}")
        if self.linktype not in (LINKTYPE_ETHERNET, LINKTYPE_RAW):
            raise PcapError(f"{self.path}: unsupported link type {self.linktype}")

    def __iter__(self):
        self.skipped = 0
        self.truncated_at = None
        rec = struct.Struct(self._endian + "IIII")
        scale = 1 if self._ns else 1000
        linktype = self.linktype
        with open(self.path, "rb") as fh:
            fh.seek(24)
            offset = 24
            while True:
                hdr = fh.read(16)
                if not hdr:
                    return
                if len(hdr) < 16:
                    break
                sec, frac, incl, _orig = rec.unpack(hdr)
                frame = fh.read(incl)
                if len(frame) < incl:
                    break
                p = decode_frame(frame, sec * 1_000_000_000 + frac * scale, linktype)
                if p is None:
                    self.skipped += 1
                else:
                    yield p
                offset += 16 + incl
        self.truncated_at = offset
        log.warning("%s: truncated packet record at byte offset %d", self.path, offset)


def read_pcap(path) -> PcapTrace:
    return PcapTrace(path)


def encode_frame(p: PacketRecord, with_payload: bool = False) -> tuple[bytes, int]:
    """Build an Ethernet/IPv4/TCP-or-UDP frame for ``p``.

    Returns ``(frame, original_length)``. Without ``with_payload`` only the
    headers are emitted, like a snaplen-limited capture.
    """
    k = p.key
    if k.protocol == TCP:
        l4 = struct.pack("!HHIIBBHHH", k.src_port, k.dst_port, p.seq, 0, 5 << 4,
                         p.tcp_flags & 0xFF, 65535, 0, 0)
    elif k.protocol == UDP:
        l4 = struct.pack("!HHHH", k.src_port, k.dst_port, 8 + p.payload_len, 0)
    else:
        raise ValueError(f"cannot encode protocol {k.protocol}")
    total = 20 + len(l4) + p.payload_len
    if total > 0xFFFF:
        raise ValueError(f"packet too large for IPv4: {total} bytes")
    ip = struct.pack("!BBHHHBBHII", 0x45, 0, total, 0, 0x4000, 64, k.protocol, 0,
                     k.src_ip, k.dst_ip)
    eth = b"\x02\x00\x00\x00\x00\x02\x02\x00\x00\x00\x00\x01" + struct.pack("!H", ETH_IPV4)
    frame = eth + ip + l4
    orig = len(frame) + p.payload_len
    if with_payload:
        frame += bytes(p.payload_len)
    return frame, orig


def write_pcap(path, packets, with_payload: bool = False) -> int:
    """Write a nanosecond-resolution little-endian pcap. Returns packets written."""
    n = 0
    rec = struct.Struct("<IIII")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IHHiIII", PCAP_MAGIC_NS, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET))
        for p in packets:
            frame, orig = encode_frame(p, with_payload)
            sec, ns = divmod(p.ts_ns, 1_000_000_000)
            fh.write(rec.pack(sec, ns, len(frame), orig))
            fh.write(frame)
            n += 1
    return n


# -- synthetic ---------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    flow_count: int = 1000
    total_packets: int = 100_000
    zipf_alpha: float = 1.0
    tcp_fraction: float = 0.8
    retrans_rate: float = 0.0
    retrans_gap_ns: int = 5_000_000
    rng_seed: int = 42
    packet_gap_ns: int = 1000
    start_ns: int = 0

    def __post_init__(self):
        check_int("flow_count", self.flow_count, 1)
        check_int("total_packets", self.total_packets, self.flow_count)
        check_fraction("tcp_fraction", self.tcp_fraction)
        check_fraction("retrans_rate", self.retrans_rate)
        check_int("retrans_gap_ns", self.retrans_gap_ns, 1)
        check_int("packet_gap_ns", self.packet_gap_ns, 1)
        check_int("start_ns", self.start_ns, 0)
        check_int("rng_seed", self.rng_seed, 0)
        if not self.zipf_alpha >= 0:
            raise ValueError(f"zipf_alpha must be >= 0, got {self.zipf_alpha}")


def zipf_budgets(flow_count: int, total_packets: int, alpha: float) -> np.ndarray:
    """Per-rank packet counts proportional to ``rank**-alpha``, each at least 1, summing to total."""
    weights = 1.0 / np.arange(1, flow_count + 1, dtype=np.float64) ** alpha
    share = weights / weights.sum() * (total_packets - flow_count)
    budgets = np.floor(share).astype(np.int64)
    leftover = int(total_packets - flow_count - budgets.sum())
    if leftover:
        # largest remainder; stable sort keeps lower ranks first on ties
        order = np.argsort(-(share - budgets), kind="stable")
        budgets[order[:leftover]] += 1
    return budgets + 1


def _random_keys(rng: np.random.Generator, n: int, tcp_mask: np.ndarray) -> list[FlowKey]:
    keys: list[FlowKey] = []
    seen = set()
    while len(keys) < n:
        m = n - len(keys)
        ips = rng.integers(1, 1 << 32, size=(m, 2), dtype=np.uint64).tolist()
        ports = rng.integers(1, 1 << 16, size=(m, 2), dtype=np.int64).tolist()
        for (s, d), (sp, dp) in zip(ips, ports):
            proto = TCP if tcp_mask[len(keys)] else UDP
            key = FlowKey(s, d, sp, dp, proto)
            if key not in seen:
                seen.add(key)
                keys.append(key)
    return keys


class SyntheticTrace(TraceSource):
    origin = "synthetic"

    def __init__(self, config, keys, flow, ts, seq, flags, chunk=1 << 16):
        self.config = config
        self.keys = keys
        self.flow, self.ts, self.seq, self.flags = flow, ts, seq, flags
        self.skipped = 0
        self._chunk = chunk

    def __len__(self):
        return len(self.flow)

    def __iter__(self):
        self.skipped = 0
        getkey = self.keys.__getitem__
        for lo in range(0, len(self.flow), self._chunk):
            hi = lo + self._chunk
            yield from map(PacketRecord,
                           map(getkey, self.flow[lo:hi].tolist()),
                           self.ts[lo:hi].tolist(),
                           self.seq[lo:hi].tolist(),
                           repeat(SEGMENT_PAYLOAD),
                           self.flags[lo:hi].tolist())


def generate(cfg: SynthConfig,
             retrans_threshold_ns: int = DEFAULT_RETRANS_THRESHOLD_NS) -> tuple[SyntheticTrace, GroundTruth]:
    """Build a deterministic Zipf-skewed trace and its exact ground truth.

    Flow ``i`` (0-based) holds rank ``i + 1``. Packets of all flows are
    shuffled onto a grid ``packet_gap_ns`` apart. Every TCP segment is,
    with probability ``retrans_rate``, followed by a copy of itself after a
    stall of ``retrans_gap_ns``; the rest of that flow shifts by the same
    stall, so the copy arrives ``retrans_gap_ns`` after the flow's previous
    packet. Duplicates come on top of ``total_packets``.
    """
    if cfg.retrans_rate > 0 and cfg.retrans_gap_ns <= retrans_threshold_ns:
        warnings.warn(f"retrans_gap_ns={cfg.retrans_gap_ns} does not exceed the detection "
                      f"threshold {retrans_threshold_ns}; injected copies are undetectable",
                      stacklevel=2)
    rng = np.random.default_rng(cfg.rng_seed)
    n_flows, n = cfg.flow_count, cfg.total_packets

    budgets = zipf_budgets(n_flows, n, cfg.zipf_alpha)
    is_tcp = rng.random(n_flows) < cfg.tcp_fraction
    keys = _random_keys(rng, n_flows, is_tcp)
    isn = rng.integers(0, 1 << 32, size=n_flows, dtype=np.int64)

    flow = np.repeat(np.arange(n_flows, dtype=np.int64), budgets)[rng.permutation(n)]
    base_ts = cfg.start_ns + np.arange(n, dtype=np.int64) * cfg.packet_gap_ns
    event = is_tcp[flow] & (rng.random(n) < cfg.retrans_rate)

    # per-flow segment index and count of earlier stalls, via a stable group-by
    by_flow = np.argsort(flow, kind="stable")
    starts = np.concatenate(([0], np.cumsum(budgets)[:-1]))
    rank_in_flow = np.arange(n, dtype=np.int64) - np.repeat(starts, budgets)
    seg = np.empty(n, dtype=np.int64)
    seg[by_flow] = rank_in_flow
    ev_sorted = event[by_flow].astype(np.int64)
    incl = np.cumsum(ev_sorted)
    group_base = np.repeat(np.concatenate(([0], incl[starts[1:] - 1])), budgets)
    stalls = np.empty(n, dtype=np.int64)
    stalls[by_flow] = incl - ev_sorted - group_base

    ts = base_ts + stalls * cfg.retrans_gap_ns
    seq = np.where(is_tcp[flow], (isn[flow] + seg * SEGMENT_PAYLOAD) % (1 << 32), 0)
    flags = np.where(is_tcp[flow], ACK, 0).astype(np.int64)

    dup = np.flatnonzero(event)
    all_flow = np.concatenate((flow, flow[dup]))
    all_ts = np.concatenate((ts, ts[dup] + cfg.retrans_gap_ns))
    all_seq = np.concatenate((seq, seq[dup]))
    all_flags = np.concatenate((flags, flags[dup]))
    order = np.lexsort((np.arange(len(all_ts)), all_ts))
    all_flow, all_ts = all_flow[order], all_ts[order]
    all_seq, all_flags = all_seq[order], all_flags[order]
    # force strictly increasing timestamps: t'[i] = max(t[i], t'[i-1] + 1)
    idx = np.arange(len(all_ts), dtype=np.int64)
    all_ts = np.maximum.accumulate(all_ts - idx) + idx

    dups_per_flow = np.bincount(flow[dup], minlength=n_flows)
    truth = GroundTruth({keys[i]: (int(budgets[i] + dups_per_flow[i]), int(dups_per_flow[i]))
                         for i in range(n_flows)})
    trace = SyntheticTrace(cfg, keys, all_flow, all_ts, all_seq, all_flags)
    return trace, truth
