"""Compiled batch engine for :class:`psketch.pipeline.PSketch`.

The table objects stay authoritative. For each batch the engine copies
their state into flat arrays, runs the per-packet routine compiled with
numba, and writes the result back. Flow keys are interned to small integer
ids whose hash indices are computed once, by the tables' own caches.
"""

from __future__ import annotations

import gc
from contextlib import contextmanager
from itertools import islice

import numpy as np

from .flow_model import TcpTrackState

try:
    from numba import njit
except ImportError:  # pragma: no cover - exercised only without numba
    njit = None

AVAILABLE = njit is not None

# stats vector layout
_PROCESSED, _PRIORITY, _MATCHED, _INSTALLED, _FORWARDED, _EVICTIONS, _SKIPPED = range(7)
STAT_FIELDS = ("packets_processed", "priority_hits", "heavy_matched", "heavy_installed",
               "forwarded", "evictions", "non_ip_skipped")

_M32 = 0xFFFFFFFF
_HALF = 0x80000000

if AVAILABLE:

    @njit(cache=True)
    def _tcp_step(has, exp, lts, rc, j, seq, plen, flags, ts, thr, literal):
        nxt = (seq + plen + ((flags & 2) >> 1) + (flags & 1)) & _M32
        if not has[j]:
            has[j] = True
            exp[j] = nxt
            lts[j] = ts
            return
        e = exp[j]
        if ((seq - e) & _M32) >= _HALF and ts - lts[j] >= thr:
            rc[j] += 1
            if literal or ((e - nxt) & _M32) >= _HALF:
                exp[j] = nxt
        else:
            exp[j] = nxt
        lts[j] = ts

    @njit(cache=True)
    def _run(pid, ts, seq, plen, flags,
             id_proto, id_prio, id_hslot, id_lc, id_cms,
             p_pc, p_rc, p_init, p_tcp, p_exp, p_lts,
             h_occ, h_kid, h_pc, h_rc, h_tcp, h_exp, h_lts, h_neg, h_kick,
             lc_bits, cms_pc, cms_rc, stats,
             thr, vote, literal_update, literal_cms, literal_routing, reset_votes):
        new_bits = 0
        for i in range(pid.shape[0]):
            k = pid[i]
            proto = id_proto[k]
            if proto != 6 and proto != 17:
                stats[_SKIPPED] += 1
                continue
            stats[_PROCESSED] += 1
            j = id_prio[k]
            if j >= 0:
                stats[_PRIORITY] += 1
                p_pc[j] += 1
                p_init[j] = True
                if proto == 6:
                    _tcp_step(p_tcp, p_exp, p_lts, p_rc, j, seq[i], plen[i], flags[i], ts[i],
                              thr, literal_update)
                continue

            s = id_hslot[k]
            install = False
            kicked = False
            evicted = False
            forwarded = False
            old = -1
            old_pc = 0
            old_rc = 0
            if not h_occ[s]:
                stats[_INSTALLED] += 1
                install = True
            elif h_kid[s] == k:
                stats[_MATCHED] += 1
                h_pc[s] += 1
                if reset_votes:
                    h_neg[s] = 0
                if proto == 6:
                    _tcp_step(h_tcp, h_exp, h_lts, h_rc, s, seq[i], plen[i], flags[i], ts[i],
                              thr, literal_update)
            else:
                h_neg[s] += 1
                if h_neg[s] * vote >= h_pc[s]:
                    stats[_EVICTIONS] += 1
                    evicted = True
                    old = h_kid[s]
                    old_pc = h_pc[s]
                    old_rc = h_rc[s]
                    install = True
                    kicked = True
                else:
                    stats[_FORWARDED] += 1
                    forwarded = True
            if install:
                h_occ[s] = True
                h_kid[s] = k
                h_pc[s] = 1
                h_rc[s] = 0
                h_neg[s] = 0
                h_kick[s] = kicked
                h_tcp[s] = False
                if proto == 6:
                    _tcp_step(h_tcp, h_exp, h_lts, h_rc, s, seq[i], plen[i], flags[i], ts[i],
                              thr, literal_update)

            if literal_routing or forwarded or evicted:
                c = id_lc[k]
                mask = np.uint8(1 << (c & 7))
                if not lc_bits[c >> 3] & mask:
                    lc_bits[c >> 3] |= mask
                    new_bits += 1
            if evicted:
                c = id_lc[old]
                mask = np.uint8(1 << (c & 7))
                if not lc_bits[c >> 3] & mask:
                    lc_bits[c >> 3] |= mask
                    new_bits += 1
            if evicted:
                target = k if literal_cms else old
                for layer in range(3):
                    c = id_cms[target, layer]
                    cms_pc[layer, c] += old_pc
                    cms_rc[layer, c] += old_rc
            elif literal_routing or forwarded:
                for layer in range(3):
                    cms_pc[layer, id_cms[k, layer]] += 1
        return new_bits


@contextmanager
def _gc_paused():
    enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if enabled:
            gc.enable()


class _KeyIds(dict):
    """FlowKey -> dense id, recording each new key's table indices."""

    def __init__(self, est):
        super().__init__()
        self.keys = []
        self._heavy = est.heavy_table_._index
        self._lc = est.linear_counter_._index
        self._cms = est.cms_._index
        self._pending = []

    def __missing__(self, key):
        i = self[key] = len(self.keys)
        self.keys.append(key)
        self._pending.append((key.protocol, self._heavy[key], self._lc[key],
                              self._cms[0][key], self._cms[1][key], self._cms[2][key]))
        return i


class BatchEngine:
    def __init__(self, est, batch_size: int = 1 << 17):
        if not AVAILABLE:
            raise RuntimeError("numba is not installed")
        self.est = est
        self.batch_size = batch_size
        self.ids = _KeyIds(est)
        self._per_id = np.zeros((0, 6), dtype=np.int64)

    def _sync_ids(self):
        pending = self.ids._pending
        if pending:
            self._per_id = np.concatenate((self._per_id, np.array(pending, dtype=np.int64)))
            pending.clear()

    def consume(self, packets) -> None:
        it = iter(packets)
        while True:
            batch = list(islice(it, self.batch_size))
            if not batch:
                return
            self.run(batch)

    def run(self, batch) -> None:
        est = self.est
        cfg = est.config_
        # the transpose allocates one tuple per packet; cyclic GC passes over
        # the caller's packet list would otherwise dominate the batch cost
        with _gc_paused():
            keys, ts, seq, plen, flags = zip(*batch)
        pid = np.fromiter(map(self.ids.__getitem__, keys), dtype=np.int64, count=len(keys))

        # priority table -> arrays
        prio = est.priority_table_.entries
        pkeys = list(prio)
        p_entries = [prio[k] for k in pkeys]
        p_ids = [self.ids[k] for k in pkeys]
        self._sync_ids()
        per_id = self._per_id
        id_prio = np.full(len(per_id), -1, dtype=np.int64)
        id_prio[p_ids] = np.arange(len(pkeys))
        p_pc = np.array([e.packet_count for e in p_entries], dtype=np.int64)
        p_rc = np.array([e.retrans_count for e in p_entries], dtype=np.int64)
        p_init = np.array([e.initialized for e in p_entries], dtype=np.bool_)
        p_tcp = np.array([e.tcp is not None for e in p_entries], dtype=np.bool_)
        p_exp = np.array([e.tcp.expected_seq if e.tcp else 0 for e in p_entries], dtype=np.int64)
        p_lts = np.array([e.tcp.last_ts_ns if e.tcp else 0 for e in p_entries], dtype=np.int64)

        # heavy table -> arrays
        slots = est.heavy_table_.slots
        size = len(slots)
        h_occ = np.zeros(size, dtype=np.bool_)
        h_kid = np.full(size, -1, dtype=np.int64)
        h_pc = np.zeros(size, dtype=np.int64)
        h_rc = np.zeros(size, dtype=np.int64)
        h_tcp = np.zeros(size, dtype=np.bool_)
        h_exp = np.zeros(size, dtype=np.int64)
        h_lts = np.zeros(size, dtype=np.int64)
        h_neg = np.zeros(size, dtype=np.int64)
        h_kick = np.zeros(size, dtype=np.bool_)
        ids = self.ids
        for s, e in enumerate(slots):
            if e.occupied:
                h_occ[s] = True
                h_kid[s] = ids[e.key]
                h_pc[s] = e.packet_count
                h_rc[s] = e.retrans_count
                h_neg[s] = e.negative_count
                h_kick[s] = e.kick_flag
                if e.tcp is not None:
                    h_tcp[s] = True
                    h_exp[s] = e.tcp.expected_seq
                    h_lts[s] = e.tcp.last_ts_ns
        self._sync_ids()
        per_id = self._per_id
        if len(id_prio) < len(per_id):
            id_prio = np.concatenate((id_prio, np.full(len(per_id) - len(id_prio), -1, np.int64)))

        lc = est.linear_counter_
        lc_bits = np.frombuffer(lc.bits, dtype=np.uint8)
        cms = est.cms_
        cms_pc = np.array(cms.packets, dtype=np.int64)
        cms_rc = np.array(cms.retrans, dtype=np.int64)
        stats = np.zeros(7, dtype=np.int64)

        new_bits = _run(
            pid, np.array(ts, dtype=np.int64), np.array(seq, dtype=np.int64),
            np.array(plen, dtype=np.int64), np.array(flags, dtype=np.int64),
            np.ascontiguousarray(per_id[:, 0]), id_prio,
            np.ascontiguousarray(per_id[:, 1]), np.ascontiguousarray(per_id[:, 2]),
            np.ascontiguousarray(per_id[:, 3:6]),
            p_pc, p_rc, p_init, p_tcp, p_exp, p_lts,
            h_occ, h_kid, h_pc, h_rc, h_tcp, h_exp, h_lts, h_neg, h_kick,
            lc_bits, cms_pc, cms_rc, stats,
            cfg.retrans_threshold_ns, cfg.vote_threshold, cfg.alg1_literal_update,
            cfg.alg1_literal_cms, cfg.alg1_literal_routing, cfg.reset_votes_on_match,
        )

        # arrays -> objects
        for e, pc, rc, init, has, exp, lts in zip(
                p_entries, p_pc.tolist(), p_rc.tolist(), p_init.tolist(), p_tcp.tolist(),
                p_exp.tolist(), p_lts.tolist()):
            e.packet_count, e.retrans_count, e.initialized = pc, rc, init
            if has:
                if e.tcp is None:
                    e.tcp = TcpTrackState(exp, lts)
                else:
                    e.tcp.expected_seq, e.tcp.last_ts_ns = exp, lts
        keys_by_id = ids.keys
        for e, occ, kid, pc, rc, has, exp, lts, neg, kick in zip(
                slots, h_occ.tolist(), h_kid.tolist(), h_pc.tolist(), h_rc.tolist(),
                h_tcp.tolist(), h_exp.tolist(), h_lts.tolist(), h_neg.tolist(),
                h_kick.tolist()):
            if not occ:
                continue
            e.occupied = True
            e.key = keys_by_id[kid]
            e.packet_count, e.retrans_count = pc, rc
            e.negative_count, e.kick_flag = neg, kick
            e.tcp = TcpTrackState(exp, lts) if has else None
        lc.zeros -= int(new_bits)
        cms.packets[:] = cms_pc.tolist()
        cms.retrans[:] = cms_rc.tolist()
        st = est.stats_
        for name, v in zip(STAT_FIELDS, stats.tolist()):
            setattr(st, name, getattr(st, name) + v)

