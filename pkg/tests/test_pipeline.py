import hashlib
import itertools
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from psketch import PSketch, PipelineConfig
from psketch import _fastpath
from psketch.evaluation import oracle
from psketch.flow_model import ACK, TCP, UDP, FlowKey, PacketRecord, table_index
from psketch.pipeline import config_from_env_or_file, read_config_file

from conftest import random_keys, random_stream

MS = 1_000_000


def seg(key, seq, ts, plen=100):
    return PacketRecord(key, ts, seq, plen, ACK)


def h(obj):
    return hashlib.sha256(repr(obj).encode()).hexdigest()


def colliding(est, n):
    """n TCP keys sharing one heavy slot."""
    size, seed = est.config_.heavy_table_size, est.config_.seed_heavy
    base = FlowKey(1, 1, 1, 1, TCP)
    want = table_index(base, seed, size)
    out = [base]
    for i in itertools.count(2):
        k = FlowKey(i, 1, 1, 1, TCP)
        if table_index(k, seed, size) == want:
            out.append(k)
            if len(out) == n:
                return out


def fresh(**kw):
    return PSketch(engine="python", **kw).reset()


class TestRouting:
    def test_priority_hit_isolated(self):
        f = FlowKey(5, 6, 7, 8, TCP)
        est = PSketch(engine="python", priority_keys=(f,)).reset()
        est.process_packet(seg(FlowKey(1, 1, 1, 1, TCP), 0, 0))
        before = h({k: v for k, v in est.state_dict().items() if k in ("heavy", "linear_counter", "cms")})
        est.process_packet(seg(f, 0, 1))
        after = h({k: v for k, v in est.state_dict().items() if k in ("heavy", "linear_counter", "cms")})
        assert before == after and est.stats_.priority_hits == 1

    def test_forwarded(self):
        est = fresh()
        f, g = colliding(est, 2)
        for i in range(20):
            est.process_packet(seg(f, i * 100, i))
        est.process_packet(seg(g, 0, 100))
        assert est.stats_.forwarded == 1
        assert est.linear_counter_.zeros == est.linear_counter_.m - 1
        assert est.cms_.query(g) == (1, 0)
        assert sum(map(sum, est.cms_.packets)) == 3

    def test_eviction(self):
        est = fresh(vote_threshold=8)
        f, g = colliding(est, 2)
        for i in range(10):
            est.process_packet(seg(f, i * 100, i))
        # two stale copies after a long gap
        est.process_packet(seg(f, 0, 10 * MS))
        est.process_packet(seg(f, 100, 20 * MS))
        est.process_packet(seg(g, 0, 21 * MS))
        est.process_packet(seg(g, 100, 22 * MS))
        assert est.stats_.evictions == 1
        assert est.cms_.query(f) == (12, 2)
        e = est.heavy_table_.lookup(g)
        assert (e.packet_count, e.kick_flag) == (1, True)
        rep = est.reconstruct_flow(g)
        assert rep.source == "heavy+cms"
        assert rep.packet_count >= 2  # 1 in the slot + the forwarded packet in the sketch

    def test_literal_cms_indexes_incoming_key(self):
        est = fresh(alg1_literal_cms=True, vote_threshold=8)
        f, g = colliding(est, 2)
        for i in range(8):
            est.process_packet(seg(f, i * 100, i))
        est.process_packet(seg(g, 0, 100))
        assert est.stats_.evictions == 1
        assert est.cms_.query(g) == (8, 0)

    def test_literal_routing_counts_every_packet(self):
        est = fresh(alg1_literal_routing=True)
        f = FlowKey(1, 2, 3, 4, UDP)
        for i in range(5):
            est.process_packet(PacketRecord(f, i))
        assert est.cms_.query(f) == (5, 0)
        assert est.linear_counter_.zeros == est.linear_counter_.m - 1

    def test_non_ip_skipped(self):
        est = fresh()
        est.process_packet(PacketRecord(FlowKey(1, 2, 0, 0, 1), 0))
        assert est.stats_.non_ip_skipped == 1 and est.stats_.packets_processed == 0

    @given(st.integers(0, 2**32), st.booleans())
    def test_stats_partition(self, seed, literal):
        keys, packets = random_stream(seed=seed, n_packets=300, n_flows=40)
        est = fresh(heavy_table_size=8, priority_keys=tuple(keys[:3]), alg1_literal_routing=literal)
        for i, p in enumerate(packets, 1):
            est.process_packet(p)
            s = est.stats_
            assert s.packets_processed == (s.priority_hits + s.heavy_matched + s.heavy_installed
                                           + s.forwarded + s.evictions)
            assert s.packets_processed + s.non_ip_skipped == i


class TestReporting:
    def test_reconstruct_merge(self):
        est = fresh()
        f = FlowKey(1, 2, 3, 4, TCP)
        e = est.heavy_table_.slots[est.heavy_table_.slot_of(f)]
        e.occupied, e.key, e.packet_count, e.kick_flag = True, f, 60, True
        for layer, (i, v) in enumerate(zip(est.cms_.indices(f), (50, 45, 70))):
            est.cms_.packets[layer][i] = v
        rep = est.reconstruct_flow(f)
        assert (rep.packet_count, rep.source) == (105, "heavy+cms")
        e.kick_flag = False
        e.packet_count = 100
        assert est.reconstruct_flow(f).packet_count == 100
        assert est.reconstruct_flow(FlowKey(9, 9, 9, 9, TCP)) is None

    def test_top_k(self):
        est = fresh()
        assert est.top_k(5) == []
        keys = random_keys(random.Random(1), 3)
        for k, pc in zip(keys, (10, 20, 30)):
            e = est.heavy_table_.slots[est.heavy_table_.slot_of(k)]
            e.occupied, e.key, e.packet_count = True, k, pc
        assert [r.packet_count for r in est.top_k(2)] == [30, 20]

    def test_top_k_tie_order(self):
        est = fresh()
        keys = random_keys(random.Random(2), 6)
        for k in keys:
            est.process_packet(PacketRecord(k, 0))
        got = [r.key for r in est.top_k(6)]
        assert got == sorted(keys, key=lambda k: k)  # tuple order == big-endian byte order

    def test_cardinality_no_traffic(self):
        c = fresh().cardinality_estimate()
        assert (c.sketch_path, c.combined, c.saturated) == (0, 0, False)

    def test_cardinality_distinct_slots(self):
        est = fresh()
        rng = random.Random(4)
        keys, slots = [], set()
        while len(keys) < 10:
            k = random_keys(rng, 1)[0]
            s = est.heavy_table_.slot_of(k)
            if s not in slots:
                slots.add(s)
                keys.append(k)
        for i, k in enumerate(keys):
            est.process_packet(PacketRecord(k, i))
        c = est.cardinality_estimate()
        assert (c.sketch_path, c.combined) == (0, 10)

    def test_cardinality_single_slot(self):
        est = PSketch(heavy_table_size=1, engine="python")
        keys = random_keys(random.Random(5), 100)
        est.fit([PacketRecord(k, i) for i, k in enumerate(keys)])
        assert abs(est.cardinality_estimate().combined - 100) <= 15

    def test_collision_free_exact(self):
        keys, packets = random_stream(seed=12, n_packets=4000, n_flows=25, other_share=0)
        est = PSketch(engine="python", seed_heavy=4242).fit(packets)
        assert len({est.heavy_table_.slot_of(k) for k in keys}) == len(keys)
        truth = oracle(packets)
        for k, (pc, _) in truth.per_flow.items():
            assert est.reconstruct_flow(k).packet_count == pc


class TestEstimatorApi:
    def test_params_roundtrip(self):
        est = PSketch(vote_threshold=4, cms_width=99)
        assert est.get_params()["vote_threshold"] == 4
        c = clone(est)
        assert c.get_params() == est.get_params() and not hasattr(c, "stats_")

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            PSketch().top_k(3)

    def test_rejects_bad_input(self):
        with pytest.raises(TypeError):
            PSketch().fit([1, 2, 3])
        with pytest.raises(TypeError):
            PSketch().fit(PacketRecord(FlowKey(1, 2, 3, 4, 6), 0))

    def test_rejects_bad_params(self):
        with pytest.raises(ValueError):
            PSketch(heavy_table_size=0).reset()
        with pytest.raises(ValueError):
            PSketch(seed_heavy=1, seed_lc=1).reset()
        with pytest.raises(ValueError):
            PSketch(engine="gpu").reset()

    def test_priority_capacity_enforced(self):
        keys = random_keys(random.Random(0), 3)
        with pytest.raises(ValueError):
            PSketch(priority_keys=tuple(keys), priority_capacity=2).reset()

    def test_fit_resets_partial_fit_accumulates(self):
        _, packets = random_stream(seed=3, n_packets=2000, n_flows=50)
        a = PSketch(engine="python").fit(packets)
        b = PSketch(engine="python").fit(packets[:700]).partial_fit(packets[700:])
        assert a.state_digest() == b.state_digest()
        a.fit(packets)
        assert a.state_digest() == b.state_digest()

    def test_predict(self):
        keys, packets = random_stream(seed=5, n_packets=500, n_flows=10, other_share=0)
        est = PSketch(engine="python").fit(packets)
        out = est.predict(keys + [FlowKey(0, 0, 0, 0, TCP)])
        assert out.shape == (11, 2) and out.dtype == np.int64
        assert tuple(out[-1]) == (0, 0)
        assert out[:, 0].sum() == len(packets)

    @pytest.mark.skipif(not _fastpath.AVAILABLE, reason="numba not installed")
    def test_engines_agree_on_large_stream(self):
        keys, packets = random_stream(seed=77, n_packets=60_000, n_flows=3000)
        prio = tuple(keys[5:40:3])
        a = PSketch(engine="python", heavy_table_size=256, lc_size=4096, cms_width=64,
                    priority_keys=prio).fit(packets)
        b = clone(a).set_params(engine="numba").fit(packets)
        assert b.engine_ == "numba"
        assert a.state_digest() == b.state_digest()
        assert a.top_k(50) == b.top_k(50)


class TestConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        assert (cfg.heavy_table_size, cfg.vote_threshold, cfg.retrans_threshold_ns,
                cfg.lc_size, cfg.cms_width, cfg.cms_depth) == (4096, 8, 3 * MS, 65536, 500, 3)

    def test_file(self, tmp_path):
        p = tmp_path / "c.conf"
        p.write_text("# desk\nheavy-table-size = 1024\nvote_threshold=4\n"
                     "alg1_literal_cms = yes\nseed_cms = 0x10, 0x20, 0x30\n")
        cfg = PipelineConfig.from_file(p, vote_threshold=16)
        assert (cfg.heavy_table_size, cfg.vote_threshold, cfg.alg1_literal_cms,
                cfg.seed_cms) == (1024, 16, True, (16, 32, 48))

    @pytest.mark.parametrize("text,msg", [("bogus = 1\n", ":1: unknown"),
                                          ("\nvote_threshold\n", ":2: expected"),
                                          ("alg1_literal_cms = maybe\n", ":1: not a boolean")])
    def test_file_errors(self, tmp_path, text, msg):
        p = tmp_path / "c.conf"
        p.write_text(text)
        with pytest.raises(ValueError, match=msg):
            read_config_file(p)

    def test_env_fallback(self, tmp_path, monkeypatch):
        p = tmp_path / "c.conf"
        p.write_text("lc_size = 2048\n")
        monkeypatch.setenv("PSKETCH_CONFIG", str(p))
        assert config_from_env_or_file().lc_size == 2048
        assert config_from_env_or_file(lc_size=64).lc_size == 64
        monkeypatch.delenv("PSKETCH_CONFIG")
        assert config_from_env_or_file().lc_size == 65536

    def test_from_seed_distinct(self):
        a, b = PipelineConfig.from_seed(1), PipelineConfig.from_seed(2)
        assert a != b and len({a.seed_heavy, a.seed_lc, *a.seed_cms}) == 5
