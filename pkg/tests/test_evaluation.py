import csv
import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from psketch import PSketch
from psketch.evaluation import (
    METRIC_FIELDS, GroundTruth, MetricsReport, compute_metrics, flow_recall, oracle,
    write_metrics_csv,
)
from psketch.flow_model import ACK, TCP, UDP, FlowKey, PacketRecord
from psketch.pipeline import FlowReport

from conftest import random_keys, random_stream

F = FlowKey(1, 2, 3, 4, TCP)


def seg(seq, ts=0, plen=100, key=F):
    return PacketRecord(key, ts, seq, plen, ACK)


def report(key, pc, rc=0):
    return FlowReport(key, pc, rc, False, "heavy")


class TestOracle:
    def test_in_order(self):
        assert oracle([seg(0), seg(100), seg(200)]).per_flow == {F: (3, 0)}

    def test_one_duplicate(self):
        assert oracle([seg(0), seg(100), seg(100), seg(200)]).per_flow == {F: (4, 1)}

    def test_reordering_counts_once(self):
        # 200 overtakes 100; the late 100 lies below the highest end and is counted
        assert oracle([seg(0), seg(200), seg(100)]).per_flow == {F: (3, 1)}

    def test_pure_ack_not_retransmission(self):
        assert oracle([seg(0), seg(100, plen=0), seg(50, plen=0)]).per_flow == {F: (3, 0)}

    def test_udp(self):
        u = FlowKey(1, 2, 3, 4, UDP)
        assert oracle([PacketRecord(u, 0), PacketRecord(u, 1)]).per_flow == {u: (2, 0)}

    @given(st.integers(0, 2**32))
    def test_deterministic(self, seed):
        _, packets = random_stream(seed=seed, n_packets=200, n_flows=10)
        assert oracle(packets) == oracle(list(packets))

    def test_sidecar_roundtrip(self, tmp_path):
        _, packets = random_stream(seed=1, n_packets=500, n_flows=30)
        truth = oracle(packets)
        truth.save(tmp_path / "t.truth")
        text = (tmp_path / "t.truth").read_text().splitlines()
        assert text[0] == "# psketch ground truth v1" and text[1] == "# distinct_flows=30"
        assert GroundTruth.load(tmp_path / "t.truth") == truth

    def test_sidecar_error_line(self, tmp_path):
        p = tmp_path / "t.truth"
        p.write_text("# x\n1.2.3.4,5.6.7.8,1,2,6,x,0\n")
        with pytest.raises(ValueError, match=":2:"):
            GroundTruth.load(p)


class TestMetrics:
    def test_perfect(self):
        keys = random_keys(random.Random(1), 5)
        truth = GroundTruth({k: (100 - i, 3) for i, k in enumerate(keys)})
        top = [report(k, *truth.per_flow[k]) for k in keys[:3]]
        prio = [FlowReport(keys[4], 96, 3, False, "priority")]
        m = compute_metrics(top, prio, 5, truth, k=3)
        assert m == MetricsReport(1.0, 1.0, 1.0, 1.0, 1.0, 0.0, None)

    def test_overlap_48_of_50(self):
        keys = random_keys(random.Random(2), 60)
        truth = GroundTruth({k: (1000 - i, 0) for i, k in enumerate(keys)})
        top = [report(k, truth.per_flow[k][0]) for k in keys[:48] + keys[55:57]]
        m = compute_metrics(top, [], 60, truth, k=50)
        assert m.topk_detection_accuracy == pytest.approx(0.96)
        assert m.topk_retrans_recall is None and m.priority_packet_recall is None

    def test_flow_recall(self):
        assert flow_recall(90, 100) == pytest.approx(0.9)
        assert flow_recall(120, 100) == 1.0

    def test_cardinality_inf_undefined(self):
        truth = GroundTruth({F: (1, 0)})
        assert compute_metrics([], [], float("inf"), truth, 1).cardinality_error is None

    def test_json_and_csv(self, tmp_path):
        m = MetricsReport(0.5, 0.9, None, 1.0, 1.0, 0.01, 123.0)
        assert list(json.loads(m.to_json())) == list(METRIC_FIELDS)
        p = tmp_path / "m.csv"
        write_metrics_csv(p, [({"k": 50}, m)], extra_fields=("k",))
        write_metrics_csv(p, [({"k": 100}, m)], extra_fields=("k",))
        rows = list(csv.DictReader(p.open()))
        assert [r["k"] for r in rows] == ["50", "100"] and rows[0]["topk_retrans_recall"] == ""

    def test_collision_free_trace_is_perfect(self):
        keys, packets = random_stream(seed=21, n_packets=3000, n_flows=20, other_share=0)
        est = PSketch(engine="python", seed_heavy=4242).fit(packets)
        assert len({est.heavy_table_.slot_of(k) for k in keys}) == len(keys)
        truth = oracle(packets)
        m = compute_metrics(est.top_k(10), [], est.cardinality_estimate().combined, truth, 10)
        assert m.topk_detection_accuracy == 1.0 and m.topk_packet_recall == 1.0

    @given(st.integers(0, 2**32))
    def test_priority_recall_exact(self, seed):
        keys, packets = random_stream(seed=seed, n_packets=500, n_flows=30)
        prio = keys[::3]
        est = PSketch(engine="python", heavy_table_size=4, priority_keys=tuple(prio)).fit(packets)
        m = compute_metrics(est.top_k(5), est.priority_reports(), 0, oracle(packets), 5)
        assert m.priority_packet_recall in (1.0, None)


def test_oracle_ignores_unmonitored_protocols():
    icmp = FlowKey(1, 2, 0, 0, 1)
    assert oracle([PacketRecord(icmp, 0), seg(0)]).per_flow == {F: (1, 0)}
