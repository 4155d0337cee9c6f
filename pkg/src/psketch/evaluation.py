"""Exact ground truth and accuracy metrics for pipeline reports."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

from .flow_model import (
    FIN,
    SYN,
    TCP,
    UDP,
    FlowKey,
    next_expected_seq,
    parse_flow_key,
    seq_before,
)

TRUTH_HEADER = "# psketch ground truth v1"


@dataclass
class GroundTruth:
    per_flow: dict = field(default_factory=dict)  # FlowKey -> (packet_count, retrans_count)

    @property
    def distinct_flows(self) -> int:
        return len(self.per_flow)

    @property
    def total_packets(self) -> int:
        return sum(pc for pc, _ in self.per_flow.values())

    def ranked(self) -> list[FlowKey]:
        """Keys by true packet count, largest first; ties by key encoding."""
        return sorted(self.per_flow, key=lambda k: (-self.per_flow[k][0], k))

    def top_k(self, k: int) -> list[FlowKey]:
        return self.ranked()[:k]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(TRUTH_HEADER + "\n")
            fh.write(f"# distinct_flows={self.distinct_flows}\n")
            fh.write("# src_ip,dst_ip,src_port,dst_port,proto,packet_count,retrans_count\n")
            for key in sorted(self.per_flow):
                pc, rc = self.per_flow[key]
                d = key.to_dict()
                fh.write(f"{d['src_ip']},{d['dst_ip']},{key.src_port},{key.dst_port},"
                         f"{key.protocol},{pc},{rc}\n")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        per_flow = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                try:
                    head, pc, rc = line.rsplit(",", 2)
                    per_flow[parse_flow_key(head)] = (int(pc), int(rc))
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
        return cls(per_flow)


def oracle(packets) -> GroundTruth:
    """Exact per-flow counts over a packet stream.

    A TCP packet counts as a retransmission when it occupies sequence space
    (payload, SYN or FIN) and all of it ends at or before the highest next
    expected sequence seen earlier in the same flow. No timing is involved.
    Protocols other than TCP and UDP are outside the monitored scope and ignored.
    """
    counts: dict[FlowKey, list] = {}
    for p in packets:
        if p.key.protocol != TCP and p.key.protocol != UDP:
            continue
        c = counts.get(p.key)
        if c is None:
            c = counts[p.key] = [0, 0, None]
        c[0] += 1
        if p.key.protocol != TCP:
            continue
        end = next_expected_seq(p)
        highest = c[2]
        if highest is None:
            c[2] = end
            continue
        occupies = p.payload_len > 0 or p.tcp_flags & (SYN | FIN)
        if occupies and not seq_before(highest, end):
            c[1] += 1
        elif seq_before(highest, end):
            c[2] = end
    return GroundTruth({k: (c[0], c[1]) for k, c in counts.items()})


@dataclass
class MetricsReport:
    topk_detection_accuracy: float
    topk_packet_recall: float | None
    topk_retrans_recall: float | None
    priority_packet_recall: float | None
    priority_retrans_recall: float | None
    cardinality_error: float | None
    throughput_pps: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)


METRIC_FIELDS = tuple(f.name for f in fields(MetricsReport))


def flow_recall(estimate: int, truth: int) -> float:
    return min(estimate, truth) / truth


def _mean(values) -> float | None:
    # None marks an undefined metric (empty denominator set)
    values = list(values)
    return sum(values) / len(values) if values else None


def compute_metrics(topk, priority, cardinality: float, truth: GroundTruth, k: int,
                    throughput_pps: float | None = None) -> MetricsReport:
    """Score top-k and priority reports against exact truth.

    ``topk`` and ``priority`` are FlowReport sequences; ``cardinality`` is the
    combined distinct-flow estimate. Recalls are per-flow means.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    true_top = set(truth.top_k(k))
    detected = {r.key: r for r in topk[:k]}
    hits = [detected[key] for key in detected if key in true_top]
    accuracy = len(hits) / k

    per = truth.per_flow
    packet_recall = _mean(flow_recall(r.packet_count, per[r.key][0]) for r in hits)
    retrans_recall = _mean(flow_recall(r.retrans_count, per[r.key][1])
                           for r in hits if per[r.key][1] > 0)
    seen = [r for r in priority if per.get(r.key, (0, 0))[0] > 0]
    prio_packet = _mean(flow_recall(r.packet_count, per[r.key][0]) for r in seen)
    prio_retrans = _mean(flow_recall(r.retrans_count, per[r.key][1])
                         for r in seen if per[r.key][1] > 0)

    n = truth.distinct_flows
    if n == 0 or math.isinf(cardinality):
        card_err = None
    else:
        card_err = abs(cardinality - n) / n
    return MetricsReport(accuracy, packet_recall, retrans_recall, prio_packet, prio_retrans,
                         card_err, throughput_pps)


def write_metrics_csv(path, rows, extra_fields=()) -> None:
    """Append MetricsReport rows (with optional leading columns) to a CSV file."""
    header = list(extra_fields) + list(METRIC_FIELDS)
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        if new:
            writer.writeheader()
        for extra, report in rows:
            writer.writerow({**extra, **report.to_dict()})
