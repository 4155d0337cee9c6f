"""Command-line front end: ``psketch generate | run | bench``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time

from . import __version__
from .evaluation import GroundTruth, compute_metrics, oracle, write_metrics_csv
from .pipeline import COMPAT_FLAGS, PipelineConfig, PSketch, read_config_file
from .priority_table import load_priority_keys
from .traffic import PcapError, SynthConfig, generate, read_pcap, write_pcap

log = logging.getLogger("psketch")

TRUTH_SUFFIX = ".truth"


class CliError(Exception):
    """Reported as a one-line diagnostic with exit status 1."""


class UsageError(CliError):
    """Invalid flag combination; reported through argparse with exit status 2."""


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _unit_interval(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {value}")
    return value


def _non_negative_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value >= 0 or math.isinf(value):
        raise argparse.ArgumentTypeError(f"must be a finite number >= 0, got {text}")
    return value


def _ms_to_ns(ms: float) -> int:
    return int(round(ms * 1_000_000))


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# -- argument parsing ----------------------------------------------------------


def _add_pipeline_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("pipeline")
    g.add_argument("--config", help="key = value config file (default: $PSKETCH_CONFIG)")
    g.add_argument("--heavy-size", type=_positive_int, help="heavy table slots (default 4096)")
    g.add_argument("--vote-threshold", type=_positive_int, help="eviction vote weight (default 8)")
    g.add_argument("--retrans-threshold-ms", type=_non_negative_float,
                   help="retransmission gap threshold in ms (default 3)")
    g.add_argument("--lc-size", type=_positive_int, help="linear counter cells (default 65536)")
    g.add_argument("--cms-width", type=_positive_int, help="CMS width per layer (default 500)")
    for flag in COMPAT_FLAGS:
        g.add_argument("--" + flag.replace("_", "-"), dest=flag,
                       action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--engine", choices=("auto", "python", "numba"), default="auto",
                   help="batch engine for trace replay")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psketch", description=__doc__)
    parser.add_argument("--version", action="version", version=f"psketch {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic pcap and its ground-truth sidecar")
    gen.add_argument("--out", required=True, help="output pcap path")
    gen.add_argument("--flows", type=_positive_int, default=1000)
    gen.add_argument("--packets", type=_positive_int, default=100_000)
    gen.add_argument("--zipf", type=_non_negative_float, default=1.0)
    gen.add_argument("--tcp-fraction", type=_unit_interval, default=0.8)
    gen.add_argument("--retrans-rate", type=_unit_interval, default=0.0)
    gen.add_argument("--retrans-gap-ms", type=_non_negative_float, default=5.0)
    gen.add_argument("--seed", type=_non_negative_int, default=42)
    gen.add_argument("--with-payload", action="store_true",
                     help="store zero-filled payload bytes instead of headers only")

    run = sub.add_parser("run", help="replay a trace through the pipeline and report")
    run.add_argument("--trace", required=True, help="pcap file")
    run.add_argument("--out", help="write the JSON report here instead of stdout")
    run.add_argument("--k", type=_positive_int, default=50)
    run.add_argument("--priority", help="priority key file")
    run.add_argument("--oracle", action="store_true",
                     help="compute exact truth from the trace and include metrics")
    run.add_argument("--seed", type=_non_negative_int, help="derive all hash seeds from this value")
    run.add_argument("--csv", help="append the metrics row to this CSV file")
    _add_pipeline_flags(run)

    bench = sub.add_parser("bench", help="measure pipeline throughput")
    bench.add_argument("--trace", help="pcap file (default: synthesize in memory)")
    bench.add_argument("--packets", type=_positive_int, default=1_000_000)
    bench.add_argument("--flows", type=_positive_int, default=10_000)
    bench.add_argument("--zipf", type=_non_negative_float, default=1.0)
    bench.add_argument("--seed", type=_non_negative_int, default=42)
    bench.add_argument("--passes", type=_positive_int, default=3)
    bench.add_argument("--out", help="write the JSON summary here")
    _add_pipeline_flags(bench)
    return parser


def resolve_config(args) -> PipelineConfig:
    """Config file (or $PSKETCH_CONFIG), then CLI flags on top."""
    values = {}
    path = args.config or os.environ.get("PSKETCH_CONFIG")
    if path:
        try:
            values.update(read_config_file(path))
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc.strerror}") from None
        except ValueError as exc:
            raise CliError(str(exc)) from None
    flags = {
        "heavy_table_size": args.heavy_size,
        "vote_threshold": args.vote_threshold,
        "retrans_threshold_ns": (None if args.retrans_threshold_ms is None
                                 else _ms_to_ns(args.retrans_threshold_ms)),
        "lc_size": args.lc_size,
        "cms_width": args.cms_width,
    }
    flags.update({f: getattr(args, f) for f in COMPAT_FLAGS})
    values.update({k: v for k, v in flags.items() if v is not None})
    seed = getattr(args, "seed", None)
    try:
        if seed is not None and args.command == "run":
            return PipelineConfig.from_seed(seed, **{k: v for k, v in values.items()
                                                     if not k.startswith("seed_")})
        return PipelineConfig(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from None


# -- commands --------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.packets < args.flows:
        raise UsageError(f"--packets ({args.packets}) must be at least --flows ({args.flows})")
    cfg = SynthConfig(
        flow_count=args.flows,
        total_packets=args.packets,
        zipf_alpha=args.zipf,
        tcp_fraction=args.tcp_fraction,
        retrans_rate=args.retrans_rate,
        retrans_gap_ns=max(1, _ms_to_ns(args.retrans_gap_ms)),
        rng_seed=args.seed,
    )
    trace, truth = generate(cfg)
    n = write_pcap(args.out, trace, with_payload=args.with_payload)
    truth_path = args.out + TRUTH_SUFFIX
    truth.save(truth_path)
    injected = sum(rc for _, rc in truth.per_flow.values())
    print(f"flows={truth.distinct_flows} packets={n} injected_retransmissions={injected}")
    print(f"trace={args.out} sha256={file_digest(args.out)}")
    print(f"truth={truth_path} sha256={file_digest(truth_path)}")
    return 0


def _open_trace(path):
    try:
        return read_pcap(path)
    except OSError as exc:
        raise CliError(f"cannot read trace {path}: {exc.strerror}") from None
    except PcapError as exc:
        raise CliError(f"unreadable trace: {exc}") from None


def _cardinality_dict(card) -> dict:
    return {
        "sketch_path": None if card.saturated else card.sketch_path,
        "combined": None if card.saturated else card.combined,
        "saturated": card.saturated,
    }


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    trace = _open_trace(args.trace)
    priority = []
    if args.priority:
        try:
            priority = load_priority_keys(args.priority)
        except OSError as exc:
            raise CliError(f"cannot read priority file {args.priority}: {exc.strerror}") from None
        except ValueError as exc:
            raise CliError(f"priority file: {exc}") from None

    try:
        est = PSketch.from_config(cfg, priority_keys=priority)
        est.set_params(engine=args.engine)
        est.reset()
    except ValueError as exc:
        raise CliError(str(exc)) from None
    start = time.perf_counter()
    est.partial_fit(trace)
    elapsed = time.perf_counter() - start
    est.stats_.non_ip_skipped += trace.skipped
    processed = est.stats_.packets_processed
    pps = processed / elapsed if elapsed > 0 and processed else 0.0
    if trace.truncated_at is not None:
        print(f"psketch: warning: {args.trace}: truncated record at byte offset "
              f"{trace.truncated_at}", file=sys.stderr)

    card = est.cardinality_estimate()
    topk = est.top_k(args.k)
    prio_reports = est.priority_reports()
    report = {
        "manifest": {
            "tool": "psketch",
            "version": __version__,
            "config": cfg.to_dict(),
            "seeds": {"heavy": cfg.seed_heavy, "linear_counter": cfg.seed_lc,
                      "cms": list(cfg.seed_cms), "base": args.seed},
            "trace": {"path": args.trace, "sha256": file_digest(args.trace)},
            "priority_file": (None if not args.priority else
                              {"path": args.priority, "sha256": file_digest(args.priority)}),
            "k": args.k,
        },
        "pipeline_stats": est.stats_.to_dict(),
        "topk": [r.to_dict() for r in topk],
        "priority": [r.to_dict() for r in prio_reports],
        "cardinality": _cardinality_dict(card),
        "throughput_pps": pps,
    }

    truth = None
    sidecar = args.trace + TRUTH_SUFFIX
    if args.oracle:
        truth = oracle(trace)
        report["manifest"]["truth"] = {"source": "oracle"}
    elif os.path.exists(sidecar):
        try:
            truth = GroundTruth.load(sidecar)
        except ValueError as exc:
            raise CliError(f"truth sidecar: {exc}") from None
        report["manifest"]["truth"] = {"source": "sidecar", "path": sidecar,
                                       "sha256": file_digest(sidecar)}
    if truth is not None:
        metrics = compute_metrics(topk, prio_reports, card.combined, truth, args.k, pps)
        report["metrics"] = metrics.to_dict()
        if args.csv:
            write_metrics_csv(args.csv, [({"trace": args.trace, "k": args.k}, metrics)],
                              extra_fields=("trace", "k"))

    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    if args.trace:
        packets = list(_open_trace(args.trace))
        source = {"trace": args.trace}
    else:
        trace, _ = generate(SynthConfig(flow_count=min(args.flows, args.packets),
                                        total_packets=args.packets, zipf_alpha=args.zipf,
                                        rng_seed=args.seed))
        packets = list(trace)
        source = {"synthetic": {"flows": min(args.flows, args.packets), "zipf": args.zipf,
                                "seed": args.seed}}
    if not packets:
        raise CliError("no packets to benchmark")

    est = PSketch.from_config(cfg)
    est.set_params(engine=args.engine)
    # warm-up: compile and load the batch kernel outside the timed passes
    est.fit(packets[:1000])
    rates = []
    for i in range(args.passes):
        est.reset()
        start = time.perf_counter()
        est.partial_fit(packets)
        elapsed = time.perf_counter() - start
        rates.append(len(packets) / elapsed)
        print(f"pass {i + 1}: {len(packets)} packets in {elapsed:.3f} s = {rates[-1]:,.0f} pps")
    best = max(rates)
    print(f"best: {best:,.0f} pps (engine={est.engine_})")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"packets": len(packets), "passes": rates, "best_pps": best,
                       "engine": est.engine_, "source": source, "config": cfg.to_dict(),
                       "version": __version__}, fh, indent=2)
            fh.write("\n")
    return 0


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(name)s: %(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except CliError as exc:
        print(f"psketch: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
