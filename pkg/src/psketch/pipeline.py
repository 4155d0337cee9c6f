"""Priority-aware sketch pipeline as a streaming scikit-learn style estimator.

Packets go to the priority table first; everything else is tracked by the
heavy table, and whatever the heavy table cannot hold (colliding packets,
evicted flow history) goes to the linear counter and the Count-Min sketch.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import _fastpath
from . import cms as _cms
from . import heavy_table as _heavy
from . import linear_counter as _lc
from ._validation import check_int, check_packets, check_seed32
from .cms import CountMinSketch
from .flow_model import (
    DEFAULT_RETRANS_THRESHOLD_NS,
    TCP,
    UDP,
    FlowKey,
    PacketRecord,
)
from .heavy_table import FORWARDED, INSTALLED, MATCHED, Evicted, HeavyTable
from .linear_counter import LinearCounter
from .priority_table import PriorityTable, Register

COMPAT_FLAGS = (
    "alg1_literal_update",
    "alg1_literal_cms",
    "alg1_literal_routing",
    "reset_votes_on_match",
)


@dataclass(frozen=True)
class PipelineConfig:
    heavy_table_size: int = 4096
    vote_threshold: int = 8
    retrans_threshold_ns: int = DEFAULT_RETRANS_THRESHOLD_NS
    lc_size: int = 65536
    cms_width: int = 500
    cms_depth: int = _cms.DEPTH
    seed_heavy: int = _heavy.DEFAULT_SEED
    seed_lc: int = _lc.DEFAULT_SEED
    seed_cms: tuple = _cms.DEFAULT_SEEDS
    priority_capacity: int = 1024
    alg1_literal_update: bool = False
    alg1_literal_cms: bool = False
    alg1_literal_routing: bool = False
    reset_votes_on_match: bool = False

    def __post_init__(self):
        for name in ("heavy_table_size", "vote_threshold", "lc_size", "cms_width",
                     "priority_capacity"):
            check_int(name, getattr(self, name), 1)
        check_int("retrans_threshold_ns", self.retrans_threshold_ns, 0)
        if self.cms_depth != _cms.DEPTH:
            raise ValueError(f"cms_depth is fixed at {_cms.DEPTH}")
        object.__setattr__(self, "seed_cms", tuple(self.seed_cms))
        if len(self.seed_cms) != _cms.DEPTH:
            raise ValueError(f"seed_cms needs {_cms.DEPTH} values")
        seeds = (self.seed_heavy, self.seed_lc, *self.seed_cms)
        for i, s in enumerate(seeds):
            check_seed32(f"seed[{i}]", s)
        if len(set(seeds)) != len(seeds):
            raise ValueError("hash seeds must be pairwise distinct")

    @classmethod
    def from_seed(cls, base: int, **kw) -> "PipelineConfig":
        """Derive the five hash seeds from one base value."""
        seeds = [(base * 5 + i) * 0x9E3779B1 & 0xFFFFFFFF for i in range(5)]
        return cls(seed_heavy=seeds[0], seed_lc=seeds[1], seed_cms=tuple(seeds[2:]), **kw)

    @classmethod
    def from_file(cls, path, **overrides) -> "PipelineConfig":
        values = read_config_file(path)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seed_cms"] = list(self.seed_cms)
        return d


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines into PipelineConfig keyword arguments."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            name, value = (s.strip() for s in line.split("=", 1))
            name = name.replace("-", "_")
            if name not in _FIELD_TYPES:
                raise ValueError(f"{path}:{lineno}: unknown config key {name!r}")
            try:
                if _FIELD_TYPES[name] == "bool":
                    out[name] = _parse_bool(value)
                elif name == "seed_cms":
                    out[name] = tuple(int(v, 0) for v in value.split(","))
                else:
                    out[name] = int(value, 0)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


class FlowReport(NamedTuple):
    key: FlowKey
    packet_count: int
    retrans_count: int
    kick_flag: bool
    source: str  # "priority" | "heavy" | "heavy+cms"

    def to_dict(self) -> dict:
        return {
            "key": self.key.to_dict(),
            "packet_count": self.packet_count,
            "retrans_count": self.retrans_count,
            "kick_flag": self.kick_flag,
            "source": self.source,
        }


@dataclass
class PipelineStats:
    packets_processed: int = 0
    priority_hits: int = 0
    heavy_matched: int = 0
    heavy_installed: int = 0
    forwarded: int = 0
    evictions: int = 0
    non_ip_skipped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class Cardinality(NamedTuple):
    sketch_path: float
    combined: float
    saturated: bool


class PSketch(BaseEstimator):
    """Streaming priority-aware flow monitor.

    ``fit`` starts from empty tables, registers ``priority_keys`` and consumes
    a packet stream; ``partial_fit`` keeps the current state. Reporting
    (:meth:`top_k`, :meth:`reconstruct_flow`, :meth:`cardinality_estimate`)
    reflects everything consumed so far.
    """

    def __init__(self, heavy_table_size=4096, vote_threshold=8,
                 retrans_threshold_ns=DEFAULT_RETRANS_THRESHOLD_NS, lc_size=65536,
                 cms_width=500, seed_heavy=_heavy.DEFAULT_SEED, seed_lc=_lc.DEFAULT_SEED,
                 seed_cms=_cms.DEFAULT_SEEDS, priority_keys=(), priority_capacity=1024,
                 alg1_literal_update=False, alg1_literal_cms=False,
                 alg1_literal_routing=False, reset_votes_on_match=False, engine="auto"):
        self.heavy_table_size = heavy_table_size
        self.vote_threshold = vote_threshold
        self.retrans_threshold_ns = retrans_threshold_ns
        self.lc_size = lc_size
        self.cms_width = cms_width
        self.seed_heavy = seed_heavy
        self.seed_lc = seed_lc
        self.seed_cms = seed_cms
        self.priority_keys = priority_keys
        self.priority_capacity = priority_capacity
        self.alg1_literal_update = alg1_literal_update
        self.alg1_literal_cms = alg1_literal_cms
        self.alg1_literal_routing = alg1_literal_routing
        self.reset_votes_on_match = reset_votes_on_match
        self.engine = engine

    @classmethod
    def from_config(cls, config: PipelineConfig, priority_keys=()) -> "PSketch":
        params = config.to_dict()
        params.pop("cms_depth")
        params["seed_cms"] = tuple(params["seed_cms"])
        return cls(priority_keys=tuple(priority_keys), **params)

    # -- state ---------------------------------------------------------------

    def reset(self) -> "PSketch":
        """Build empty tables from the current parameters and register priority keys."""
        params = self.get_params()
        params.pop("priority_keys")
        engine = params.pop("engine")
        cfg = PipelineConfig(**params)
        self.config_ = cfg
        self.priority_table_ = PriorityTable(cfg.priority_capacity, cfg.alg1_literal_update)
        self.heavy_table_ = HeavyTable(cfg.heavy_table_size, cfg.seed_heavy,
                                       cfg.alg1_literal_update, cfg.reset_votes_on_match)
        self.linear_counter_ = LinearCounter(cfg.lc_size, cfg.seed_lc)
        self.cms_ = CountMinSketch(cfg.cms_width, cfg.seed_cms)
        self.stats_ = PipelineStats()
        self.engine_ = self._resolve_engine(engine)
        self._batch = _fastpath.BatchEngine(self) if self.engine_ == "numba" else None
        for key in self.priority_keys:
            if self.register_priority(key) is Register.AT_CAPACITY:
                raise ValueError(f"priority table full ({cfg.priority_capacity} flows)")
        return self

    @staticmethod
    def _resolve_engine(engine):
        if engine == "auto":
            return "numba" if _fastpath.AVAILABLE else "python"
        if engine == "numba" and not _fastpath.AVAILABLE:
            raise ValueError("engine='numba' requested but numba is not installed")
        if engine not in ("numba", "python"):
            raise ValueError(f"engine must be 'auto', 'python' or 'numba', got {engine!r}")
        return engine

    def _check_ready(self):
        if not hasattr(self, "stats_"):
            raise NotFittedError(f"{type(self).__name__} has no state yet; call fit, "
                                 "partial_fit or reset first")

    def register_priority(self, key: FlowKey) -> Register:
        return self.priority_table_.register(key)

    def fit(self, X, y=None):
        """Reset state and consume the packet stream ``X``."""
        self.reset()
        return self.partial_fit(X)

    def partial_fit(self, X, y=None):
        if not hasattr(self, "stats_"):
            self.reset()
        packets = check_packets(X)
        if self._batch is not None:
            self._batch.consume(packets)
            return self
        process = self.process_packet
        for p in packets:
            process(p)
        return self

    # -- per-packet path -----------------------------------------------------

    def process_packet(self, p: PacketRecord) -> None:
        stats = self.stats_
        key = p.key
        proto = key.protocol
        if proto != TCP and proto != UDP:
            stats.non_ip_skipped += 1
            return
        stats.packets_processed += 1
        cfg = self.config_
        if key in self.priority_table_.entries:
            self.priority_table_.process(p, cfg.retrans_threshold_ns)
            stats.priority_hits += 1
            return

        out = self.heavy_table_.process(p, cfg.vote_threshold, cfg.retrans_threshold_ns)
        if out is MATCHED:
            stats.heavy_matched += 1
        elif out is INSTALLED:
            stats.heavy_installed += 1
        elif out is FORWARDED:
            stats.forwarded += 1
        else:
            stats.evictions += 1

        if cfg.alg1_literal_routing:
            # every non-priority packet reaches the linear counter and the sketch
            self.linear_counter_.record(key)
            if type(out) is Evicted:
                self._absorb(out, key)
                self.linear_counter_.record(out.old_key)
            else:
                self.cms_.update_packet(key)
        elif out is FORWARDED:
            self.linear_counter_.record(key)
            self.cms_.update_packet(key)
        elif type(out) is Evicted:
            self._absorb(out, key)
            self.linear_counter_.record(key)
            # an occupant that took an empty slot was never counted anywhere else
            self.linear_counter_.record(out.old_key)

    def _absorb(self, out: Evicted, incoming: FlowKey):
        target = incoming if self.config_.alg1_literal_cms else out.old_key
        self.cms_.absorb(target, *out.old_stats)

    # -- reporting -----------------------------------------------------------

    def reconstruct_flow(self, key: FlowKey) -> FlowReport | None:
        self._check_ready()
        entry = self.priority_table_.entries.get(key)
        if entry is not None:
            return FlowReport(key, entry.packet_count, entry.retrans_count, False, "priority")
        entry = self.heavy_table_.lookup(key)
        if entry is None:
            return None
        return self._heavy_report(entry)

    def _heavy_report(self, entry) -> FlowReport:
        if not entry.kick_flag:
            return FlowReport(entry.key, entry.packet_count, entry.retrans_count, False, "heavy")
        extra = self.cms_.query(entry.key)
        return FlowReport(entry.key, entry.packet_count + extra.packet_count,
                          entry.retrans_count + extra.retrans_count, True, "heavy+cms")

    def predict(self, X) -> np.ndarray:
        """Estimated ``(packet_count, retrans_count)`` per key; zeros for untracked keys."""
        out = np.zeros((len(X), 2), dtype=np.int64)
        for i, key in enumerate(X):
            rep = self.reconstruct_flow(key)
            if rep is not None:
                out[i] = rep.packet_count, rep.retrans_count
        return out

    def top_k(self, k: int) -> list[FlowReport]:
        check_int("k", k, 1)
        self._check_ready()
        prio = self.priority_table_.entries
        reports = [self._heavy_report(e) for _, e in self.heavy_table_.occupied()
                   if e.key not in prio]
        reports.sort(key=lambda r: (-r.packet_count, r.key))
        return reports[:k]

    def priority_reports(self) -> list[FlowReport]:
        self._check_ready()
        return [FlowReport(k, e.packet_count, e.retrans_count, False, "priority")
                for k, e in sorted(self.priority_table_.snapshot())]

    def cardinality_estimate(self) -> Cardinality:
        self._check_ready()
        lc = self.linear_counter_
        sketch_path = lc.estimate()
        unkicked = sum(1 for _, e in self.heavy_table_.occupied() if not e.kick_flag)
        active_priority = sum(1 for e in self.priority_table_.entries.values() if e.initialized)
        return Cardinality(sketch_path, sketch_path + unkicked + active_priority, lc.saturated)

    def state_dict(self) -> dict:
        self._check_ready()
        return {
            "priority": self.priority_table_.state_dict(),
            "heavy": self.heavy_table_.state_dict(),
            "linear_counter": self.linear_counter_.state_dict(),
            "cms": self.cms_.state_dict(),
            "stats": self.stats_.to_dict(),
        }

    def state_digest(self) -> str:
        return hashlib.sha256(repr(self.state_dict()).encode()).hexdigest()


def config_from_env_or_file(path=None, **overrides) -> PipelineConfig:
    """Resolve a config: explicit file, else ``PSKETCH_CONFIG``, else defaults; overrides win."""
    path = path or os.environ.get("PSKETCH_CONFIG")
    if path:
        return PipelineConfig.from_file(path, **overrides)
    return PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})
