"""Priority-aware flow monitoring: exact priority flows, top-k elephants, sketches."""

from .cms import CountMinSketch
from .evaluation import GroundTruth, MetricsReport, compute_metrics, oracle
from .flow_model import FlowKey, PacketRecord, TcpTrackState
from .heavy_table import HeavyTable
from .linear_counter import LinearCounter
from .pipeline import FlowReport, PipelineConfig, PipelineStats, PSketch
from .priority_table import PriorityTable
from .traffic import SynthConfig, generate, read_pcap, write_pcap

__version__ = "0.1.0"

__all__ = [
    "CountMinSketch",
    "FlowKey",
    "FlowReport",
    "GroundTruth",
    "HeavyTable",
    "LinearCounter",
    "MetricsReport",
    "PSketch",
    "PacketRecord",
    "PipelineConfig",
    "PipelineStats",
    "PriorityTable",
    "SynthConfig",
    "TcpTrackState",
    "compute_metrics",
    "generate",
    "oracle",
    "read_pcap",
    "write_pcap",
]
