"""Streaming SuperBatch aggregation for partitioned embedding pipelines, with a discrete-event simulator."""

from .aggregator import FlushReason, SuperBatchAggregator, Thresholds
from .costmodel import CostParams, get_preset, predict_speedup
from .runner import FSB, PBP, PbPbpLb, RunConfig, SurgeAsync, SurgeSync, parse_strategy, run
from .workload import LogNormalParams, WorkloadConfig, generate_workload

__all__ = [
    "CostParams",
    "FSB",
    "FlushReason",
    "LogNormalParams",
    "PBP",
    "PbPbpLb",
    "RunConfig",
    "SuperBatchAggregator",
    "SurgeAsync",
    "SurgeSync",
    "Thresholds",
    "WorkloadConfig",
    "generate_workload",
    "get_preset",
    "parse_strategy",
    "predict_speedup",
    "run",
]

__version__ = "0.1.0"
