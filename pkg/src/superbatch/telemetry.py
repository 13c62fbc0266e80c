"""Run metrics, per-flush records and memory accounting over event logs."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

from .costmodel import overlap_ratio

HOURLY_RATE = 7.30


@dataclass
class FlushRecord:
    index: int
    partition_count: int
    text_count: int
    t_enc: float
    t_ser: float  # serialize work across the batch's partitions
    t_upl: float  # upload work including retries and backoff
    reason: str | None = None
    start: float = 0.0  # virtual time the encode began
    # Wall span from I/O submission to the batch's last persisted file; equals
    # t_ser + t_upl when I/O runs serially on the caller.
    t_io_span: float = 0.0

    def __post_init__(self) -> None:
        if self.text_count < 1:
            raise ValueError("a flush must carry at least one text")
        if min(self.t_enc, self.t_ser, self.t_upl, self.t_io_span) < 0:
            raise ValueError("flush times must be non-negative")


@dataclass
class RunMetrics:
    strategy: str = ""
    n_texts: int = 0
    n_partitions: int = 0
    throughput: float = 0.0
    wall: float = 0.0
    ttfo: float | None = None
    peak_data_mem: float = 0.0
    label_mem: float = 0.0
    rho: float | None = None
    delta: float = 0.0
    gpu_util: float | None = None
    encode_calls: int = 0
    flushes: int = 0
    emergency_flushes: int = 0
    cost_per_M: float = 0.0
    encode_time: float = 0.0
    files_written: int = 0
    failed_uploads: int = 0
    max_batch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# --- memory ------------------------------------------------------------------


@dataclass(frozen=True)
class MemEvent:
    time: float
    delta: float
    category: str = "data"


@dataclass
class MemoryLog:
    events: list[MemEvent] = field(default_factory=list)

    def alloc(self, t: float, nbytes: float, category: str = "data") -> None:
        if nbytes:
            self.events.append(MemEvent(t, nbytes, category))

    def free(self, t: float, nbytes: float, category: str = "data") -> None:
        if nbytes:
            self.events.append(MemEvent(t, -nbytes, category))

    def hold(self, start: float, end: float, nbytes: float, category: str = "data") -> None:
        self.alloc(start, nbytes, category)
        self.free(end, nbytes, category)


def track_peak_memory(events: Iterable[MemEvent], category: str | None = "data") -> float:
    """Maximum over time of live bytes; a free at time t happens before an alloc at t."""
    selected = [e for e in events if category is None or e.category == category]
    selected.sort(key=lambda e: (e.time, e.delta > 0))
    live = peak = 0.0
    for e in selected:
        live += e.delta
        peak = max(peak, live)
    return peak


# --- derived metrics ---------------------------------------------------------


def aggregate_rho(records: Sequence[FlushRecord]) -> float:
    """Run-level overlap ratio.

    Batch j's I/O can hide only behind encode j+1, so the pairs are
    ``(io_j, enc_{j+1})`` and the final batch's tail is left out. A run
    with a single batch falls back to the per-batch formula.
    """
    if not records:
        raise ValueError("aggregate_rho needs at least one flush")
    if len(records) == 1:
        r = records[0]
        return overlap_ratio(r.t_enc, r.t_io_span, 0.0)
    io = sum(r.t_io_span for r in records[:-1])
    hide = sum(r.t_enc for r in records[1:])
    if io <= 0:
        return 1.0
    return 1.0 - max(0.0, io - hide) / io


def cost_per_million(wall: float, hourly_rate: float, N: int) -> float:
    if wall <= 0 or hourly_rate <= 0 or N <= 0:
        raise ValueError("wall, hourly_rate and N must be positive")
    return wall / 3600 * hourly_rate / (N / 1e6)


def flag_anomalies(records: Sequence[FlushRecord], factor: float = 2.0) -> list[int]:
    """Indices of flushes whose per-text encode time exceeds ``factor`` x the running mean."""
    flagged = []
    total_t = total_n = 0.0
    for r in records:
        if total_n and r.t_enc / r.text_count > factor * total_t / total_n:
            flagged.append(r.index)
        total_t += r.t_enc
        total_n += r.text_count
    return flagged


# --- export ------------------------------------------------------------------


def records_to_jsonl(records: Iterable[FlushRecord]) -> str:
    return "".join(json.dumps(asdict(r)) + "\n" for r in records)


def records_from_jsonl(text: str) -> list[FlushRecord]:
    return [FlushRecord(**json.loads(line)) for line in text.splitlines() if line.strip()]


def write_csv(rows: Sequence[dict], path: str | Path | None = None) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


METRIC_FIELDS = [f.name for f in fields(RunMetrics)]
