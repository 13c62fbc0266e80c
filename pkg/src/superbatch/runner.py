"""Discrete-event pipeline engine for the five batching strategies.

The engine is single-threaded over a virtual clock. Encode calls occupy the
``gpu`` resource; upload tasks (serialize then write) run on the virtual
worker pool from :mod:`superbatch.storage`. Backend writes are applied after
the schedule is known, in commit order, so a crash at virtual time ``T``
simply keeps the commits that finished by ``T``.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Iterator, Sequence, Union

import numpy as np

from .aggregator import (
    FlushReason,
    FlushRequest,
    OutOfOrderKeyError,
    PartitionBoundaryDetector,
    SuperBatchAggregator,
    Thresholds,
)
from .clock import EventClock
from .columnar import C_SER, file_size, metered_blob, serialize_zero_copy
from .encoder import EmbeddingMatrix, Segment, VirtualEncoder, encoder_preset, slice_matrix
from .storage import (
    Backend,
    FaultInjector,
    MemoryBackend,
    UploadFailedError,
    UploadOutcome,
    UploadPoolConfig,
    VirtualUploadPool,
    get_profile,
    partition_path,
    run_attempts,
    scan_existing,
)
from .telemetry import (
    HOURLY_RATE,
    FlushRecord,
    MemoryLog,
    RunMetrics,
    aggregate_rho,
    cost_per_million,
    track_peak_memory,
)
from .workload import PartitionSpec, Workload

# --- strategies --------------------------------------------------------------


@dataclass(frozen=True)
class PBP:
    name = "pbp"


@dataclass(frozen=True)
class FSB:
    B: int = 100_000

    def __post_init__(self) -> None:
        if self.B < 1:
            raise ValueError("B must be >= 1")

    @property
    def name(self) -> str:
        return f"fsb-{self.B}"


@dataclass(frozen=True)
class SurgeSync:
    thresholds: Thresholds = Thresholds()
    name = "surge-sync"


@dataclass(frozen=True)
class SurgeAsync:
    thresholds: Thresholds = Thresholds()
    name = "surge-async"


@dataclass(frozen=True)
class PbPbpLb:
    B: int = 100_000

    def __post_init__(self) -> None:
        if self.B < 1:
            raise ValueError("B must be >= 1")

    @property
    def name(self) -> str:
        return f"pb-pbp-lb-{self.B}"


Strategy = Union[PBP, FSB, SurgeSync, SurgeAsync, PbPbpLb]


def _count(text: str) -> int:
    m = re.fullmatch(r"(\d+)([kKmM]?)", text)
    if not m:
        raise ValueError(f"bad batch size {text!r}")
    return int(m.group(1)) * {"": 1, "k": 1000, "m": 1_000_000}[m.group(2).lower()]


def parse_strategy(
    name: str, B_min: int = 100_000, B_max: int = 500_000, B: int | None = None
) -> Strategy:
    """Parse ``pbp``, ``fsb[-B]``, ``surge-sync``, ``surge-async`` or ``pb-pbp-lb[-B]``.

    Fixed batch sizes default to ``B_min`` when not given in the name.
    """
    s = name.strip().lower().replace("_", "-")
    if s == "pbp":
        return PBP()
    if s in ("surge-sync", "surge-async"):
        th = Thresholds(B_min, B_max)
        return SurgeSync(th) if s == "surge-sync" else SurgeAsync(th)
    for prefix, cls in (("pb-pbp-lb", PbPbpLb), ("fsb", FSB)):
        if s == prefix:
            return cls(B if B is not None else B_min)
        if s.startswith(prefix + "-") or s.startswith(prefix + ":"):
            return cls(_count(s[len(prefix) + 1 :]))
    raise ValueError(f"unknown strategy {name!r}")


# --- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    strategy: Strategy = SurgeAsync()
    preset: str = "L4x4-minilm"
    storage: str = "gcs"
    seed: int = 0
    workers: int = 32
    fault_rate: float = 0.0
    noise_cv: float = 0.0
    partition_overhead: float = 0.0  # seconds per partition per encode call
    max_attempts: int = 3
    backoff_base: float = 1.0
    c_ser: float = C_SER
    regroup_cost: float = 0.0  # seconds per text for the fixed-batch regroup pass
    # Flushed SuperBatches allowed to still be uploading when the next encode starts;
    # None leaves the upload queue unbounded.
    max_inflight: int | None = None
    prefix: str = "out"
    run_id: str = "run"

    def manifest(self, workload: Workload | None = None) -> dict:
        d = asdict(self)
        d["strategy"] = {"name": self.strategy.name, **asdict(self.strategy)}
        if workload is not None:
            cfg = asdict(workload.config)
            d["workload"] = {**cfg, "N": workload.total_texts, "P_actual": len(workload)}
        return d


def manifest_hash(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --- bin packing -------------------------------------------------------------


def ffd_pack(items: Sequence[PartitionSpec] | Sequence[int], B: int) -> list[list]:
    """First-Fit-Decreasing over whole partitions.

    Items are sorted by size descending, ties broken by key (or index for
    bare sizes). An item larger than ``B`` gets a bin of its own.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    if not len(items):
        return []
    if isinstance(items[0], PartitionSpec):
        sizes = [p.n_k for p in items]
        keys = [p.key for p in items]
    else:
        sizes = [int(s) for s in items]
        keys = list(range(len(sizes)))
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i], keys[i]))
    remaining = np.empty(len(sizes), dtype=np.int64)
    bins: list[list] = []
    for i in order:
        s = sizes[i]
        nb = len(bins)
        fits = np.flatnonzero(remaining[:nb] >= s)
        if fits.size:
            b = int(fits[0])
            bins[b].append(items[i])
            remaining[b] -= s
        else:
            bins.append([items[i]])
            remaining[nb] = B - s
    return bins


# --- results -----------------------------------------------------------------


@dataclass
class Commit:
    key: str
    path: str
    outcome: UploadOutcome
    payload: Any


@dataclass
class RunResult:
    config: RunConfig
    metrics: RunMetrics | None
    flushes: list[FlushRecord]
    commits: list[Commit]
    memory: MemoryLog
    clock: EventClock
    encoded: list[tuple[float, list[tuple[str, int]]]] = field(default_factory=list)
    crashed_at: float | None = None
    skipped: frozenset[str] = frozenset()

    @property
    def persisted(self) -> list[Commit]:
        """Commits that reached storage (all successful ones unless the run crashed)."""
        t = self.crashed_at
        return [c for c in self.commits if c.outcome.ok and (t is None or c.outcome.end <= t)]

    @property
    def persisted_keys(self) -> set[str]:
        return {c.key for c in self.persisted}

    def encoded_texts_lost(self) -> int:
        """Texts encoded before the crash whose partitions never reached storage."""
        if self.crashed_at is None:
            return 0
        done = self.persisted_keys
        return sum(
            n for end, rows in self.encoded if end <= self.crashed_at for key, n in rows if key not in done
        )

    def to_dict(self) -> dict:
        return {
            "manifest": self.config.manifest(),
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "flushes": [asdict(r) for r in self.flushes],
            "crashed_at": self.crashed_at,
        }


# --- engine ------------------------------------------------------------------


class _Engine:
    def __init__(self, workload: Workload, config: RunConfig, skip: frozenset[str]) -> None:
        self.workload = workload
        self.config = config
        self.skip = skip
        self.profile = encoder_preset(
            config.preset, noise_cv=config.noise_cv, partition_overhead=config.partition_overhead
        )
        self.d = self.profile.d
        self.materialized = workload.materialized
        self.encoder = VirtualEncoder(self.profile, seed=config.seed, materialize=self.materialized)
        self.encoder.warmup()
        self.storage = get_profile(config.storage, config.fault_rate)
        self.pool_config = UploadPoolConfig(config.workers, config.max_attempts, config.backoff_base)
        self.faults = FaultInjector(config.fault_rate, config.seed)
        self.pool = VirtualUploadPool(self.storage, self.pool_config, self.faults)
        self.clock = EventClock()
        self.mem = MemoryLog()
        self.flushes: list[FlushRecord] = []
        self.commits: list[Commit] = []
        self.encoded: list[tuple[float, list[tuple[str, int]]]] = []
        self.specs = {p.key: p for p in workload.partitions}

    # partition stream

    def stream(self) -> Iterator[tuple[PartitionSpec, Any]]:
        """Yield ``(spec, payload)``: payload is the text list, or the count when metered."""
        parts = [p for p in self.workload.partitions if p.key not in self.skip]
        if self.materialized:
            detector = PartitionBoundaryDetector()

            def rows():
                for spec in parts:
                    for text in self.workload.texts(spec):
                        yield spec.key, text

            for key, text in rows():
                done = detector.ingest_row(key, text)
                if done is not None:
                    yield self.specs[done[0]], done[1]
            last = detector.finish()
            if last is not None:
                yield self.specs[last[0]], last[1]
        else:
            seen: set[str] = set()
            prev = None
            for spec in parts:
                if spec.key in seen:
                    raise OutOfOrderKeyError(spec.key, prev)
                seen.add(spec.key)
                prev = spec.key
                yield spec, spec.n_k

    # I/O

    def payload(self, spec: PartitionSpec, texts, matrix: EmbeddingMatrix, start: int, end: int):
        if self.materialized:
            return serialize_zero_copy(spec.key, texts, slice_matrix(matrix, start, end))
        return metered_blob(spec.key, spec.n_k, self.d, spec.text_bytes)

    def upload(self, spec: PartitionSpec, payload, ready: float, sync: bool) -> UploadOutcome:
        path = partition_path(self.config.prefix, self.config.run_id, spec.key)
        size = len(payload)
        t_ser = self.config.c_ser * spec.n_k
        if sync:
            end, ok, attempts = run_attempts(
                path, size, ready + t_ser, self.storage, self.pool_config, self.faults
            )
            t_upl = max(0.0, end - ready - t_ser)
            out = UploadOutcome(path, ready, ready, end, ok, attempts, t_ser, t_upl, -1)
            self.clock.record("main-io", ready, end, spec.key)
        else:
            out = self.pool.submit(ready, path, size, t_ser)
            self.clock.record(f"io{out.worker}", out.start, out.end, spec.key)
        self.commits.append(Commit(spec.key, path, out, payload))
        return out

    def encode(self, segments: list[Segment], ready: float, label: str):
        matrix, dur = self.encoder.encode(segments)
        ev = self.clock.schedule("gpu", ready, dur, label)
        self.encoded.append((ev.end, [(s.key, s.n) for s in segments]))
        return matrix, ev

    def emit_batch(
        self,
        specs_texts: list[tuple[PartitionSpec, Any]],
        matrix: EmbeddingMatrix,
        ready: float,
        sync: bool,
    ) -> tuple[float, float, float]:
        """Serialize and upload every partition of an encoded batch; return (drain, t_ser, t_upl)."""
        row = 0
        cursor = ready
        drain = ready
        t_ser = t_upl = 0.0
        for spec, texts in specs_texts:
            payload = self.payload(spec, texts, matrix, row, row + spec.n_k)
            row += spec.n_k
            out = self.upload(spec, payload, cursor if sync else ready, sync)
            if sync:
                cursor = out.end
            drain = max(drain, out.end)
            t_ser += out.t_ser
            t_upl += out.t_upl
        return drain, t_ser, t_upl

    def data_bytes(self, specs: Sequence[PartitionSpec]) -> int:
        return sum(p.text_bytes + 4 * p.n_k * self.d for p in specs)

    # strategies

    def run_pbp(self) -> None:
        t = 0.0
        for i, (spec, texts) in enumerate(self.stream()):
            matrix, ev = self.encode([Segment(spec.key, spec.n_k, texts if self.materialized else None)], t, spec.key)
            t = ev.end
            drain, t_ser, t_upl = self.emit_batch([(spec, texts)], matrix, t, sync=False)
            self.mem.hold(ev.start, drain, self.data_bytes([spec]))
            self.flushes.append(
                FlushRecord(i, 1, spec.n_k, ev.duration, t_ser, t_upl, None, ev.start, drain - ev.end)
            )

    def run_surge(self, thresholds: Thresholds, sync: bool) -> None:
        agg = SuperBatchAggregator(thresholds)
        t = 0.0
        drains: list[float] = []

        def flush(req: FlushRequest) -> None:
            nonlocal t
            entries = [(self.specs[k], payload) for k, payload in req.batch.entries]
            k = self.config.max_inflight
            start = t
            if not sync and k is not None and len(drains) > k:
                start = max(t, drains[-(k + 1)])
            segments = [
                Segment(spec.key, spec.n_k, payload if self.materialized else None)
                for spec, payload in entries
            ]
            matrix, ev = self.encode(segments, start, f"flush{len(self.flushes)}")
            self.mem.alloc(ev.start, 4 * req.batch.total * self.d)
            drain, t_ser, t_upl = self.emit_batch(entries, matrix, ev.end, sync)
            self.mem.free(drain, self.data_bytes([s for s, _ in entries]))
            drains.append(drain)
            t = drain if sync else ev.end
            self.flushes.append(
                FlushRecord(
                    len(self.flushes), len(entries), req.batch.total, ev.duration,
                    t_ser, t_upl, req.reason.value, ev.start, drain - ev.end,
                )
            )

        for spec, payload in self.stream():
            self.mem.alloc(t, spec.text_bytes)
            req = agg.add_partition(spec.key, payload)
            if req is not None:
                flush(req)
        req = agg.finalize()
        if req is not None:
            flush(req)

    def run_fsb(self, B: int) -> None:
        stream = list(self.stream())
        if not stream:
            return
        specs = [s for s, _ in stream]
        sizes = np.array([s.n_k for s in specs], dtype=np.int64)
        N = int(sizes.sum())
        # Everything is resident before the first encode; labels are tracked separately.
        self.mem.alloc(0.0, sum(s.text_bytes for s in specs))
        self.mem.alloc(0.0, 8 * N, "labels")
        offsets = np.concatenate(([0], np.cumsum(sizes)))
        t = 0.0
        chunks = []
        for c, lo in enumerate(range(0, N, B)):
            hi = min(lo + B, N)
            first = int(np.searchsorted(offsets, lo, side="right")) - 1
            pieces = []
            for j in range(first, len(specs)):
                a, b = max(lo, offsets[j]), min(hi, offsets[j + 1])
                if a >= b:
                    break
                pieces.append((specs[j].key, int(a - offsets[j]), int(b - offsets[j])))
            matrix, dur = self.encoder.encode_rows(pieces)
            ev = self.clock.schedule("gpu", t, dur, f"chunk{c}")
            self.encoded.append((ev.end, [(k, b - a) for k, a, b in pieces]))
            self.mem.alloc(ev.start, 4 * (hi - lo) * self.d)
            t = ev.end
            chunks.append(matrix)
            self.flushes.append(FlushRecord(c, len(pieces), hi - lo, ev.duration, 0.0, 0.0, None, ev.start))
        # Regroup: stable argsort over per-row partition labels.
        labels = np.repeat(np.arange(len(specs)), sizes)
        order = np.argsort(labels, kind="stable")
        if self.materialized:
            full = np.concatenate([m.data for m in chunks])[order]
            matrix = EmbeddingMatrix(N, self.d, np.ascontiguousarray(full))
        else:
            matrix = EmbeddingMatrix(N, self.d)
        ready = t + self.config.regroup_cost * N
        self.mem.free(ready, 8 * N, "labels")
        row = 0
        t_ser = t_upl = 0.0
        drain = ready
        for spec, texts in stream:
            payload = self.payload(spec, texts, matrix, row, row + spec.n_k)
            row += spec.n_k
            out = self.upload(spec, payload, ready, sync=False)
            self.mem.free(out.end, self.data_bytes([spec]))
            drain = max(drain, out.end)
            t_ser += out.t_ser
            t_upl += out.t_upl
        last = self.flushes[-1]
        last.t_ser, last.t_upl, last.t_io_span = t_ser, t_upl, drain - t

    def run_lb(self, B: int) -> None:
        parts = [p for p in self.workload.partitions if p.key not in self.skip]
        t = 0.0
        for i, bin_ in enumerate(ffd_pack(parts, B)):
            texts = [self.workload.texts(s) if self.materialized else None for s in bin_]
            segments = [Segment(s.key, s.n_k, tx) for s, tx in zip(bin_, texts)]
            matrix, ev = self.encode(segments, t, f"bin{i}")
            t = ev.end
            drain, t_ser, t_upl = self.emit_batch(list(zip(bin_, texts)), matrix, t, sync=False)
            self.mem.hold(ev.start, drain, self.data_bytes(bin_))
            total = sum(s.n_k for s in bin_)
            self.flushes.append(
                FlushRecord(i, len(bin_), total, ev.duration, t_ser, t_upl, None, ev.start, drain - t)
            )

    # metrics

    def metrics(self) -> RunMetrics:
        strategy = self.config.strategy
        m = RunMetrics(strategy=strategy.name)
        N = sum(r.text_count for r in self.flushes)
        m.n_texts = N
        m.n_partitions = len({c.key for c in self.commits})
        if N == 0:
            return m
        ok = [c.outcome for c in self.commits if c.outcome.ok]
        gpu_end = self.clock.free_at("gpu")
        m.wall = max([gpu_end] + [c.outcome.end for c in self.commits])
        m.throughput = N / m.wall
        m.ttfo = min((o.end for o in ok), default=None)
        m.encode_time = sum(r.t_enc for r in self.flushes)
        m.delta = m.encode_time / m.wall
        if self.profile.intensity is not None:
            m.gpu_util = m.delta * self.profile.intensity
        m.peak_data_mem = track_peak_memory(self.mem.events, "data")
        m.label_mem = track_peak_memory(self.mem.events, "labels")
        if isinstance(strategy, (SurgeSync, SurgeAsync, PbPbpLb)):
            m.rho = aggregate_rho(self.flushes)
        m.encode_calls = self.encoder.calls
        m.flushes = len(self.flushes)
        m.emergency_flushes = sum(r.reason == FlushReason.Safety.value for r in self.flushes)
        m.cost_per_M = cost_per_million(m.wall, HOURLY_RATE, N)
        m.files_written = len(ok)
        m.failed_uploads = len(self.commits) - len(ok)
        m.max_batch = max(r.text_count for r in self.flushes)
        return m


def run(
    workload: Workload,
    config: RunConfig = RunConfig(),
    backend: Backend | None = None,
    crash_at: float | None = None,
    skip: set[str] | frozenset[str] = frozenset(),
) -> RunResult:
    """Simulate one strategy over ``workload`` and write its files to ``backend``.

    With ``crash_at`` only the commits finished by that virtual time are
    written and no metrics are produced. Keys in ``skip`` are treated as
    already persisted. Raises :class:`UploadFailedError` after writing the
    successful files if any upload exhausted its retries.
    """
    skip = frozenset(skip)
    eng = _Engine(workload, config, skip)
    s = config.strategy
    if isinstance(s, PBP):
        eng.run_pbp()
    elif isinstance(s, FSB):
        eng.run_fsb(s.B)
    elif isinstance(s, SurgeSync):
        eng.run_surge(s.thresholds, sync=True)
    elif isinstance(s, SurgeAsync):
        eng.run_surge(s.thresholds, sync=False)
    elif isinstance(s, PbPbpLb):
        eng.run_lb(s.B)
    else:
        raise TypeError(f"unknown strategy {s!r}")

    result = RunResult(
        config=config,
        metrics=None if crash_at is not None else eng.metrics(),
        flushes=eng.flushes,
        commits=eng.commits,
        memory=eng.mem,
        clock=eng.clock,
        encoded=eng.encoded,
        crashed_at=crash_at,
        skipped=skip,
    )
    if backend is not None:
        for c in sorted(result.persisted, key=lambda c: (c.outcome.end, c.path)):
            backend.write(c.path, c.payload)
    failed = [
        c.path
        for c in eng.commits
        if not c.outcome.ok and (crash_at is None or c.outcome.end <= crash_at)
    ]
    if failed and crash_at is None:
        raise UploadFailedError(failed)
    return result


# --- crash and resume --------------------------------------------------------


@dataclass
class ResumeReport:
    crashed: RunResult
    resumed: RunResult
    skipped: set[str]
    reencoded_texts: int

    @property
    def final_keys(self) -> set[str]:
        return self.skipped | self.resumed.persisted_keys


def crash_and_resume(
    workload: Workload,
    config: RunConfig,
    crash_at: float,
    backend: Backend | None = None,
) -> ResumeReport:
    """Crash a run at virtual time ``crash_at``, then resume it against the same backend."""
    backend = backend if backend is not None else MemoryBackend()
    crashed = run(workload, config, backend, crash_at=crash_at)
    done = scan_existing(backend, config.prefix, config.run_id)
    resumed = run(workload, config, backend, skip=done)
    return ResumeReport(crashed, resumed, done, crashed.encoded_texts_lost())


def expected_file_size(spec: PartitionSpec, d: int) -> int:
    return file_size(spec.key, spec.n_k, d, spec.text_bytes)
