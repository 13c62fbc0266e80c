"""Latency-profiled storage, the retrying upload pool, fault injection and resume scans.

Two upload pools share the same queue semantics: :class:`VirtualUploadPool`
schedules uploads on ``W`` virtual worker timelines for the simulator, and
:class:`ThreadedUploadPool` runs them on real threads against a backend.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import os
import tempfile
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Union

from .columnar import SUFFIX, MeteredBlob

Payload = Union[bytes, bytearray, MeteredBlob]


class TransientStorageError(IOError):
    """A retryable write failure (503/429-style).

    ``duration`` is the time the failed attempt consumed, when known.
    """

    def __init__(self, message: str, duration: float = 0.0) -> None:
        super().__init__(message)
        self.duration = duration


class UploadFailedError(RuntimeError):
    """One or more uploads exhausted their retries."""

    def __init__(self, paths: Iterable[str]) -> None:
        self.paths = sorted(paths)
        shown = ", ".join(self.paths[:5]) + (" ..." if len(self.paths) > 5 else "")
        super().__init__(f"{len(self.paths)} upload(s) failed after retries: {shown}")


@dataclass(frozen=True)
class StorageProfile:
    name: str
    base_latency: float  # seconds per write
    throughput: float  # bytes per second per write; math.inf for the null profile
    fault_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.base_latency < 0:
            raise ValueError("base_latency must be >= 0")
        if not self.throughput > 0:
            raise ValueError("throughput must be > 0")
        if not 0 <= self.fault_rate < 1:
            raise ValueError("fault_rate must be in [0, 1)")

    def with_faults(self, fault_rate: float) -> "StorageProfile":
        return StorageProfile(self.name, self.base_latency, self.throughput, fault_rate)


MB = 1_000_000

# gcs and the hdfs/cross_region latencies come from measured figures; s3 latency and
# all throughputs other than gcs are calibrated choices (see README).
PROFILES: dict[str, StorageProfile] = {
    "null": StorageProfile("null", 0.0, math.inf),
    "hdfs": StorageProfile("hdfs", 0.002, 1000 * MB),
    "gcs": StorageProfile("gcs", 0.010, 200 * MB),
    "s3": StorageProfile("s3", 0.025, 200 * MB),
    "cross_region": StorageProfile("cross_region", 0.050, 40 * MB),
}


def get_profile(name: str, fault_rate: float = 0.0) -> StorageProfile:
    try:
        profile = PROFILES[name.replace("-", "_")]
    except KeyError:
        raise ValueError(f"unknown storage profile {name!r}; choose from {sorted(PROFILES)}") from None
    return profile.with_faults(fault_rate) if fault_rate else profile


def write_duration(size: int, profile: StorageProfile) -> float:
    """Seconds one write attempt of ``size`` bytes occupies a worker."""
    if math.isinf(profile.throughput):
        return profile.base_latency
    return profile.base_latency + size / profile.throughput


def write(
    backend: "Backend",
    path: str,
    data: Payload,
    profile: StorageProfile,
    faults: "FaultInjector | None" = None,
    attempt: int = 0,
) -> float:
    """One write attempt; returns its duration or raises after consuming it."""
    if not path:
        raise ValueError("empty path")
    dur = write_duration(len(data), profile)
    if faults is not None and faults.fails(path, attempt):
        raise TransientStorageError(f"injected failure writing {path} (attempt {attempt})", dur)
    backend.write(path, data)
    return dur


def partition_path(prefix: str, run_id: str, key: str) -> str:
    return f"{prefix}/{run_id}/{key}{SUFFIX}"


# --- fault injection ---------------------------------------------------------


@dataclass
class FaultInjector:
    """Decides whether a given write attempt fails.

    Decisions hash ``(seed, path, attempt)`` so they do not depend on the
    order in which writes happen; ``forced`` maps a path to the number of
    leading attempts that must fail.
    """

    rate: float = 0.0
    seed: int = 0
    forced: dict[str, int] = field(default_factory=dict)

    def fails(self, path: str, attempt: int) -> bool:
        if attempt < self.forced.get(path, 0):
            return True
        if self.rate <= 0:
            return False
        h = hashlib.blake2b(f"{self.seed}:{path}:{attempt}".encode(), digest_size=8).digest()
        return int.from_bytes(h, "little") / 2**64 < self.rate


# --- backends ----------------------------------------------------------------


class Backend(Protocol):
    def write(self, path: str, data: Payload) -> None: ...

    def exists(self, path: str) -> bool: ...

    def list(self, prefix: str) -> list[str]: ...


class MemoryBackend:
    """Dict-backed store; a write becomes visible only once complete."""

    def __init__(self) -> None:
        self.files: dict[str, Payload] = {}
        self.overwrites: list[str] = []
        self._lock = threading.Lock()

    def write(self, path: str, data: Payload) -> None:
        if not path:
            raise ValueError("empty path")
        stored = data if isinstance(data, MeteredBlob) else bytes(data)
        with self._lock:
            if path in self.files:
                self.overwrites.append(path)
            self.files[path] = stored

    def exists(self, path: str) -> bool:
        return path in self.files

    def list(self, prefix: str) -> list[str]:
        return sorted(p for p in self.files if p.startswith(prefix))

    def read(self, path: str) -> Payload:
        return self.files[path]


class FileSystemBackend:
    """Files under ``root``; writes go to a temp file and are renamed into place."""

    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root)
        self.overwrites: list[str] = []

    def _full(self, path: str) -> Path:
        return self.root / path

    def write(self, path: str, data: Payload) -> None:
        if not path:
            raise ValueError("empty path")
        full = self._full(path)
        full.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(data, MeteredBlob):
            data = f"METERED {data.size} {data.digest}\n".encode()
        if full.exists():
            self.overwrites.append(path)
        fd, tmp = tempfile.mkstemp(dir=full.parent, prefix=".tmp-")
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, full)

    def exists(self, path: str) -> bool:
        return self._full(path).is_file()

    def list(self, prefix: str) -> list[str]:
        base = self._full(prefix)
        if not base.exists():
            return []
        out = []
        for p in base.rglob("*"):
            if p.is_file() and not p.name.startswith(".tmp-"):
                out.append(p.relative_to(self.root).as_posix())
        return sorted(out)

    def read(self, path: str) -> bytes:
        return self._full(path).read_bytes()


class FaultyBackend:
    """Wraps a backend and raises :class:`TransientStorageError` on injected faults."""

    def __init__(self, inner: Backend, faults: FaultInjector) -> None:
        self.inner = inner
        self.faults = faults
        self._attempts: dict[str, int] = {}
        self._lock = threading.Lock()

    def write(self, path: str, data: Payload) -> None:
        with self._lock:
            attempt = self._attempts.get(path, 0)
            self._attempts[path] = attempt + 1
        if self.faults.fails(path, attempt):
            raise TransientStorageError(f"injected failure writing {path} (attempt {attempt})")
        self.inner.write(path, data)

    def exists(self, path: str) -> bool:
        return self.inner.exists(path)

    def list(self, prefix: str) -> list[str]:
        return self.inner.list(prefix)


def scan_existing(backend: Backend, prefix: str, run_id: str) -> set[str]:
    """Keys whose partition files are fully written under ``prefix/run_id``."""
    base = f"{prefix}/{run_id}/"
    keys = set()
    for p in backend.list(base):
        name = p[len(base) :]
        if "/" not in name and name.endswith(SUFFIX):
            keys.add(name[: -len(SUFFIX)])
    return keys


# --- upload pools ------------------------------------------------------------


@dataclass(frozen=True)
class UploadPoolConfig:
    W: int = 32
    max_attempts: int = 3
    backoff_base: float = 1.0

    def __post_init__(self) -> None:
        if self.W < 1:
            raise ValueError("W must be >= 1")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def backoff(self, attempt: int) -> float:
        return self.backoff_base * 2**attempt


@dataclass(frozen=True)
class UploadOutcome:
    path: str
    submitted: float
    start: float
    end: float
    ok: bool
    attempts: int
    t_ser: float
    t_upl: float  # write attempts plus backoff sleeps
    worker: int


def run_attempts(
    path: str,
    size: int,
    start: float,
    profile: StorageProfile,
    config: UploadPoolConfig,
    faults: FaultInjector,
) -> tuple[float, bool, int]:
    """Play out up to ``max_attempts`` writes from ``start``; return ``(end, ok, attempts)``."""
    t = start
    dur = write_duration(size, profile)
    for a in range(config.max_attempts):
        t += dur
        if not faults.fails(path, a):
            return t, True, a + 1
        if a < config.max_attempts - 1:
            t += config.backoff(a)
    return t, False, config.max_attempts


class VirtualUploadPool:
    """``W`` virtual I/O workers; each task runs serialize then write-with-retry.

    ``submit`` returns immediately with the task's scheduled outcome and
    never touches the caller's timeline.
    """

    def __init__(
        self,
        profile: StorageProfile,
        config: UploadPoolConfig = UploadPoolConfig(),
        faults: FaultInjector | None = None,
    ) -> None:
        self.profile = profile
        self.config = config
        self.faults = faults or FaultInjector(profile.fault_rate)
        self._free = [(0.0, w) for w in range(config.W)]
        heapq.heapify(self._free)
        self.outcomes: list[UploadOutcome] = []

    def submit(self, ready: float, path: str, size: int, t_ser: float = 0.0) -> UploadOutcome:
        free_at, worker = heapq.heappop(self._free)
        start = max(ready, free_at)
        end, ok, attempts = run_attempts(
            path, size, start + t_ser, self.profile, self.config, self.faults
        )
        heapq.heappush(self._free, (end, worker))
        out = UploadOutcome(
            path, ready, start, end, ok, attempts, t_ser, max(0.0, end - start - t_ser), worker
        )
        self.outcomes.append(out)
        return out

    @property
    def quiescent_at(self) -> float:
        return max((t for t, _ in self._free), default=0.0)

    def failed(self) -> list[str]:
        return [o.path for o in self.outcomes if not o.ok]


class ThreadedUploadPool:
    """Real worker threads writing to a backend, retrying with exponential backoff."""

    def __init__(
        self,
        backend: Backend,
        config: UploadPoolConfig = UploadPoolConfig(),
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.backend = backend
        self.config = config
        self._sleep = sleep
        self._executor = ThreadPoolExecutor(max_workers=config.W, thread_name_prefix="upload")
        self.pending: dict[str, Future] = {}
        self.attempts: dict[str, int] = {}

    def _upload_with_retry(self, path: str, data: Payload) -> int:
        for a in range(self.config.max_attempts):
            try:
                self.backend.write(path, data)
                return a + 1
            except TransientStorageError:
                self.attempts[path] = a + 1
                if a < self.config.max_attempts - 1:
                    self._sleep(self.config.backoff(a))
        raise UploadFailedError([path])

    def async_upload(self, path: str, data: Payload) -> Future:
        fut = self._executor.submit(self._upload_with_retry, path, data)
        self.pending[path] = fut
        return fut

    def drain(self) -> dict[str, int]:
        """Wait for every pending upload; raise if any exhausted its retries."""
        done: dict[str, int] = {}
        failed = []
        for path, fut in list(self.pending.items()):
            try:
                done[path] = fut.result()
            except UploadFailedError:
                failed.append(path)
        self.pending.clear()
        if failed:
            raise UploadFailedError(failed)
        return done

    def close(self) -> None:
        self._executor.shutdown(wait=True)

    def __enter__(self) -> "ThreadedUploadPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
