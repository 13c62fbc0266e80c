"""Synthetic partitioned workloads with log-normal partition sizes."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MATERIALIZED = "materialized"
METERED = "metered"

# Maps every byte to a lowercase letter or a space so synthetic texts stay printable.
_TEXT_TABLE = bytes((ord("a") + (b % 26)) if b % 27 else ord(" ") for b in range(256))


@dataclass(frozen=True)
class LogNormalParams:
    mu_log: float = 9.03
    sigma_log: float = 1.72

    def __post_init__(self) -> None:
        if not self.sigma_log > 0:
            raise ValueError(f"sigma_log must be > 0, got {self.sigma_log}")

    @property
    def median(self) -> float:
        return math.exp(self.mu_log)

    @property
    def cv(self) -> float:
        """Coefficient of variation of the un-truncated distribution."""
        return math.sqrt(math.expm1(self.sigma_log**2))

    @classmethod
    def from_moments(cls, mean: float, std: float) -> "LogNormalParams":
        """Log-space parameters whose linear-space mean and std match."""
        s2 = math.log1p((std / mean) ** 2)
        return cls(mu_log=math.log(mean) - s2 / 2, sigma_log=math.sqrt(s2))


@dataclass(frozen=True)
class PartitionSpec:
    key: str
    n_k: int
    avg_text_len: float

    def __post_init__(self) -> None:
        if self.n_k < 1:
            raise ValueError(f"partition {self.key!r}: n_k must be >= 1, got {self.n_k}")
        if not self.avg_text_len > 0:
            raise ValueError(f"partition {self.key!r}: avg_text_len must be > 0")

    @property
    def text_bytes(self) -> int:
        return int(round(self.n_k * self.avg_text_len))


@dataclass(frozen=True)
class WorkloadConfig:
    P: int = 4000
    size_dist: LogNormalParams = field(default_factory=LogNormalParams)
    min_size: int = 1
    avg_text_len: int = 47
    seed: int = 0
    text_mode: str | None = None
    # When set, raw draws are rescaled so the sizes sum to exactly this many texts.
    total_texts: int | None = None

    def __post_init__(self) -> None:
        if self.P < 1:
            raise ValueError(f"P must be >= 1, got {self.P}")
        if self.min_size < 1:
            raise ValueError(f"min_size must be >= 1, got {self.min_size}")
        if self.avg_text_len < 1:
            raise ValueError(f"avg_text_len must be >= 1, got {self.avg_text_len}")
        if self.text_mode not in (None, MATERIALIZED, METERED):
            raise ValueError(f"unknown text_mode {self.text_mode!r}")
        if self.total_texts is not None and self.total_texts < self.P * self.min_size:
            raise ValueError(
                f"total_texts={self.total_texts} cannot give {self.P} partitions "
                f"of at least {self.min_size} texts"
            )

    @property
    def mode(self) -> str:
        """Effective text mode; metered is the default for a million texts or more."""
        if self.text_mode is not None:
            return self.text_mode
        expected = self.total_texts
        if expected is None:
            d = self.size_dist
            expected = self.P * math.exp(d.mu_log + d.sigma_log**2 / 2)
        return METERED if expected >= 1_000_000 else MATERIALIZED


@dataclass(frozen=True)
class SizeStats:
    mean: float
    std: float
    cv: float
    median: float
    min: int
    max: int
    total_N: int


@dataclass
class Workload:
    """An ordered sequence of partitions plus the config that produced it."""

    config: WorkloadConfig
    partitions: list[PartitionSpec]
    raw_stats: SizeStats | None = None

    def __iter__(self) -> Iterator[PartitionSpec]:
        return iter(self.partitions)

    def __len__(self) -> int:
        return len(self.partitions)

    def __getitem__(self, i):
        return self.partitions[i]

    @property
    def total_texts(self) -> int:
        return sum(p.n_k for p in self.partitions)

    @property
    def n_max(self) -> int:
        return max((p.n_k for p in self.partitions), default=0)

    @property
    def materialized(self) -> bool:
        return self.config.mode == MATERIALIZED

    def sizes(self) -> np.ndarray:
        return np.fromiter((p.n_k for p in self.partitions), dtype=np.int64, count=len(self))

    def reordered(self, order: Sequence[int]) -> "Workload":
        """Same partitions in a different arrival order (keys travel with their sizes)."""
        return Workload(self.config, [self.partitions[i] for i in order], self.raw_stats)

    def subset(self, exclude: set[str]) -> "Workload":
        return Workload(
            self.config, [p for p in self.partitions if p.key not in exclude], self.raw_stats
        )

    def texts(self, spec: PartitionSpec) -> list[bytes]:
        """Materialize every text of one partition."""
        lens = text_lengths(spec.key, spec.n_k, self.config.avg_text_len, self.config.seed)
        return [
            materialize_text(spec.key, i, int(n), self.config.seed) for i, n in enumerate(lens)
        ]

    def rows(self) -> Iterator[tuple[str, bytes]]:
        """Stream ``(key, text)`` rows in partition-key order."""
        for spec in self.partitions:
            for text in self.texts(spec):
                yield spec.key, text


def partition_key(index: int, width: int = 7) -> str:
    return f"p{index:0{width}d}"


def _rescale(raw: np.ndarray, total: int, min_size: int) -> np.ndarray:
    """Integer sizes proportional to ``raw`` that sum to ``total`` (largest remainder)."""
    scaled = raw * (total / raw.sum())
    sizes = np.floor(scaled).astype(np.int64)
    short = total - int(sizes.sum())
    if short:
        frac = scaled - sizes
        # Stable sort keeps ties in generation order.
        sizes[np.argsort(-frac, kind="stable")[:short]] += 1
    low = sizes < min_size
    if low.any():
        deficit = int((min_size - sizes[low]).sum())
        sizes[low] = min_size
        for i in np.argsort(-sizes, kind="stable"):
            if not deficit:
                break
            take = min(deficit, int(sizes[i]) - min_size)
            sizes[i] -= take
            deficit -= take
    return sizes


def generate_workload(config: WorkloadConfig) -> Workload:
    """Draw ``P`` log-normal partition sizes; keys follow generation order."""
    rng = np.random.default_rng(config.seed)
    dist = config.size_dist
    draws = np.exp(rng.normal(dist.mu_log, dist.sigma_log, size=config.P))
    raw = np.maximum(config.min_size, np.rint(draws)).astype(np.int64)
    raw_stats = _stats_of(raw)
    sizes = raw if config.total_texts is None else _rescale(raw.astype(float), config.total_texts, config.min_size)

    width = max(7, len(str(config.P - 1)))
    if config.mode == MATERIALIZED:
        avg = [
            float(text_lengths(partition_key(i, width), int(n), config.avg_text_len, config.seed).mean())
            for i, n in enumerate(sizes)
        ]
    else:
        avg = [float(config.avg_text_len)] * config.P
    parts = [
        PartitionSpec(partition_key(i, width), int(n), avg[i]) for i, n in enumerate(sizes)
    ]
    return Workload(config, parts, raw_stats)


def _stats_of(sizes: np.ndarray) -> SizeStats:
    if sizes.size == 0:
        raise ValueError("size statistics need a non-empty workload")
    mean = float(sizes.mean())
    std = float(sizes.std())
    return SizeStats(
        mean=mean,
        std=std,
        cv=std / mean,
        median=float(np.median(sizes)),
        min=int(sizes.min()),
        max=int(sizes.max()),
        total_N=int(sizes.sum()),
    )


def size_stats(workload: Workload | Sequence[PartitionSpec] | np.ndarray) -> SizeStats:
    """Exact sample statistics (population std) of the partition sizes."""
    if isinstance(workload, Workload):
        sizes = workload.sizes()
    elif isinstance(workload, np.ndarray):
        sizes = workload
    else:
        sizes = np.array([p.n_k for p in workload], dtype=np.int64)
    return _stats_of(sizes)


def _digest_seed(*parts: object) -> int:
    h = hashlib.blake2b(":".join(map(str, parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def text_lengths(key: str, n: int, avg_len: int, seed: int = 0) -> np.ndarray:
    """Per-text byte lengths, uniform in [avg/2, 3avg/2] and at least 1."""
    rng = np.random.default_rng(_digest_seed("len", seed, key))
    lens = np.rint(rng.uniform(0.5 * avg_len, 1.5 * avg_len, size=n)).astype(np.int64)
    return np.maximum(lens, 1)


def materialize_text(key: str, index: int, length: int, seed: int = 0) -> bytes:
    """Deterministic printable text of exactly ``length`` bytes for row ``index`` of ``key``."""
    if length < 1:
        raise ValueError(f"text length must be >= 1, got {length}")
    raw = hashlib.shake_128(f"{seed}:{key}:{index}".encode()).digest(length)
    return raw.translate(_TEXT_TABLE)


# --- manifest I/O -----------------------------------------------------------


def _config_dict(config: WorkloadConfig) -> dict:
    d = asdict(config)
    d["size_dist"] = {"mu_log": config.size_dist.mu_log, "sigma_log": config.size_dist.sigma_log}
    return d


def workload_to_manifest(workload: Workload) -> dict:
    return {
        "config": _config_dict(workload.config),
        "partitions": [
            {"key": p.key, "n_k": p.n_k, "avg_len": p.avg_text_len} for p in workload.partitions
        ],
    }


def save_manifest(workload: Workload, path: str | Path) -> None:
    text = json.dumps(workload_to_manifest(workload), indent=1)
    Path(path).write_text(text + "\n")


def config_from_dict(d: dict) -> WorkloadConfig:
    d = dict(d)
    d["size_dist"] = LogNormalParams(**d["size_dist"])
    return WorkloadConfig(**d)


def load_manifest(path: str | Path) -> Workload:
    data = json.loads(Path(path).read_text())
    config = config_from_dict(data["config"])
    parts = [PartitionSpec(p["key"], int(p["n_k"]), float(p["avg_len"])) for p in data["partitions"]]
    return Workload(config, parts)
