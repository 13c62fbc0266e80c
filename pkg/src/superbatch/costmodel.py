"""Closed-form cost model for partition-by-partition vs. batched encoding.

Everything here is a pure function of its arguments. The simulator in
:mod:`superbatch.runner` is validated against these formulas, so nothing in
this module may depend on the simulator.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .workload import LogNormalParams, SizeStats, Workload


@dataclass(frozen=True)
class CostParams:
    c_ipc: float  # seconds per encode call
    c_enc: float  # seconds per text on one GPU
    G: int = 1

    def __post_init__(self) -> None:
        if self.c_ipc < 0:
            raise ValueError("c_ipc must be >= 0")
        if not self.c_enc > 0:
            raise ValueError("c_enc must be > 0")
        if self.G < 1:
            raise ValueError("G must be >= 1")

    @property
    def per_text(self) -> float:
        return self.c_enc / self.G


PRESETS: dict[str, CostParams] = {
    "L4x4-minilm": CostParams(c_ipc=0.087, c_enc=149e-6, G=4),
    "L4x2-minilm": CostParams(c_ipc=0.067, c_enc=110e-6, G=2),
    "L4x2-bge": CostParams(c_ipc=0.081, c_enc=215e-6, G=2),
}


def get_preset(name: str) -> CostParams:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def partition_time(n: int | float, p: CostParams) -> float:
    """Wall time of one encode call over ``n`` texts."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return p.c_ipc + n * p.c_enc / p.G


def partition_throughput(n: int | float, p: CostParams) -> float:
    """Texts per second achieved by a standalone call over ``n`` texts."""
    t = partition_time(n, p)
    return n / t if t > 0 else math.inf


def ipc_threshold(p: CostParams) -> float:
    """Call size below which the fixed IPC cost exceeds the compute cost."""
    return p.c_ipc * p.G / p.c_enc


def _sizes(workload: Workload | Iterable[int] | np.ndarray) -> np.ndarray:
    if isinstance(workload, Workload):
        return workload.sizes()
    return np.asarray(list(workload) if not isinstance(workload, np.ndarray) else workload)


def ipc_fraction(workload, p: CostParams) -> float:
    """Fraction of partitions strictly smaller than the IPC threshold."""
    sizes = _sizes(workload)
    if sizes.size == 0:
        raise ValueError("ipc_fraction needs a non-empty workload")
    return float(np.count_nonzero(sizes < ipc_threshold(p)) / sizes.size)


@dataclass(frozen=True)
class Prediction:
    alpha: float
    F: int
    speedup: float
    t_pbp: float
    t_batched: float
    N: int

    @property
    def throughput_pbp(self) -> float:
        return self.N / self.t_pbp

    @property
    def throughput_batched(self) -> float:
        return self.N / self.t_batched


def flush_count(N: int, B_min: int) -> int:
    """Upper bound on encode calls for threshold batching."""
    return -(-N // B_min)


def predict_speedup(N: int, P: int, F: int, p: CostParams) -> Prediction:
    """Speedup of F-call batching over P-call partition-by-partition encoding."""
    if N <= 0:
        raise ValueError("N must be > 0")
    if not 1 <= F <= P:
        raise ValueError(f"need 1 <= F <= P, got F={F}, P={P}")
    compute = N * p.c_enc / p.G
    alpha = P * p.c_ipc / compute
    t_pbp = P * p.c_ipc + compute
    t_batched = F * p.c_ipc + compute
    speedup = (1 + alpha) / (1 + alpha * F / P)
    return Prediction(alpha=alpha, F=F, speedup=speedup, t_pbp=t_pbp, t_batched=t_batched, N=N)


def overlap_ratio(t_enc: float, t_ser: float, t_upl: float) -> float:
    """Fraction of serialize+upload time that hides behind an encode of length ``t_enc``."""
    io = t_ser + t_upl
    if io <= 0:
        return 1.0
    return 1.0 - max(0.0, io - t_enc) / io


def memory_bound(S: int | float, L: float, d: int) -> float:
    """Data-resident bytes for ``S`` buffered texts and their float32 embeddings."""
    return S * L + S * d * 4


def expected_fill_ratio(stats: SizeStats, B_min: int) -> float:
    """First-order expected SuperBatch size over ``B_min`` for i.i.d. partition sizes."""
    if B_min <= 0:
        raise ValueError("B_min must be > 0")
    return 1.0 + stats.std**2 / (2 * stats.mean * B_min)


def renewal_fill_ratio(
    mean: float, std: float, B_min: int, trials: int = 10_000, seed: int = 0
) -> tuple[float, float]:
    """Monte Carlo estimate of E[S/B_min] with log-normal sizes of the given moments.

    Each trial sums fresh draws until the running total first reaches
    ``B_min``. Returns ``(mean, standard error)``.
    """
    dist = LogNormalParams.from_moments(mean, std)
    rng = np.random.default_rng(seed)
    # Draw in blocks; a trial rarely needs more than a few multiples of B_min/mean draws.
    block = max(16, int(4 * B_min / mean) + 16)
    ratios = np.empty(trials)
    for t in range(trials):
        total = 0.0
        while True:
            draws = rng.lognormal(dist.mu_log, dist.sigma_log, size=block)
            csum = total + np.cumsum(draws)
            hit = np.searchsorted(csum, B_min)
            if hit < block:
                total = csum[hit]
                break
            total = csum[-1]
        ratios[t] = total / B_min
    return float(ratios.mean()), float(ratios.std(ddof=1) / math.sqrt(trials))


def gpu_util_bound(delta: float, intensity: float) -> float:
    """Upper bound on hardware GPU utilisation from duty cycle and compute intensity."""
    for name, v in (("delta", delta), ("intensity", intensity)):
        if not 0 <= v <= 1:
            raise ValueError(f"{name} must be in [0, 1], got {v}")
    return delta * intensity


class Verdict(str, enum.Enum):
    StronglyRecommended = "StronglyRecommended"
    Beneficial = "Beneficial"
    ModeratelyBeneficial = "ModeratelyBeneficial"
    Optional = "Optional"


@dataclass(frozen=True)
class Recommendation:
    phi: float
    cv: float
    verdict: Verdict


def recommend(phi: float, cv: float) -> Recommendation:
    # phi == 0.5 and cv == 1.0 fall in the "greater" rows.
    if not 0 <= phi <= 1:
        raise ValueError(f"phi must be in [0, 1], got {phi}")
    if cv < 0:
        raise ValueError(f"cv must be >= 0, got {cv}")
    many_small = phi >= 0.5
    heterogeneous = cv >= 1.0
    if many_small:
        verdict = Verdict.StronglyRecommended if heterogeneous else Verdict.Beneficial
    else:
        verdict = Verdict.ModeratelyBeneficial if heterogeneous else Verdict.Optional
    return Recommendation(phi=phi, cv=cv, verdict=verdict)
