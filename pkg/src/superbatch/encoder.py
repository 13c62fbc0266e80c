"""Encoder interface and the cost-model-driven virtual encoder."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from typing import Any, Protocol, Sequence

import numpy as np

from .costmodel import PRESETS, CostParams

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class EncoderProfile:
    cost: CostParams
    d: int = 384
    intensity: float | None = None
    per_gpu_batch: int = 1024
    noise_cv: float = 0.0
    partition_overhead: float = 0.0  # seconds added per partition in a call

    def __post_init__(self) -> None:
        if self.partition_overhead < 0:
            raise ValueError("partition_overhead must be >= 0")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.per_gpu_batch < 1:
            raise ValueError("per_gpu_batch must be >= 1")
        if self.noise_cv < 0:
            raise ValueError("noise_cv must be >= 0")


ENCODER_PRESETS: dict[str, EncoderProfile] = {
    "L4x4-minilm": EncoderProfile(PRESETS["L4x4-minilm"], d=384, intensity=0.186, per_gpu_batch=1024),
    "L4x2-minilm": EncoderProfile(PRESETS["L4x2-minilm"], d=384, intensity=0.186, per_gpu_batch=1024),
    "L4x2-bge": EncoderProfile(PRESETS["L4x2-bge"], d=768, per_gpu_batch=512),
}


def encoder_preset(name: str, **overrides) -> EncoderProfile:
    try:
        profile = ENCODER_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(ENCODER_PRESETS)}") from None
    return replace(profile, **overrides) if overrides else profile


class EmbeddingMatrix:
    """``n x d`` row-major float32 embeddings.

    ``data`` is ``None`` for metered matrices, which carry only a shape. The
    buffer is made read-only once constructed.
    """

    __slots__ = ("n", "d", "data")

    def __init__(self, n: int, d: int, data: np.ndarray | None = None) -> None:
        if data is not None:
            if data.dtype != np.float32 or data.shape != (n, d) or not data.flags.c_contiguous:
                raise ValueError("data must be a C-contiguous float32 array of shape (n, d)")
            data.flags.writeable = False
        self.n = n
        self.d = d
        self.data = data

    @property
    def metered(self) -> bool:
        return self.data is None

    @property
    def nbytes(self) -> int:
        return 4 * self.n * self.d

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        kind = "metered" if self.metered else "dense"
        return f"EmbeddingMatrix(n={self.n}, d={self.d}, {kind})"


class MatrixView:
    """Rows ``[start, end)`` of a parent matrix; holds a reference, never a copy."""

    __slots__ = ("parent", "start", "end")

    def __init__(self, parent: EmbeddingMatrix, start: int, end: int) -> None:
        self.parent = parent
        self.start = start
        self.end = end

    @property
    def n(self) -> int:
        return self.end - self.start

    @property
    def d(self) -> int:
        return self.parent.d

    @property
    def nbytes(self) -> int:
        return 4 * self.n * self.d

    def array(self) -> np.ndarray:
        """The rows as a read-only numpy view of the parent buffer."""
        if self.parent.data is None:
            raise ValueError("metered matrix has no data")
        return self.parent.data[self.start : self.end]


def slice_matrix(matrix: EmbeddingMatrix, start: int, end: int) -> MatrixView:
    if not 0 <= start <= end <= matrix.n:
        raise IndexError(f"slice [{start}, {end}) out of bounds for {matrix.n} rows")
    return MatrixView(matrix, start, end)


def _key_hash(key: Any) -> np.uint64:
    digest = hashlib.blake2b(str(key).encode(), digest_size=8).digest()
    return np.uint64(int.from_bytes(digest, "little"))


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def embed_rows(key: Any, start: int, end: int, d: int) -> np.ndarray:
    """Deterministic unit-norm embeddings for rows ``start..end`` of partition ``key``."""
    rows = np.arange(start, end, dtype=np.uint64)[:, None]
    cols = np.arange(d, dtype=np.uint64)[None, :]
    with np.errstate(over="ignore"):
        z = _key_hash(key) + (rows * np.uint64(d) + cols + np.uint64(1)) * _GOLDEN
        bits = _mix(z) >> np.uint64(40)
    vals = bits.astype(np.float64) / float(1 << 23) - 1.0
    norms = np.linalg.norm(vals, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return (vals / norms).astype(np.float32)


@dataclass(frozen=True)
class Segment:
    """A partition's slice of an encode batch: its key and either texts or a count."""

    key: Any
    n: int
    texts: Sequence[bytes] | None = None


class Encoder(Protocol):
    """Anything that turns a batch into embeddings plus a charged duration."""

    def encode(self, segments: Sequence[Segment]) -> tuple[EmbeddingMatrix, float]: ...


class VirtualEncoder:
    """Charges ``c_ipc + n*c_enc/G`` per call and synthesises embeddings.

    With ``noise_cv > 0`` each call's duration is multiplied by a mean-one
    log-normal factor drawn from ``(seed, call index)``.
    """

    def __init__(self, profile: EncoderProfile, seed: int = 0, materialize: bool = True) -> None:
        self.profile = profile
        self.seed = seed
        self.materialize = materialize
        self.calls = 0
        self.texts = 0
        self.warmed_up = False

    def duration(self, n: int, call_index: int | None = None, partitions: int = 1) -> float:
        if n < 1:
            raise ValueError("cannot encode an empty batch")
        cost = self.profile.cost
        t = cost.c_ipc + n * cost.c_enc / cost.G + partitions * self.profile.partition_overhead
        cv = self.profile.noise_cv
        if cv > 0:
            s = math.sqrt(math.log1p(cv * cv))
            rng = np.random.default_rng([self.seed, self.calls if call_index is None else call_index])
            t *= float(rng.lognormal(-s * s / 2, s))
        return t

    def warmup(self, n: int = 1024) -> None:
        """One throwaway call before timing starts; does not count as a call."""
        if self.materialize:
            embed_rows("__warmup__", 0, min(n, 8), self.profile.d)
        self.warmed_up = True

    def encode(self, segments: Sequence[Segment]) -> tuple[EmbeddingMatrix, float]:
        n = sum(s.n for s in segments)
        t = self.duration(n, partitions=len(segments))
        d = self.profile.d
        if self.materialize:
            data = np.empty((n, d), dtype=np.float32)
            row = 0
            for seg in segments:
                data[row : row + seg.n] = embed_rows(seg.key, 0, seg.n, d)
                row += seg.n
            matrix = EmbeddingMatrix(n, d, data)
        else:
            matrix = EmbeddingMatrix(n, d)
        self.calls += 1
        self.texts += n
        return matrix, t

    def encode_rows(self, labelled: Sequence[tuple[Any, int, int]]) -> tuple[EmbeddingMatrix, float]:
        """Encode an arbitrary row range given as ``(key, first_row, last_row)`` pieces.

        Used by fixed-size chunking, where chunks cut through partitions.
        """
        n = sum(b - a for _, a, b in labelled)
        t = self.duration(n, partitions=len({key for key, _, _ in labelled}))
        d = self.profile.d
        if self.materialize:
            data = np.empty((n, d), dtype=np.float32)
            row = 0
            for key, a, b in labelled:
                data[row : row + b - a] = embed_rows(key, a, b, d)
                row += b - a
            matrix = EmbeddingMatrix(n, d, data)
        else:
            matrix = EmbeddingMatrix(n, d)
        self.calls += 1
        self.texts += n
        return matrix, t
