"""Partition file format and its two equivalent serializers.

Layout (all integers little-endian)::

    b"SRGB"  u16 version  u32 key_len  key  u64 n  u32 d
    u64 text_count  { u32 len  bytes }*text_count
    float32[n*d] embeddings

Both serializers produce identical bytes. The zero-copy path copies the
embedding rows straight out of the parent buffer; the naive path first
builds one Python list per row.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoder import EmbeddingMatrix, MatrixView

MAGIC = b"SRGB"
VERSION = 1
SUFFIX = ".srgb"

# Virtual serialize cost per text (seconds).
C_SER = 12.3e-6

_PRE = struct.Struct("<4sHI")  # magic, version, key length
_DIMS = struct.Struct("<QI")  # n, d
_COUNT = struct.Struct("<Q")
_LEN = struct.Struct("<I")


class FormatError(ValueError):
    """Base class for malformed partition files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class LengthMismatchError(FormatError):
    pass


class InvalidViewError(RuntimeError):
    """The view no longer points at live embedding data (internal error)."""


@dataclass(frozen=True)
class MeteredBlob:
    """Stand-in for a serialized file in metered mode: its exact size and a content token."""

    size: int
    digest: str

    def __len__(self) -> int:
        return self.size


def header_size(key: str) -> int:
    return _PRE.size + len(key.encode()) + _DIMS.size


def file_size(key: str, n: int, d: int, text_bytes: int) -> int:
    """Exact serialized size for ``n`` texts totalling ``text_bytes`` bytes."""
    return header_size(key) + _COUNT.size + _LEN.size * n + text_bytes + 4 * n * d


def metered_blob(key: str, n: int, d: int, text_bytes: int) -> MeteredBlob:
    size = file_size(key, n, d, text_bytes)
    token = hashlib.blake2b(f"{key}:{n}:{d}:{text_bytes}".encode(), digest_size=12).hexdigest()
    return MeteredBlob(size, token)


def _check_view(view: MatrixView, n_texts: int) -> np.ndarray:
    if view.parent.data is None:
        raise InvalidViewError("view has no backing data")
    if view.n != n_texts:
        raise LengthMismatchError(f"{n_texts} texts but {view.n} embedding rows")
    arr = view.array()
    if not arr.flags.c_contiguous:
        raise InvalidViewError("view rows are not contiguous")
    return arr


def _write_prefix(buf: bytearray, key: bytes, n: int, d: int, texts: Sequence[bytes]) -> int:
    _PRE.pack_into(buf, 0, MAGIC, VERSION, len(key))
    off = _PRE.size
    buf[off : off + len(key)] = key
    off += len(key)
    _DIMS.pack_into(buf, off, n, d)
    off += _DIMS.size
    _COUNT.pack_into(buf, off, len(texts))
    off += _COUNT.size
    for t in texts:
        _LEN.pack_into(buf, off, len(t))
        off += _LEN.size
        buf[off : off + len(t)] = t
        off += len(t)
    return off


def serialize_zero_copy(key: str, texts: Sequence[bytes], view: MatrixView) -> bytearray:
    """Serialize one partition, copying embedding rows directly from the parent buffer."""
    arr = _check_view(view, len(texts))
    kb = key.encode()
    n, d = view.n, view.d
    total = file_size(key, n, d, sum(map(len, texts)))
    buf = bytearray(total)
    off = _write_prefix(buf, kb, n, d, texts)
    if n:
        # Copy through numpy: bytearray slice assignment would stage a temporary copy.
        le = arr.astype("<f4", copy=False)
        np.frombuffer(buf, dtype=np.uint8, offset=off)[:] = le.reshape(-1).view(np.uint8)
    return buf


def serialize_naive(key: str, texts: Sequence[bytes], view: MatrixView) -> bytearray:
    """Same bytes as :func:`serialize_zero_copy`, built from per-row Python lists."""
    arr = _check_view(view, len(texts))
    kb = key.encode()
    n, d = view.n, view.d
    rows = [row.tolist() for row in arr]
    total = file_size(key, n, d, sum(map(len, texts)))
    buf = bytearray(total)
    off = _write_prefix(buf, kb, n, d, texts)
    row_fmt = struct.Struct(f"<{d}f")
    for values in rows:
        row_fmt.pack_into(buf, off, *values)
        off += row_fmt.size
    return buf


def deserialize(data: bytes | bytearray | memoryview) -> tuple[str, list[bytes], EmbeddingMatrix]:
    """Parse a partition file; every malformation raises a :class:`FormatError` subclass."""
    mv = memoryview(data).cast("B")
    size = len(mv)

    def need(off: int, n: int, what: str) -> None:
        if off + n > size:
            raise TruncatedFileError(f"file ends inside {what} (need {off + n} bytes, have {size})")

    need(0, _PRE.size, "header")
    magic, version, klen = _PRE.unpack_from(mv, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    off = _PRE.size
    need(off, klen, "key")
    try:
        key = bytes(mv[off : off + klen]).decode()
    except UnicodeDecodeError as exc:
        raise FormatError(f"key is not valid UTF-8: {exc}") from None
    off += klen
    need(off, _DIMS.size, "dimensions")
    n, d = _DIMS.unpack_from(mv, off)
    off += _DIMS.size
    need(off, _COUNT.size, "text count")
    (count,) = _COUNT.unpack_from(mv, off)
    off += _COUNT.size
    if count != n:
        raise LengthMismatchError(f"text count {count} does not match row count {n}")
    if d == 0 and n:
        raise LengthMismatchError("embedding dimension is zero")
    # Each text needs at least its length prefix; reject impossible counts before looping.
    need(off, _LEN.size * count, "text lengths")
    texts = []
    for _ in range(count):
        need(off, _LEN.size, "text length")
        (ln,) = _LEN.unpack_from(mv, off)
        off += _LEN.size
        need(off, ln, "text bytes")
        texts.append(bytes(mv[off : off + ln]))
        off += ln
    emb_len = 4 * n * d
    need(off, emb_len, "embeddings")
    if off + emb_len != size:
        raise LengthMismatchError(f"{size - off - emb_len} trailing bytes after embeddings")
    arr = np.frombuffer(mv[off:], dtype="<f4").astype(np.float32).reshape(n, d)
    return key, texts, EmbeddingMatrix(n, d, arr)


def time_serializers(n: int, d: int = 384, repeat: int = 3, seed: int = 0) -> dict:
    """Best-of-``repeat`` wall time per row for both serializers on one random partition."""
    import time

    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n, d), dtype=np.float32)
    view = MatrixView(EmbeddingMatrix(n, d, data), 0, n)
    texts = [b"x" * int(k) for k in rng.integers(24, 71, size=n)]
    best = {}
    for name, fn in (("zero_copy", serialize_zero_copy), ("naive", serialize_naive)):
        times = []
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn("bench", texts, view)
            times.append(time.perf_counter() - t0)
        best[name] = min(times) / max(n, 1)
    return {
        "rows": n,
        "d": d,
        "zero_copy_s_per_row": best["zero_copy"],
        "naive_s_per_row": best["naive"],
        "speedup": best["naive"] / best["zero_copy"],
    }
