import struct
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from superbatch.columnar import (
    BadMagicError,
    FormatError,
    InvalidViewError,
    LengthMismatchError,
    TruncatedFileError,
    UnsupportedVersionError,
    deserialize,
    file_size,
    metered_blob,
    serialize_naive,
    serialize_zero_copy,
)
from superbatch.encoder import EmbeddingMatrix, MatrixView


def _view(n, d, seed=0, pad=0):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n + 2 * pad, d), dtype=np.float32)
    return MatrixView(EmbeddingMatrix(n + 2 * pad, d, data), pad, pad + n)


def test_golden_bytes():
    data = np.array([[1.0, -2.0]], dtype=np.float32)
    out = serialize_zero_copy("k", [b"hi"], MatrixView(EmbeddingMatrix(1, 2, data), 0, 1))
    expected = (
        b"SRGB" + struct.pack("<H", 1) + struct.pack("<I", 1) + b"k"
        + struct.pack("<QI", 1, 2) + struct.pack("<Q", 1)
        + struct.pack("<I", 2) + b"hi"
        + bytes.fromhex("0000803f") + bytes.fromhex("000000c0")
    )
    assert bytes(out) == expected
    assert len(out) == file_size("k", 1, 2, 2)


@given(
    n=st.integers(0, 40),
    d=st.integers(1, 12),
    pad=st.integers(0, 3),
    key=st.text(min_size=1, max_size=12),
    seed=st.integers(0, 2**16),
)
@settings(max_examples=200, deadline=None)
def test_roundtrip_and_paths_identical(n, d, pad, key, seed):
    rng = np.random.default_rng(seed)
    texts = [rng.bytes(int(k)) for k in rng.integers(0, 30, size=n)]
    view = _view(n, d, seed, pad)
    a = serialize_zero_copy(key, texts, view)
    b = serialize_naive(key, texts, view)
    assert a == b
    k2, t2, m2 = deserialize(a)
    assert k2 == key and t2 == texts
    assert np.array_equal(m2.data, view.array())
    assert len(a) == file_size(key, n, d, sum(map(len, texts)))


def test_metered_blob_size_matches_real():
    texts = [b"abc", b"de"]
    real = serialize_zero_copy("p1", texts, _view(2, 5))
    blob = metered_blob("p1", 2, 5, 5)
    assert len(blob) == len(real)


def _good():
    return bytes(serialize_zero_copy("key", [b"aa", b"b"], _view(2, 3)))


def test_bad_magic():
    with pytest.raises(BadMagicError):
        deserialize(b"XXXX" + _good()[4:])


def test_bad_version():
    data = bytearray(_good())
    data[4:6] = struct.pack("<H", 9)
    with pytest.raises(UnsupportedVersionError):
        deserialize(data)


@pytest.mark.parametrize("cut", [0, 3, 8, 12, 20, 30, -1])
def test_truncation(cut):
    data = _good()
    with pytest.raises(TruncatedFileError):
        deserialize(data[:cut] if cut >= 0 else data[:-1])


def test_trailing_bytes():
    with pytest.raises(LengthMismatchError):
        deserialize(_good() + b"\0")


def test_count_mismatch():
    data = bytearray(_good())
    off = 4 + 2 + 4 + 3 + 8 + 4
    data[off : off + 8] = struct.pack("<Q", 5)
    with pytest.raises(LengthMismatchError):
        deserialize(data)


def test_all_errors_are_format_errors():
    for exc in (BadMagicError, UnsupportedVersionError, TruncatedFileError, LengthMismatchError):
        assert issubclass(exc, FormatError)


def test_view_length_mismatch_and_metered():
    with pytest.raises(LengthMismatchError):
        serialize_zero_copy("k", [b"a"], _view(2, 3))
    with pytest.raises(InvalidViewError):
        serialize_zero_copy("k", [b"a"], MatrixView(EmbeddingMatrix(1, 3), 0, 1))


def _extra_alloc(fn, n, d=64):
    view = _view(n, d)
    texts = [b"t"] * n
    out_size = file_size("k", n, d, n)
    tracemalloc.start()
    tracemalloc.reset_peak()
    fn("k", texts, view)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return peak - out_size


def test_zero_copy_extra_allocation_constant():
    small, big = _extra_alloc(serialize_zero_copy, 100), _extra_alloc(serialize_zero_copy, 5000)
    assert big < 4096 and small < 4096


def test_naive_extra_allocation_linear():
    small, big = _extra_alloc(serialize_naive, 500), _extra_alloc(serialize_naive, 5000)
    assert big > 5 * small > 0
