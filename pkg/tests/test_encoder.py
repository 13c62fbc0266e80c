import numpy as np
import pytest

from superbatch.costmodel import PRESETS
from superbatch.encoder import (
    EmbeddingMatrix,
    EncoderProfile,
    Segment,
    VirtualEncoder,
    embed_rows,
    encoder_preset,
    slice_matrix,
)


def test_duration_matches_cost_model():
    enc = VirtualEncoder(encoder_preset("L4x4-minilm"), materialize=False)
    assert enc.duration(100_000) == pytest.approx(0.087 + 100_000 * 149e-6 / 4)
    with pytest.raises(ValueError):
        enc.duration(0)


def test_partition_overhead_charged_per_partition():
    base = VirtualEncoder(encoder_preset("L4x4-minilm"), materialize=False)
    enc = VirtualEncoder(encoder_preset("L4x4-minilm", partition_overhead=0.002), materialize=False)
    segs = [Segment("a", 10), Segment("b", 20), Segment("c", 30)]
    assert enc.encode(segs)[1] == pytest.approx(base.encode(segs)[1] + 0.006)
    # chunk pieces from the same partition count once
    assert enc.encode_rows([("a", 0, 5), ("a", 5, 10)])[1] == pytest.approx(base.duration(10) + 0.002)
    with pytest.raises(ValueError):
        encoder_preset("L4x4-minilm", partition_overhead=-1)


def test_noise_is_mean_one_and_deterministic():
    prof = encoder_preset("L4x4-minilm", noise_cv=0.05)
    enc = VirtualEncoder(prof, seed=3, materialize=False)
    base = VirtualEncoder(encoder_preset("L4x4-minilm"), materialize=False).duration(1000)
    draws = np.array([enc.duration(1000, call_index=i) for i in range(4000)]) / base
    assert draws.mean() == pytest.approx(1.0, abs=0.005)
    assert draws.std() == pytest.approx(0.05, rel=0.1)
    assert enc.duration(1000, 7) == VirtualEncoder(prof, seed=3).duration(1000, 7)


def test_embeddings_unit_norm_and_deterministic():
    e = embed_rows("p1", 0, 50, 16)
    assert e.dtype == np.float32 and e.shape == (50, 16)
    assert np.allclose(np.linalg.norm(e, axis=1), 1, atol=1e-5)
    assert np.array_equal(e, embed_rows("p1", 0, 50, 16))
    assert np.array_equal(e[10:20], embed_rows("p1", 10, 20, 16))
    assert not np.array_equal(e, embed_rows("p2", 0, 50, 16))


def test_encode_concatenates_segments():
    enc = VirtualEncoder(EncoderProfile(PRESETS["L4x2-minilm"], d=8))
    m, t = enc.encode([Segment("a", 3), Segment("b", 2)])
    assert m.n == 5 and m.d == 8
    assert np.array_equal(m.data[3:], embed_rows("b", 0, 2, 8))
    assert enc.calls == 1 and enc.texts == 5
    rows, _ = enc.encode_rows([("a", 1, 3), ("b", 0, 1)])
    assert np.array_equal(rows.data[:2], m.data[1:3])


def test_warmup_not_counted():
    enc = VirtualEncoder(encoder_preset("L4x2-bge"))
    enc.warmup()
    assert enc.calls == 0 and enc.warmed_up


def test_matrix_is_read_only_and_views_share_memory():
    data = np.zeros((4, 3), dtype=np.float32)
    m = EmbeddingMatrix(4, 3, data)
    with pytest.raises(ValueError):
        m.data[0, 0] = 1
    v = slice_matrix(m, 1, 3)
    assert np.shares_memory(v.array(), data)
    assert v.n == 2 and v.nbytes == 24
    with pytest.raises(IndexError):
        slice_matrix(m, 3, 5)


def test_metered_matrix():
    m = EmbeddingMatrix(10, 384)
    assert m.metered and m.nbytes == 10 * 384 * 4
    with pytest.raises(ValueError):
        slice_matrix(m, 0, 2).array()


def test_bad_matrix_and_profile():
    with pytest.raises(ValueError):
        EmbeddingMatrix(2, 2, np.zeros((2, 2), dtype=np.float64))
    with pytest.raises(ValueError):
        EncoderProfile(PRESETS["L4x2-bge"], d=0)
    with pytest.raises(ValueError):
        encoder_preset("missing")
