import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from superbatch.aggregator import OutOfOrderKeyError, Thresholds
from superbatch.clock import replay
from superbatch.columnar import deserialize
from superbatch.costmodel import get_preset, memory_bound
from superbatch.encoder import embed_rows
from superbatch.runner import (
    FSB,
    PBP,
    PbPbpLb,
    RunConfig,
    SurgeAsync,
    SurgeSync,
    crash_and_resume,
    ffd_pack,
    manifest_hash,
    parse_strategy,
    run,
)
from superbatch.storage import MemoryBackend, UploadFailedError
from superbatch.workload import PartitionSpec, Workload, WorkloadConfig

SMALL_TH = Thresholds(800, 2000)


def all_strategies():
    return [PBP(), FSB(700), SurgeSync(SMALL_TH), SurgeAsync(SMALL_TH), PbPbpLb(900)]


def test_parse_strategy():
    assert parse_strategy("pbp") == PBP()
    assert parse_strategy("fsb-100k") == FSB(100_000)
    assert parse_strategy("FSB:50000") == FSB(50_000)
    assert parse_strategy("fsb", B_min=7) == FSB(7)
    assert parse_strategy("pb_pbp_lb-200K") == PbPbpLb(200_000)
    assert parse_strategy("surge-sync", 10, 20) == SurgeSync(Thresholds(10, 20))
    assert parse_strategy("surge-async").thresholds == Thresholds()
    for bad in ("nope", "fsb-x", "fsb-0"):
        with pytest.raises(ValueError):
            parse_strategy(bad)


def test_ffd_reference_example():
    assert ffd_pack([7, 5, 4, 3, 2], 10) == [[7, 3], [5, 4], [2]]


def test_ffd_oversized_are_singletons():
    assert ffd_pack([11, 12, 13], 10) == [[13], [12], [11]]
    assert ffd_pack([], 10) == []


def test_ffd_tie_break_by_key():
    specs = [PartitionSpec("b", 5, 1), PartitionSpec("a", 5, 1), PartitionSpec("c", 5, 1)]
    assert [[p.key for p in b] for b in ffd_pack(specs, 10)] == [["a", "b"], ["c"]]


def _ffd_reference(sizes, B):
    bins, room = [], []
    for s in sorted(sizes, reverse=True):
        for i, r in enumerate(room):
            if r >= s:
                bins[i].append(s)
                room[i] -= s
                break
        else:
            bins.append([s])
            room.append(B - s)
    return bins


@given(st.lists(st.integers(1, 60), max_size=80), st.integers(1, 80))
@settings(max_examples=300, deadline=None)
def test_ffd_matches_reference(sizes, B):
    bins = ffd_pack(sizes, B)
    assert bins == _ffd_reference(sizes, B)
    for b in bins:
        assert sum(b) <= B or len(b) == 1


@pytest.mark.parametrize("strategy", all_strategies(), ids=lambda s: s.name)
def test_files_match_encoder_output(small_materialized, strategy):
    wl = small_materialized
    backend = MemoryBackend()
    run(wl, RunConfig(strategy, storage="s3"), backend)
    assert len(backend.files) == len(wl)
    for spec in wl:
        key, texts, m = deserialize(backend.read(f"out/run/{spec.key}.srgb"))
        assert key == spec.key and texts == wl.texts(spec)
        assert np.array_equal(m.data, embed_rows(spec.key, 0, spec.n_k, 384))
    assert backend.overwrites == []


def test_output_equivalence_across_strategies(small_materialized):
    outputs = []
    for strategy in all_strategies():
        be = MemoryBackend()
        run(small_materialized, RunConfig(strategy), be)
        outputs.append(be.files)
    assert all(o == outputs[0] for o in outputs[1:])


def test_metered_files_match_materialized_sizes(small_materialized):
    wl = small_materialized
    metered = Workload(
        WorkloadConfig(P=wl.config.P, total_texts=wl.config.total_texts, seed=3, text_mode="metered"),
        wl.partitions,
    )
    a, b = MemoryBackend(), MemoryBackend()
    run(wl, RunConfig(SurgeAsync(SMALL_TH)), a)
    run(metered, RunConfig(SurgeAsync(SMALL_TH)), b)
    assert {p: len(v) for p, v in a.files.items()} == {p: len(v) for p, v in b.files.items()}


def test_encode_call_counts(small_materialized):
    wl = small_materialized
    N, P = wl.total_texts, len(wl)
    assert run(wl, RunConfig(PBP())).metrics.encode_calls == P
    assert run(wl, RunConfig(FSB(700))).metrics.encode_calls == math.ceil(N / 700)
    assert run(wl, RunConfig(FSB(N))).metrics.encode_calls == 1
    r = run(wl, RunConfig(SurgeAsync(SMALL_TH)))
    assert r.metrics.encode_calls == r.metrics.flushes == len(r.flushes)
    assert run(wl, RunConfig(PbPbpLb(900))).metrics.encode_calls == len(ffd_pack(wl.partitions, 900))


def test_flush_records_cover_all_texts(ten_million):
    for strategy in (PBP(), FSB(), SurgeSync(), SurgeAsync(), PbPbpLb()):
        r = run(ten_million, RunConfig(strategy))
        assert sum(f.text_count for f in r.flushes) == 10_000_000
        assert r.metrics.files_written == 4000
        assert 0 < r.metrics.delta <= 1
        assert r.metrics.throughput == pytest.approx(10_000_000 / r.metrics.wall)


def test_deterministic(ten_million):
    a = run(ten_million, RunConfig(SurgeAsync(), noise_cv=0.01, fault_rate=0.01))
    b = run(ten_million, RunConfig(SurgeAsync(), noise_cv=0.01, fault_rate=0.01))
    assert a.metrics == b.metrics and a.flushes == b.flushes


def test_sync_slower_than_async_equal_without_io(ten_million):
    for storage in ("hdfs", "gcs", "cross_region"):
        s = run(ten_million, RunConfig(SurgeSync(), storage=storage)).metrics
        a = run(ten_million, RunConfig(SurgeAsync(), storage=storage)).metrics
        assert s.wall > a.wall
    s = run(ten_million, RunConfig(SurgeSync(), storage="null", c_ser=0.0)).metrics
    a = run(ten_million, RunConfig(SurgeAsync(), storage="null", c_ser=0.0)).metrics
    assert s.wall == pytest.approx(a.wall)


def test_ttfo_definitions(ten_million):
    fsb = run(ten_million, RunConfig(FSB()))
    assert fsb.metrics.ttfo > fsb.metrics.encode_time
    for strategy in (SurgeSync(), SurgeAsync()):
        r = run(ten_million, RunConfig(strategy))
        first = r.flushes[0]
        first_commit = min(r.commits, key=lambda c: c.outcome.end)
        expected = first.t_enc + first_commit.outcome.t_ser + first_commit.outcome.t_upl
        assert r.metrics.ttfo == pytest.approx(expected)


def test_gpu_time_conservation(ten_million):
    p = get_preset("L4x4-minilm")
    s = run(ten_million, RunConfig(SurgeAsync()))
    f = run(ten_million, RunConfig(FSB(10_000_000)))
    diff = s.metrics.encode_calls - f.metrics.encode_calls
    assert s.metrics.encode_time - f.metrics.encode_time == pytest.approx(diff * p.c_ipc)


def test_memory_accounting(ten_million):
    wl = ten_million
    L, d = 47, 384
    s = run(wl, RunConfig(SurgeAsync())).metrics
    bound = memory_bound(100_000 + wl.n_max, L, d)
    assert s.peak_data_mem <= 2 * bound
    f = run(wl, RunConfig(FSB())).metrics
    assert f.peak_data_mem == 10_000_000 * (L + 4 * d)
    assert f.label_mem == 8 * 10_000_000


def test_empty_workload():
    wl = Workload(WorkloadConfig(P=1), [])
    be = MemoryBackend()
    for strategy in all_strategies():
        m = run(wl, RunConfig(strategy), be).metrics
        assert m.n_texts == 0 and m.wall == 0 and m.ttfo is None and m.encode_calls == 0
    assert be.files == {}


def test_out_of_order_stream_rejected(small_materialized):
    parts = small_materialized.partitions
    dup = parts[:3] + parts[:1]
    with pytest.raises(OutOfOrderKeyError):
        run(Workload(small_materialized.config, dup), RunConfig(PBP()))
    metered = Workload(WorkloadConfig(P=4, text_mode="metered"), dup)
    with pytest.raises(OutOfOrderKeyError):
        run(metered, RunConfig(SurgeAsync()))


def test_upload_exhaustion_raises_after_writing_rest(small_materialized):
    be = MemoryBackend()
    cfg = RunConfig(SurgeAsync(SMALL_TH), fault_rate=0.9, seed=5)
    with pytest.raises(UploadFailedError) as err:
        run(small_materialized, cfg, be)
    assert err.value.paths
    assert len(be.files) + len(err.value.paths) == len(small_materialized)


def test_faults_are_retried(ten_million):
    clean = run(ten_million, RunConfig(SurgeAsync())).metrics
    noisy = run(ten_million, RunConfig(SurgeAsync(), fault_rate=0.01)).metrics
    assert noisy.files_written == 4000 and noisy.failed_uploads == 0
    assert noisy.wall >= clean.wall


def test_backpressure_option(ten_million):
    r = run(ten_million, RunConfig(SurgeAsync(), storage="cross_region", max_inflight=1))
    drains = [f.start + f.t_enc + f.t_io_span for f in r.flushes]
    for j in range(2, len(r.flushes)):
        assert r.flushes[j].start >= drains[j - 2] - 1e-9


def test_crash_mid_flush_and_resume(small_materialized):
    wl = small_materialized
    cfg = RunConfig(SurgeAsync(SMALL_TH), storage="gcs")
    reference = MemoryBackend()
    ref = run(wl, cfg, reference)
    for f in ref.flushes[1:-1]:
        be = MemoryBackend()
        report = crash_and_resume(wl, cfg, f.start + f.t_enc / 2, be)
        assert be.files == reference.files
        assert be.overwrites == []
        assert report.reencoded_texts <= SMALL_TH.B_min + wl.n_max
        assert report.final_keys == {p.key for p in wl}


def test_crash_after_drain_resume_is_noop(small_materialized):
    cfg = RunConfig(SurgeAsync(SMALL_TH))
    ref = run(small_materialized, cfg)
    report = crash_and_resume(small_materialized, cfg, ref.metrics.wall + 1)
    assert report.resumed.metrics.encode_calls == 0
    assert report.reencoded_texts == 0


def test_crash_before_anything(small_materialized):
    be = MemoryBackend()
    report = crash_and_resume(small_materialized, RunConfig(FSB(1000)), 0.0, be)
    assert report.skipped == set() and len(be.files) == len(small_materialized)


def test_manifest_hash():
    a = RunConfig().manifest()
    assert manifest_hash(a) == manifest_hash(RunConfig().manifest())
    assert manifest_hash(a) != manifest_hash(RunConfig(seed=1).manifest())
    assert a["strategy"]["name"] == "surge-async"


def test_realtime_replay_order(small_materialized):
    r = run(small_materialized, RunConfig(SurgeAsync(SMALL_TH)))
    virtual = sorted(r.clock.events, key=lambda e: (e.start, e.seq))
    fired = replay(r.clock.events, time_scale=0.0, sleep=lambda s: None)
    assert fired == virtual


def test_partition_overhead_penalises_many_partitions(small_materialized):
    base = run(small_materialized, RunConfig(SurgeAsync(SMALL_TH))).metrics
    slow = run(small_materialized, RunConfig(SurgeAsync(SMALL_TH), partition_overhead=0.01)).metrics
    assert slow.encode_time == pytest.approx(base.encode_time + 0.01 * len(small_materialized))
