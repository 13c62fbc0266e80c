"""Streaming two-threshold SuperBatch aggregation over key-grouped rows."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Sequence


class FlushReason(str, enum.Enum):
    Efficiency = "Efficiency"
    Safety = "Safety"
    EndOfStream = "EndOfStream"


class OutOfOrderKeyError(ValueError):
    """A key reappeared after the stream had moved on to another key."""

    def __init__(self, key: Any, previous: Any) -> None:
        super().__init__(
            f"key {key!r} reappeared after key {previous!r}; "
            "rows must arrive grouped by partition key"
        )
        self.key = key
        self.previous = previous


class AggregatorClosedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Thresholds:
    B_min: int = 100_000
    B_max: int = 500_000

    def __post_init__(self) -> None:
        if not 0 < self.B_min < self.B_max:
            raise ValueError(f"need 0 < B_min < B_max, got {self.B_min}, {self.B_max}")


@dataclass(frozen=True)
class Bound:
    start: int
    end: int
    key: Any

    @property
    def n(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class SuperBatch:
    """Whole partitions awaiting one encode call.

    ``entries`` holds ``(key, payload)`` where the payload is either the
    partition's text list or, in metered mode, its text count.
    """

    entries: tuple[tuple[Any, Any], ...]
    bounds: tuple[Bound, ...]
    total: int

    @property
    def keys(self) -> list[Any]:
        return [b.key for b in self.bounds]

    def texts(self) -> list:
        """Concatenated texts in row order (materialized batches only)."""
        out: list = []
        for _, payload in self.entries:
            out.extend(payload)
        return out


@dataclass(frozen=True)
class FlushRequest:
    batch: SuperBatch
    reason: FlushReason


def _size(payload: Any) -> int:
    return payload if isinstance(payload, int) else len(payload)


class SuperBatchAggregator:
    """Accumulates whole partitions and asks for a flush once a threshold is crossed.

    The aggregator never encodes anything itself; the caller receives a
    :class:`FlushRequest` and is expected to act on it. ``peak_total`` tracks
    the largest buffered text count ever reached.
    """

    def __init__(self, thresholds: Thresholds = Thresholds()) -> None:
        self.thresholds = thresholds
        self._entries: list[tuple[Any, Any]] = []
        self.total = 0
        self.peak_total = 0
        self.n_max = 0
        self.flushes = 0
        self._closed = False

    def add_partition(self, key: Any, texts_or_size: Sequence | int) -> FlushRequest | None:
        if self._closed:
            raise AggregatorClosedError("add_partition after finalize")
        n = _size(texts_or_size)
        payload = texts_or_size if isinstance(texts_or_size, int) else list(texts_or_size)
        self._entries.append((key, payload))
        self.total += n
        self.n_max = max(self.n_max, n)
        self.peak_total = max(self.peak_total, self.total)
        # Safety is checked first, so total == B_max counts as Safety.
        if self.total >= self.thresholds.B_max:
            return self._flush(FlushReason.Safety)
        if self.total >= self.thresholds.B_min:
            return self._flush(FlushReason.Efficiency)
        return None

    def finalize(self) -> FlushRequest | None:
        if self._closed:
            raise AggregatorClosedError("finalize called twice")
        self._closed = True
        if not self._entries:
            return None
        return self._flush(FlushReason.EndOfStream)

    def _flush(self, reason: FlushReason) -> FlushRequest:
        bounds = []
        idx = 0
        for key, payload in self._entries:
            n = _size(payload)
            bounds.append(Bound(idx, idx + n, key))
            idx += n
        batch = SuperBatch(tuple(self._entries), tuple(bounds), self.total)
        self._entries = []
        self.total = 0
        self.flushes += 1
        return FlushRequest(batch, reason)


@dataclass
class PartitionBoundaryDetector:
    """Turns a key-grouped row stream into completed partitions.

    ``ingest_row`` returns ``(key, texts)`` for the previous partition when
    the key changes; the returned list is a snapshot that later rows never
    touch.
    """

    _cur_key: Any = None
    _cur_texts: list = field(default_factory=list)
    _seen: set = field(default_factory=set)
    _started: bool = False
    _closed: bool = False

    def ingest_row(self, key: Any, text: Any) -> tuple[Any, list] | None:
        if self._closed:
            raise AggregatorClosedError("ingest_row after finish")
        done = None
        if not self._started or key != self._cur_key:
            if key in self._seen:
                raise OutOfOrderKeyError(key, self._cur_key)
            if self._started:
                done = (self._cur_key, list(self._cur_texts))
            self._seen.add(key)
            self._cur_key = key
            self._cur_texts = []
            self._started = True
        self._cur_texts.append(text)
        return done

    def finish(self) -> tuple[Any, list] | None:
        if self._closed:
            raise AggregatorClosedError("finish called twice")
        self._closed = True
        if not self._started:
            return None
        return self._cur_key, list(self._cur_texts)


def aggregate_rows(rows, thresholds: Thresholds = Thresholds()):
    """Drive detector and aggregator over ``(key, text)`` rows; yield flush requests."""
    detector = PartitionBoundaryDetector()
    agg = SuperBatchAggregator(thresholds)
    for key, text in rows:
        done = detector.ingest_row(key, text)
        if done is not None:
            req = agg.add_partition(*done)
            if req is not None:
                yield req
    last = detector.finish()
    if last is not None:
        req = agg.add_partition(*last)
        if req is not None:
            yield req
    req = agg.finalize()
    if req is not None:
        yield req
