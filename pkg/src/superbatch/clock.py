"""Virtual time with per-resource timelines, plus a wall-clock replay of the schedule."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable


class TimelineError(RuntimeError):
    """An event was placed before its resource became free."""


@dataclass(frozen=True)
class Event:
    seq: int
    resource: str
    start: float
    end: float
    label: str = ""

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class EventClock:
    """Books work onto named resources; each resource runs one event at a time."""

    free: dict[str, float] = field(default_factory=dict)
    events: list[Event] = field(default_factory=list)
    keep_log: bool = True

    @property
    def now(self) -> float:
        return max(self.free.values(), default=0.0)

    def free_at(self, resource: str) -> float:
        return self.free.get(resource, 0.0)

    def schedule(self, resource: str, ready: float, duration: float, label: str = "") -> Event:
        """Run ``duration`` seconds on ``resource`` as soon as it is free and ``ready`` has passed."""
        if duration < 0:
            raise ValueError("duration must be >= 0")
        start = max(ready, self.free_at(resource))
        return self.record(resource, start, start + duration, label)

    def record(self, resource: str, start: float, end: float, label: str = "") -> Event:
        """Log an event whose times were computed elsewhere (e.g. by an upload pool)."""
        if start < self.free_at(resource) - 1e-12 or end < start:
            raise TimelineError(
                f"{label or 'event'} on {resource} at [{start}, {end}) overlaps "
                f"work ending at {self.free_at(resource)}"
            )
        self.free[resource] = end
        ev = Event(len(self.events), resource, start, end, label)
        if self.keep_log:
            self.events.append(ev)
        return ev


def replay(
    events: list[Event],
    time_scale: float = 1.0,
    on_event: Callable[[Event], None] | None = None,
    sleep: Callable[[float], None] = time.sleep,
    clock: Callable[[], float] = time.monotonic,
) -> list[Event]:
    """Fire events in virtual start order, waiting ``start * time_scale`` real seconds.

    Returns the events in the order they fired, which is the virtual order
    whenever durations are deterministic.
    """
    ordered = sorted(events, key=lambda e: (e.start, e.seq))
    t0 = clock()
    for ev in ordered:
        wait = ev.start * time_scale - (clock() - t0)
        if wait > 0:
            sleep(wait)
        if on_event is not None:
            on_event(ev)
    return ordered
