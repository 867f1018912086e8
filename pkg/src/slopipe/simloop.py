"""Deterministic discrete-event loop over integer microseconds."""
from __future__ import annotations

import heapq
import itertools
import time
from typing import Callable


class Timer:
    __slots__ = ("when", "fn", "args", "cancelled")

    def __init__(self, when: int, fn: Callable, args: tuple):
        self.when = when
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class EventLoop:
    """Single-threaded virtual clock.

    Events at equal timestamps run in scheduling order, which keeps runs
    byte-reproducible under a fixed seed.
    """

    def __init__(self, start_us: int = 0):
        self.now = start_us
        self._queue: list[tuple[int, int, Timer]] = []
        self._seq = itertools.count()

    def __call__(self) -> int:
        return self.now

    def call_at(self, when: int, fn: Callable, *args) -> Timer:
        when = max(int(when), self.now)
        timer = Timer(when, fn, args)
        heapq.heappush(self._queue, (when, next(self._seq), timer))
        return timer

    def call_later(self, delay_us: int, fn: Callable, *args) -> Timer:
        return self.call_at(self.now + int(delay_us), fn, *args)

    def call_soon(self, fn: Callable, *args) -> Timer:
        return self.call_at(self.now, fn, *args)

    def peek(self) -> int | None:
        while self._queue and self._queue[0][2].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0][0] if self._queue else None

    def step(self) -> bool:
        when = self.peek()
        if when is None:
            return False
        _, _, timer = heapq.heappop(self._queue)
        self.now = when
        timer.fn(*timer.args)
        return True

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None) -> int:
        """Run events with timestamp <= ``until``; returns the number processed."""
        n = 0
        while True:
            if stop is not None and stop():
                break
            when = self.peek()
            if when is None or (until is not None and when > until):
                break
            self.step()
            n += 1
        if until is not None and self.now < until and (stop is None or not stop()):
            self.now = until
        return n

    def pending(self) -> int:
        return sum(1 for _, _, t in self._queue if not t.cancelled)


class ManualClock:
    """Clock that only moves when told to; handy for store tests."""

    def __init__(self, start_us: int = 0):
        self.now = start_us

    def __call__(self) -> int:
        return self.now

    def advance(self, us: int) -> int:
        self.now += us
        return self.now


class WallClock:
    """Monotonic wall clock in microseconds since construction."""

    def __init__(self):
        self._t0 = time.monotonic_ns()

    def __call__(self) -> int:
        return (time.monotonic_ns() - self._t0) // 1000
