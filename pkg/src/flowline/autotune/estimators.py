"""Streaming estimates of per-element processing time and consumer rate."""

from __future__ import annotations

import time
from collections import deque

DEFAULT_PROCESSING_NS = 1_000_000  # 1 ms for nodes that have not produced yet
DEFAULT_HALF_LIFE = 1.0


class ProcessingTimeEstimator:
    """Time-decayed mean of nanoseconds per element.

    Each report adds ``nanos`` of work for ``count`` elements; older reports
    fade out with the given half-life in seconds of wall time.
    """

    def __init__(self, half_life: float = DEFAULT_HALF_LIFE, clock=time.monotonic):
        self.half_life = half_life
        self.clock = clock
        self._work = 0.0
        self._count = 0.0
        self._last: float | None = None

    def _decay(self, now: float) -> None:
        if self._last is not None and now > self._last:
            f = 0.5 ** ((now - self._last) / self.half_life)
            self._work *= f
            self._count *= f
        self._last = now

    def record(self, nanos: float, count: float = 1, now: float | None = None) -> None:
        if count <= 0:
            return
        self._decay(self.clock() if now is None else now)
        self._work += max(nanos, 0.0)
        self._count += count

    @property
    def samples(self) -> float:
        return self._count

    def estimate(self, default: float | None = DEFAULT_PROCESSING_NS) -> float | None:
        if self._count <= 1e-12:
            return default
        return self._work / self._count


class RatioEstimator:
    """Time-decayed ratio of two counters (e.g. inputs consumed per output)."""

    def __init__(self, half_life: float = DEFAULT_HALF_LIFE):
        self.half_life = half_life
        self._num = 0.0
        self._den = 0.0
        self._last: float | None = None

    def record(self, num: float, den: float, now: float) -> None:
        if self._last is not None and now > self._last:
            f = 0.5 ** ((now - self._last) / self.half_life)
            self._num *= f
            self._den *= f
        self._last = now
        self._num += num
        self._den += den

    def estimate(self, default: float | None = None) -> float | None:
        if self._den <= 1e-12:
            return default
        return self._num / self._den


class ConsumerRateEstimator:
    """Root ``get_next`` frequency from the mean gap between recent calls."""

    def __init__(self, window: int = 256):
        self._calls: deque = deque(maxlen=window)

    def record_get_next(self, timestamp_ns: int) -> None:
        self._calls.append(timestamp_ns)

    def rate(self) -> float | None:
        if len(self._calls) < 2:
            return None
        span = self._calls[-1] - self._calls[0]
        if span <= 0:
            return None
        return (len(self._calls) - 1) / (span / 1e9)


class Estimators:
    """Per-path estimators keyed the same way as the runtime metrics."""

    def __init__(self, half_life: float = DEFAULT_HALF_LIFE, clock=time.monotonic):
        self.half_life = half_life
        self.clock = clock
        self.processing: dict[str, ProcessingTimeEstimator] = {}
        self.consumer = ConsumerRateEstimator()

    def record_processing_time(self, path: str, nanos: float, count: float = 1, now: float | None = None) -> None:
        est = self.processing.get(path)
        if est is None:
            est = self.processing[path] = ProcessingTimeEstimator(self.half_life, self.clock)
        est.record(nanos, count, now)

    def record_get_next(self, timestamp_ns: int) -> None:
        self.consumer.record_get_next(timestamp_ns)

    def processing_time(self, path: str, default: float | None = DEFAULT_PROCESSING_NS) -> float | None:
        est = self.processing.get(path)
        return default if est is None else est.estimate(default)
