"""Instrumented byte counters for transient pipeline state.

Construction-time overhead (everything that is neither input nor the map
itself) is accounted by explicit register/release calls around the short-
lived buffers: scanline rows, open segments, surface tracks, local maps and
the extracted observed region. Counters are deterministic and allocator
independent, which is what the sublinear-overhead contract is asserted
against.
"""

from __future__ import annotations

import threading
from collections import defaultdict


class TransientTracker:
    """Thread-safe running/peak byte counter keyed by buffer tag."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._current: dict[str, int] = defaultdict(int)
        self._total = 0
        self.peak = 0
        self.max_single = 0

    def alloc(self, tag: str, nbytes: int) -> None:
        with self._lock:
            self._current[tag] += nbytes
            self._total += nbytes
            if self._total > self.peak:
                self.peak = self._total
            if nbytes > self.max_single:
                self.max_single = nbytes

    def free(self, tag: str, nbytes: int) -> None:
        with self._lock:
            self._current[tag] -= nbytes
            self._total -= nbytes

    @property
    def current(self) -> int:
        return self._total

    def current_by_tag(self) -> dict[str, int]:
        with self._lock:
            return dict(self._current)

    def reset(self) -> None:
        with self._lock:
            self._current.clear()
            self._total = 0
            self.peak = 0
            self.max_single = 0


class NullTracker(TransientTracker):
    """No-op tracker used when instrumentation is not requested."""

    def alloc(self, tag: str, nbytes: int) -> None:  # noqa: D102
        pass

    def free(self, tag: str, nbytes: int) -> None:  # noqa: D102
        pass


NULL_TRACKER = NullTracker()
