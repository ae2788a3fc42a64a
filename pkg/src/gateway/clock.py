"""Clock abstraction and timestamp formatting.

Every component takes a clock object instead of reading the wall clock,
so the same code runs in real time (live gateway) and in simulated time
(scenario runner, deterministic tests).  Timestamps are plain floats,
seconds since the epoch; simulated runs start at 0.
"""

from __future__ import annotations

import time
from datetime import datetime, timezone


class SystemClock:
    """Wall-clock time."""

    def now(self) -> float:
        return time.time()


class ManualClock:
    """A clock advanced explicitly by its owner. Never moves backwards."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError("clock cannot move backwards")
        self._now += dt
        return self._now

    def set(self, t: float) -> float:
        if t < self._now:
            raise ValueError("clock cannot move backwards")
        self._now = float(t)
        return self._now


def rfc3339(ts: float) -> str:
    """Render a timestamp as an RFC 3339 UTC string.

    Integral seconds render without a fractional part so that serialized
    documents are byte-stable across runs.
    """
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    if dt.microsecond == 0:
        return dt.strftime("%Y-%m-%dT%H:%M:%SZ")
    return dt.strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_rfc3339(text: str) -> float:
    """Inverse of :func:`rfc3339`; also accepts a +00:00 offset."""
    normalized = text.replace("Z", "+00:00")
    return datetime.fromisoformat(normalized).timestamp()
