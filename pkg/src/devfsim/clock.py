"""Virtual time sources for device timing.

Device waits (poll timeouts, frame pacing) are expressed in virtual
milliseconds.  Two clock implementations exist:

* :class:`ManualClock` only moves when a test calls ``advance``; waits are
  exact in virtual time, which makes timing examples deterministic.
* :class:`ScaledRealClock` maps virtual time onto wall time through a
  scale factor so live scenarios finish quickly.

Threads never wait on the clock directly; they wait on their own
``threading.Condition`` registered with the clock, so that a manual
``advance`` can wake them alongside ordinary notifications.
"""

from __future__ import annotations

import threading
import time


class VirtualClock:
    def now_ms(self) -> float:
        raise NotImplementedError

    def register_condition(self, cond: threading.Condition) -> None:
        """Register a condition to be notified when time moves."""

    def cond_wait(self, cond: threading.Condition, deadline_ms: float | None) -> None:
        """Wait on ``cond`` (already held) until notified or time passes."""
        raise NotImplementedError

    def sleep(self, duration_ms: float) -> None:
        cond = threading.Condition()
        self.register_condition(cond)
        deadline = self.now_ms() + duration_ms
        with cond:
            while self.now_ms() < deadline:
                self.cond_wait(cond, deadline)


class ManualClock(VirtualClock):
    """Clock driven explicitly by ``advance``; never moves on its own."""

    def __init__(self, start_ms: float = 0.0):
        self._now = float(start_ms)
        self._lock = threading.Lock()
        self._conds: list[threading.Condition] = []

    def now_ms(self) -> float:
        with self._lock:
            return self._now

    def register_condition(self, cond: threading.Condition) -> None:
        with self._lock:
            if cond not in self._conds:
                self._conds.append(cond)

    def advance(self, delta_ms: float) -> None:
        with self._lock:
            self._now += delta_ms
            conds = list(self._conds)
        for cond in conds:
            with cond:
                cond.notify_all()

    def cond_wait(self, cond: threading.Condition, deadline_ms: float | None) -> None:
        # Bounded wait so a forgotten advance cannot hang a test forever.
        cond.wait(timeout=5.0)


class ScaledRealClock(VirtualClock):
    """Wall-clock backed; ``scale`` real seconds pass per virtual second."""

    def __init__(self, scale: float = 1.0):
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.scale = scale
        self._start = time.monotonic()

    def now_ms(self) -> float:
        return (time.monotonic() - self._start) * 1000.0 / self.scale

    def cond_wait(self, cond: threading.Condition, deadline_ms: float | None) -> None:
        if deadline_ms is None:
            cond.wait(timeout=0.05)
            return
        remaining_real = (deadline_ms - self.now_ms()) * self.scale / 1000.0
        if remaining_real > 0:
            cond.wait(timeout=remaining_real)
