"""Clock abstraction so latency/slot behavior is assertable without wall sleeps.

WallClock is used in production; TestClock is advanced manually by tests and
wakes anything blocked in ``wait_until``.
"""

import threading
import time


class Clock:
    def now_us(self) -> int:
        raise NotImplementedError

    def wait_until(self, deadline_us: int, wake: threading.Event | None = None) -> None:
        """Block until the clock reaches deadline_us, or ``wake`` is set."""
        raise NotImplementedError

    def sleep_us(self, delta_us: int) -> None:
        self.wait_until(self.now_us() + delta_us)


class WallClock(Clock):
    def now_us(self) -> int:
        return time.time_ns() // 1000

    def wait_until(self, deadline_us: int, wake: threading.Event | None = None) -> None:
        while True:
            remaining = deadline_us - self.now_us()
            if remaining <= 0:
                return
            if wake is not None:
                if wake.wait(remaining / 1e6):
                    return
            else:
                time.sleep(min(remaining / 1e6, 0.05))


class TestClock(Clock):
    """Manually driven clock. ``advance_to`` wakes all pending waiters."""

    __test__ = False  # not a pytest class despite the name

    def __init__(self, start_us: int = 0):
        self._now = start_us
        self._cond = threading.Condition()

    def now_us(self) -> int:
        with self._cond:
            return self._now

    def advance_to(self, t_us: int) -> None:
        with self._cond:
            if t_us < self._now:
                raise ValueError("clock cannot move backwards")
            self._now = t_us
            self._cond.notify_all()

    def advance(self, delta_us: int) -> None:
        with self._cond:
            self._now += delta_us
            self._cond.notify_all()

    def wait_until(self, deadline_us: int, wake: threading.Event | None = None) -> None:
        with self._cond:
            while self._now < deadline_us:
                if wake is not None and wake.is_set():
                    return
                # Poll the wake event with a short timeout; advance() notifies us.
                self._cond.wait(0.01 if wake is not None else None)
