"""Deterministic discrete-event kernel driving plain async/await coroutines.

Events live in one heap ordered by (virtual time, sequence number); a
single thread pops and executes them, so two runs with the same seed and
scenario interleave identically. Coroutines park on SimFuture objects and
are resumed through freshly scheduled events, never re-entrantly.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import random

logger = logging.getLogger(__name__)


class SimCancelled(BaseException):
    """Thrown into a task when it is cancelled (BaseException so plain
    ``except Exception`` blocks in node code do not swallow it)."""


class SimFuture:
    __slots__ = ("_done", "_result", "_exc", "_callbacks")

    def __init__(self):
        self._done = False
        self._result = None
        self._exc = None
        self._callbacks = []

    def done(self) -> bool:
        return self._done

    def set_result(self, value) -> None:
        if self._done:
            return
        self._done = True
        self._result = value
        self._fire()

    def set_exception(self, exc: BaseException) -> None:
        if self._done:
            return
        self._done = True
        self._exc = exc
        self._fire()

    def _fire(self) -> None:
        callbacks, self._callbacks = self._callbacks, []
        for cb in callbacks:
            cb(self)

    def add_done_callback(self, cb) -> None:
        if self._done:
            cb(self)
        else:
            self._callbacks.append(cb)

    def remove_done_callback(self, cb) -> None:
        if cb in self._callbacks:
            self._callbacks.remove(cb)

    def __await__(self):
        if not self._done:
            yield self
        if self._exc is not None:
            raise self._exc
        return self._result


class Timer:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class SimTask:
    def __init__(self, kernel: "SimKernel", coro, name: str = ""):
        self._kernel = kernel
        self._coro = coro
        self._name = name or getattr(coro, "__name__", "task")
        self._parked: SimFuture | None = None
        self._cancelled = False
        self.finished = False
        self.error: BaseException | None = None
        kernel.call_soon(self._step, None)

    def cancel(self) -> None:
        if self.finished or self._cancelled:
            return
        self._cancelled = True
        if self._parked is not None:
            self._parked.remove_done_callback(self._resume)
            self._parked = None
            self._kernel.call_soon(self._step, SimCancelled())

    def _resume(self, _fut: SimFuture) -> None:
        self._kernel.call_soon(self._step, None)

    def _step(self, throw: BaseException | None) -> None:
        if self.finished:
            return
        self._parked = None
        if self._cancelled and throw is None:
            throw = SimCancelled()
        try:
            if throw is not None:
                trap = self._coro.throw(throw)
            else:
                trap = self._coro.send(None)
        except StopIteration:
            self.finished = True
        except SimCancelled:
            self.finished = True
        except BaseException as exc:
            self.finished = True
            self.error = exc
            logger.error("sim task %s failed: %r", self._name, exc)
            self._kernel.task_errors.append((self._name, exc))
        else:
            if not isinstance(trap, SimFuture):
                self.finished = True
                raise RuntimeError(
                    f"sim task {self._name} awaited a non-sim awaitable: {trap!r}")
            self._parked = trap
            trap.add_done_callback(self._resume)


class SimKernel:
    def __init__(self, seed: int = 0):
        self.now = 0.0
        self.rng = random.Random(seed)
        self.task_errors: list[tuple[str, BaseException]] = []
        self._heap: list = []
        self._seq = itertools.count()

    # --- scheduling -------------------------------------------------------

    def call_at(self, when: float, fn, *args) -> Timer:
        timer = Timer()
        heapq.heappush(self._heap, (max(when, self.now), next(self._seq),
                                    timer, fn, args))
        return timer

    def call_later(self, delay: float, fn, *args) -> Timer:
        return self.call_at(self.now + delay, fn, *args)

    def call_soon(self, fn, *args) -> Timer:
        return self.call_at(self.now, fn, *args)

    def spawn(self, coro, name: str = "") -> SimTask:
        return SimTask(self, coro, name)

    def create_future(self) -> SimFuture:
        return SimFuture()

    def sleep(self, delay: float) -> SimFuture:
        fut = SimFuture()
        self.call_later(delay, fut.set_result, None)
        return fut

    # --- execution ----------------------------------------------------------

    def step(self) -> bool:
        """Execute the next pending event; False when none remain."""
        while self._heap:
            when, _seq, timer, fn, args = heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            self.now = when
            fn(*args)
            return True
        return False

    def run_until(self, deadline: float) -> None:
        """Execute every event with time <= deadline, then jump to deadline."""
        while self._heap and self._heap[0][0] <= deadline:
            when, _seq, timer, fn, args = heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            self.now = when
            fn(*args)
        self.now = max(self.now, deadline)

    def run_for(self, duration: float) -> None:
        self.run_until(self.now + duration)

    def run_until_idle(self, max_time: float = math.inf) -> None:
        while self._heap:
            when = self._heap[0][0]
            if when > max_time:
                break
            self.run_until(when)
        if max_time is not math.inf:
            self.now = max(self.now, max_time)
