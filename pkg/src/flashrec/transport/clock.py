"""Process kernels shared by the simulated and real-time clocks.

Runtime code (workers, controller, collectives) is written as generators that
yield :class:`Timeout` or :class:`Wait` commands.  A :class:`SimClock` drives
them from a single-threaded discrete-event queue; a :class:`RealClock` runs
each process in its own thread against wall time.  The generator code is the
same in both modes.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import logging
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Generator, Iterable, Optional

log = logging.getLogger(__name__)

ProcessGen = Generator[Any, Any, Any]


class ClockMode(str, enum.Enum):
    REAL = "real"
    SIMULATED = "simulated"


@dataclass(frozen=True)
class Timeout:
    ticks: float


@dataclass(frozen=True)
class Wait:
    """Block until ``event`` triggers, or ``timeout`` ticks pass.

    The yield expression evaluates to True if the event fired.
    """

    event: "Event"
    timeout: Optional[float] = None


class Interrupt(Exception):
    """Base class for exceptions thrown into a process from outside."""


class Event:
    def __init__(self, clock: "Clock"):
        self.clock = clock
        self.triggered = False
        self.value: Any = None
        self._callbacks: list[Callable[["Event"], None]] = []

    def succeed(self, value: Any = None) -> None:
        if self.triggered:
            return
        self.triggered = True
        self.value = value
        callbacks, self._callbacks = self._callbacks, []
        for cb in callbacks:
            cb(self)
        self.clock._notify()

    def add_callback(self, cb: Callable[["Event"], None]) -> None:
        if self.triggered:
            cb(self)
        else:
            self._callbacks.append(cb)

    def remove_callback(self, cb: Callable[["Event"], None]) -> None:
        try:
            self._callbacks.remove(cb)
        except ValueError:
            pass


class Process:
    """Handle on a running generator."""

    def __init__(self, clock: "Clock", gen: ProcessGen, name: str):
        self.clock = clock
        self.gen = gen
        self.name = name
        self.alive = True
        self.done = Event(clock)
        self.error: Optional[BaseException] = None
        self._token = 0
        self._pending: Optional[BaseException] = None

    def kill(self) -> None:
        self.clock._kill(self)

    def interrupt(self, exc: BaseException) -> None:
        self.clock._interrupt(self, exc)

    def __repr__(self) -> str:
        return f"Process({self.name!r}, alive={self.alive})"


class Clock:
    mode: ClockMode

    @property
    def now(self) -> float:
        raise NotImplementedError

    def event(self) -> Event:
        return Event(self)

    def any_of(self, events: Iterable[Event]) -> Event:
        out = Event(self)
        for ev in events:
            ev.add_callback(lambda e: out.succeed(e))
        return out

    def all_of(self, events: Iterable[Event]) -> Event:
        events = list(events)
        out = Event(self)
        remaining = [len(events)]
        if not events:
            out.succeed([])
            return out

        def _one(_e: Event) -> None:
            remaining[0] -= 1
            if remaining[0] == 0:
                out.succeed([e.value for e in events])

        for ev in events:
            ev.add_callback(_one)
        return out

    def spawn(self, gen: ProcessGen, name: str = "proc") -> Process:
        raise NotImplementedError

    def call_later(self, delay: float, fn: Callable[[], None]) -> None:
        raise NotImplementedError

    def stop(self) -> None:
        raise NotImplementedError

    def _notify(self) -> None:
        pass

    def _kill(self, proc: Process) -> None:
        raise NotImplementedError

    def _interrupt(self, proc: Process, exc: BaseException) -> None:
        raise NotImplementedError


class SimClock(Clock):
    """Deterministic discrete-event kernel.

    Events at equal timestamps run in scheduling order, so a run is a pure
    function of its inputs.
    """

    mode = ClockMode.SIMULATED

    def __init__(self) -> None:
        self._now = 0
        self._queue: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = itertools.count()
        self._stopped = False
        self.processed = 0

    @property
    def now(self) -> float:
        return self._now

    def call_later(self, delay: float, fn: Callable[[], None]) -> None:
        if delay < 0:
            raise ValueError("negative delay")
        heapq.heappush(self._queue, (self._now + delay, next(self._seq), fn))

    def spawn(self, gen: ProcessGen, name: str = "proc") -> Process:
        proc = Process(self, gen, name)
        token = proc._token
        self.call_later(0, lambda: self._resume(proc, token, None, None))
        return proc

    def stop(self) -> None:
        self._stopped = True

    def run(self, until: Optional[float] = None) -> float:
        self._stopped = False
        while self._queue and not self._stopped:
            when = self._queue[0][0]
            if until is not None and when > until:
                self._now = until
                break
            when, _, fn = heapq.heappop(self._queue)
            self._now = when
            self.processed += 1
            fn()
        return self._now

    def _resume(self, proc: Process, token: int, value: Any, exc: Optional[BaseException]) -> None:
        if not proc.alive or token != proc._token:
            return
        proc._token += 1
        if proc._pending is not None:
            exc, proc._pending = proc._pending, None
        try:
            cmd = proc.gen.throw(exc) if exc is not None else proc.gen.send(value)
        except StopIteration as stop:
            proc.alive = False
            proc.done.succeed(stop.value)
            return
        except Interrupt as err:
            proc.alive = False
            proc.error = err
            proc.done.succeed(None)
            return
        self._park(proc, cmd)

    def _park(self, proc: Process, cmd: Any) -> None:
        token = proc._token
        if isinstance(cmd, Event):
            cmd = Wait(cmd)
        if isinstance(cmd, Timeout):
            self.call_later(cmd.ticks, lambda: self._resume(proc, token, None, None))
        elif isinstance(cmd, Wait):
            ev = cmd.event

            def _fired(e: Event) -> None:
                self.call_later(0, lambda: self._resume(proc, token, True, None))

            ev.add_callback(_fired)
            if cmd.timeout is not None and not ev.triggered:
                def _expire() -> None:
                    if proc._token == token and proc.alive:
                        ev.remove_callback(_fired)
                        self._resume(proc, token, False, None)

                self.call_later(cmd.timeout, _expire)
        else:
            raise TypeError(f"{proc.name} yielded unsupported command {cmd!r}")

    def _kill(self, proc: Process) -> None:
        if not proc.alive:
            return
        proc.alive = False
        proc._token += 1
        if proc.gen.gi_running:
            self.call_later(0, proc.gen.close)
        else:
            proc.gen.close()
        proc.done.succeed(None)

    def _interrupt(self, proc: Process, exc: BaseException) -> None:
        if not proc.alive:
            return
        token = proc._token
        proc._token += 1
        # the resume below must run with the bumped token
        self.call_later(0, lambda: self._resume(proc, token + 1, None, exc))


class RealClock(Clock):
    """Wall-clock kernel: one thread per process.

    Generator bodies execute under a single kernel lock, so runtime objects are
    only ever touched by one thread at a time; processes block concurrently.
    """

    mode = ClockMode.REAL

    def __init__(self, tick_seconds: float = 0.01) -> None:
        self.tick_seconds = tick_seconds
        self._t0 = time.monotonic()
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._threads: list[threading.Thread] = []
        self._stopped = threading.Event()
        # one timer thread and a heap, so callbacks with equal delays fire in call order
        self._due: list[tuple[float, int, Callable[[], None]]] = []
        self._due_seq = itertools.count()
        self._due_cond = threading.Condition(self._lock)
        threading.Thread(target=self._timer_loop, name="clock-timers", daemon=True).start()

    @property
    def now(self) -> float:
        return (time.monotonic() - self._t0) / self.tick_seconds

    def _notify(self) -> None:
        self._cond.notify_all()

    def spawn(self, gen: ProcessGen, name: str = "proc") -> Process:
        proc = Process(self, gen, name)
        th = threading.Thread(target=self._main, args=(proc,), name=name, daemon=True)
        with self._lock:
            self._threads.append(th)
        th.start()
        return proc

    def call_later(self, delay: float, fn: Callable[[], None]) -> None:
        with self._lock:
            if delay <= 0:
                fn()
                return
            heapq.heappush(self._due, (time.monotonic() + delay * self.tick_seconds, next(self._due_seq), fn))
            self._due_cond.notify()

    def _timer_loop(self) -> None:
        with self._lock:
            while not self._stopped.is_set():
                if not self._due:
                    self._due_cond.wait()
                    continue
                wait = self._due[0][0] - time.monotonic()
                if wait > 0:
                    self._due_cond.wait(wait)
                    continue
                _, _, fn = heapq.heappop(self._due)
                try:
                    fn()
                except Exception:  # keep the remaining timers alive
                    log.exception("timer callback failed")

    def stop(self) -> None:
        with self._lock:
            self._stopped.set()
            self._cond.notify_all()
            self._due_cond.notify_all()

    def run(self, until: Optional[float] = None) -> float:
        deadline = None if until is None else until * self.tick_seconds
        self._stopped.wait(deadline)
        self.stop()
        return self.now

    def _blocked(self, proc: Process) -> bool:
        return proc.alive and proc._pending is None and not self._stopped.is_set()

    def _main(self, proc: Process) -> None:
        with self._lock:
            value: Any = None
            exc: Optional[BaseException] = None
            while True:
                if not proc.alive or self._stopped.is_set():
                    proc.gen.close()
                    break
                try:
                    cmd = proc.gen.throw(exc) if exc is not None else proc.gen.send(value)
                except StopIteration as stop:
                    proc.alive = False
                    proc.done.succeed(stop.value)
                    break
                except Interrupt as err:
                    proc.alive = False
                    proc.error = err
                    proc.done.succeed(None)
                    break
                except BaseException as err:  # surface crashes instead of hanging
                    log.exception("process %s crashed", proc.name)
                    proc.alive = False
                    proc.error = err
                    proc.done.succeed(None)
                    break
                value, exc = None, None
                if isinstance(cmd, Event):
                    cmd = Wait(cmd)
                if isinstance(cmd, Timeout):
                    end = self.now + cmd.ticks
                    while self._blocked(proc) and self.now < end:
                        self._cond.wait((end - self.now) * self.tick_seconds)
                elif isinstance(cmd, Wait):
                    end = None if cmd.timeout is None else self.now + cmd.timeout
                    while self._blocked(proc) and not cmd.event.triggered:
                        if end is None:
                            self._cond.wait()
                        else:
                            left = end - self.now
                            if left <= 0:
                                break
                            self._cond.wait(left * self.tick_seconds)
                    value = cmd.event.triggered
                else:
                    raise TypeError(f"{proc.name} yielded unsupported command {cmd!r}")
                if proc._pending is not None:
                    exc, proc._pending = proc._pending, None
                    value = None

    def _kill(self, proc: Process) -> None:
        with self._lock:
            if not proc.alive:
                return
            proc.alive = False
            proc.done.succeed(None)
            self._cond.notify_all()

    def _interrupt(self, proc: Process, exc: BaseException) -> None:
        with self._lock:
            if proc.alive:
                proc._pending = exc
                self._cond.notify_all()


def run_until_done(clock: SimClock, gen: ProcessGen, name: str = "main") -> Any:
    """Spawn ``gen`` on a simulated clock and run until it returns its value."""
    proc = clock.spawn(gen, name)
    proc.done.add_callback(lambda _e: clock.stop())
    clock.run()
    if proc.alive:
        raise RuntimeError(f"{name} did not finish (deadlock?)")
    return proc.done.value
