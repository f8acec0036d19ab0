"""Minimal discrete-event loop and cooperative process driver.

Device sessions and the cloud serve loop are written once as plain
generators that yield commands: ``Delay(seconds)`` to model their own
computation time and ``WaitGate(gate)`` to park until someone signals.
A :class:`SimProcess` drives such a generator against the event loop's
virtual clock; :func:`run_blocking` drives the same generator against
wall time and threads, which is how one code path serves both the
simulated and the socket carrier.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Generator, Optional


@dataclass(frozen=True)
class Delay:
    seconds: float


@dataclass(frozen=True)
class WaitGate:
    gate: "Gate"


Command = Any  # Delay | WaitGate


class Gate:
    """A wake-up target. Simulated and threaded variants share this API."""

    def notify(self) -> None:
        raise NotImplementedError


class SimGate(Gate):
    """Wakes parked SimProcesses through the event loop."""

    def __init__(self, loop: "EventLoop"):
        self._loop = loop
        self._waiters: list[Callable[[], None]] = []

    def add_waiter(self, resume: Callable[[], None]) -> None:
        self._waiters.append(resume)

    def notify(self) -> None:
        waiters, self._waiters = self._waiters, []
        for resume in waiters:
            self._loop.call_later(0.0, resume)


class ThreadGate(Gate):
    """Event-backed gate for generators driven on real threads.

    ``block`` uses a short timeout rather than a notify counter; a missed
    wake-up costs one poll interval, and callers re-check their predicate
    in a loop anyway.
    """

    def __init__(self, poll_interval: float = 0.02):
        self._event = threading.Event()
        self._poll_interval = poll_interval

    def notify(self) -> None:
        self._event.set()

    def block(self) -> None:
        self._event.wait(self._poll_interval)
        self._event.clear()


class EventLoop:
    """Heap-based virtual-time scheduler.

    Callbacks scheduled for the same instant run in scheduling order, so
    event ordering (and therefore every seeded simulation) is
    deterministic.
    """

    def __init__(self) -> None:
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._time = 0.0
        self._counter = itertools.count()

    def now(self) -> float:
        return self._time

    def call_at(self, when: float, callback: Callable[[], None]) -> None:
        if when < self._time:
            raise ValueError("cannot schedule into the past")
        heapq.heappush(self._heap, (when, next(self._counter), callback))

    def call_later(self, delay: float, callback: Callable[[], None]) -> None:
        if delay < 0.0:
            raise ValueError("delay must be non-negative")
        self.call_at(self._time + delay, callback)

    def run_until_idle(self, max_events: int = 10_000_000) -> None:
        """Process events until none remain.

        Processes parked on gates hold no events, so the loop stops once
        every runnable process has finished or parked for good.
        """
        for _ in range(max_events):
            if not self._heap:
                return
            when, _, callback = heapq.heappop(self._heap)
            self._time = when
            callback()
        raise RuntimeError("event budget exhausted; runaway simulation?")


class SimProcess:
    """Drives a command-yielding generator on the event loop."""

    def __init__(self, loop: EventLoop, gen: Generator[Command, Any, Any], name: str = ""):
        self._loop = loop
        self._gen = gen
        self.name = name
        self.done = False
        self.result: Any = None
        self.error: Optional[BaseException] = None
        loop.call_later(0.0, self._step)

    def _step(self) -> None:
        try:
            cmd = self._gen.send(None)
        except StopIteration as stop:
            self.done = True
            self.result = stop.value
            return
        except BaseException as exc:  # surfaced by the harness, not swallowed
            self.done = True
            self.error = exc
            raise
        if isinstance(cmd, Delay):
            self._loop.call_later(cmd.seconds, self._step)
        elif isinstance(cmd, WaitGate):
            gate = cmd.gate
            if not isinstance(gate, SimGate):
                raise TypeError("simulated processes must wait on SimGate")
            gate.add_waiter(self._step)
        else:
            raise TypeError(f"unknown simulation command {cmd!r}")


def run_blocking(
    gen: Generator[Command, Any, Any],
    pace: bool = False,
) -> Any:
    """Drive a command generator to completion on the current thread.

    ``Delay`` sleeps only when ``pace`` is set (toy-model compute is
    effectively free on real hardware); ``WaitGate`` blocks on the gate.
    Returns the generator's return value.
    """
    try:
        while True:
            cmd = gen.send(None)
            if isinstance(cmd, Delay):
                if pace and cmd.seconds > 0.0:
                    time.sleep(cmd.seconds)
            elif isinstance(cmd, WaitGate):
                gate = cmd.gate
                if not isinstance(gate, ThreadGate):
                    raise TypeError("blocking driver needs ThreadGate gates")
                gate.block()
            else:
                raise TypeError(f"unknown simulation command {cmd!r}")
    except StopIteration as stop:
        return stop.value
