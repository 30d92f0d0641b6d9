"""Discrete-event core: event loop, links with drop-tail FIFO queues, routes."""
from __future__ import annotations

import heapq
from collections import deque
from typing import Any, Callable, Deque, List, Optional, Sequence, Tuple, Union

from ..types import US_PER_S

Capacity = Union[int, Callable[[int], int]]


class EventLoop:
    """Events run in (time, insertion order); ties never depend on callbacks."""

    def __init__(self) -> None:
        self.now = 0
        self._heap: List[Tuple[int, int, Callable[..., Any], tuple]] = []
        self._count = 0

    def at(self, when: int, fn: Callable[..., Any], *args: Any) -> None:
        if when < self.now:
            raise ValueError(f"cannot schedule in the past ({when} < {self.now})")
        self._count += 1
        heapq.heappush(self._heap, (when, self._count, fn, args))

    def after(self, delay: int, fn: Callable[..., Any], *args: Any) -> None:
        self.at(self.now + delay, fn, *args)

    def run(self, until: int) -> None:
        heap = self._heap
        pop = heapq.heappop
        while heap and heap[0][0] <= until:
            when, _, fn, args = pop(heap)
            self.now = when
            fn(*args)
        self.now = max(self.now, until)


class Datagram:
    """A packet in flight along a fixed route of links."""

    __slots__ = ("size", "body", "route", "hop", "sink", "enqueued_at")

    def __init__(self, size: int, body: Any, route: Sequence["Link"],
                 sink: Callable[["Datagram", int], None]):
        self.size = size
        self.body = body
        self.route = route
        self.hop = 0
        self.sink = sink
        self.enqueued_at = 0


def send(dg: Datagram) -> bool:
    """Inject ``dg`` at the first hop; returns False if it was dropped there."""
    return dg.route[0].enqueue(dg)


class Link:
    """Simplex link: FIFO queue of ``queue_limit`` waiting packets, one in
    service, then propagation delay.

    ``capacity`` is bits per second, either constant or a function of time;
    it is sampled when a packet enters service, so a capacity step never
    changes the packet already being serialized.
    """

    def __init__(self, loop: EventLoop, name: str, capacity: Capacity, delay: int,
                 queue_limit: int = 50):
        self.loop = loop
        self.name = name
        self.capacity = capacity
        self.delay = delay
        self.queue_limit = queue_limit
        self.queue: Deque[Datagram] = deque()
        self.busy = False
        self.enqueued = 0
        self.delivered = 0
        self.dropped = 0
        self.bits_sent = 0
        self.on_drop: Optional[Callable[[Datagram, int], None]] = None

    def rate_at(self, t: int) -> int:
        cap = self.capacity
        return cap(t) if callable(cap) else cap

    def serialization(self, size: int, t: int) -> int:
        bits = size * 8
        rate = self.rate_at(t)
        return -(-bits * US_PER_S // rate)

    def enqueue(self, dg: Datagram) -> bool:
        if self.busy and len(self.queue) >= self.queue_limit:
            self.dropped += 1
            if self.on_drop is not None:
                self.on_drop(dg, self.loop.now)
            return False
        self.enqueued += 1
        dg.enqueued_at = self.loop.now
        if self.busy:
            self.queue.append(dg)
        else:
            self._start(dg)
        return True

    def backlog(self) -> int:
        return len(self.queue) + (1 if self.busy else 0)

    def _start(self, dg: Datagram) -> None:
        self.busy = True
        self.loop.after(self.serialization(dg.size, self.loop.now), self._finish, dg)

    def _finish(self, dg: Datagram) -> None:
        self.delivered += 1
        self.bits_sent += dg.size * 8
        self.loop.after(self.delay, _advance, dg)
        if self.queue:
            self._start(self.queue.popleft())
        else:
            self.busy = False


def _advance(dg: Datagram) -> None:
    dg.hop += 1
    if dg.hop < len(dg.route):
        dg.route[dg.hop].enqueue(dg)
    else:
        dg.sink(dg, dg.route[0].loop.now)


class StepSchedule:
    """Piecewise-constant capacity: ``steps`` of (start_us, bps), optionally
    repeating with period ``cycle`` microseconds."""

    def __init__(self, steps: Sequence[Tuple[int, int]], cycle: Optional[int] = None):
        if not steps:
            raise ValueError("empty schedule")
        self.steps = sorted(steps)
        if self.steps[0][0] != 0:
            raise ValueError("schedule must start at t=0")
        self.cycle = cycle

    def __call__(self, t: int) -> int:
        if self.cycle:
            t %= self.cycle
        rate = self.steps[0][1]
        for start, bps in self.steps:
            if start > t:
                break
            rate = bps
        return rate

    def mean(self, duration: int) -> float:
        """Time-averaged capacity over [0, duration)."""
        if duration <= 0:
            return float(self(0))
        total = 0
        probe = 0
        edges = sorted({0, duration} | self._edges(duration))
        for a, b in zip(edges, edges[1:]):
            total += self(a) * (b - a)
            probe += b - a
        return total / probe

    def _edges(self, duration: int) -> set:
        edges = set()
        period = self.cycle or duration
        base = 0
        while base < duration:
            for start, _ in self.steps:
                if base + start < duration:
                    edges.add(base + start)
            if not self.cycle:
                break
            base += period
        return edges


DEFAULT_VARIABLE_STEPS = ((0, 256_000), (40 * US_PER_S, 160_000),
                          (80 * US_PER_S, 100_000), (120 * US_PER_S, 192_000))


def variable_capacity_schedule(t: int, schedule: Optional[StepSchedule] = None) -> int:
    sched = schedule or DEFAULT_SCHEDULE
    return sched(t)


DEFAULT_SCHEDULE = StepSchedule(DEFAULT_VARIABLE_STEPS, cycle=160 * US_PER_S)
