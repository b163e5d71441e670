"""Deterministic discrete-event transport with credit-based lossless links.

Time advances in integer ticks.  Events are totally ordered by
``(time, node_id, link_id, insertion counter)`` so a given configuration
always replays the same trace.  Each :class:`Link` is unidirectional: the
sender spends one credit per frame, the receiver returns credits (batched per
tick, as one CREDIT frame) when it pops frames from its buffer.
"""

from __future__ import annotations

import heapq
import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol

from ..errors import ProtocolError, TransportError
from .wire import WireFrame, credit_frame

DEFAULT_CAPACITY = 256
NO_LINK = -1


class Node(Protocol):
    node_id: int

    def process(self, now: int) -> None: ...


class Scheduler:
    def __init__(self):
        self._heap: list = []
        self._counter = itertools.count()
        self.now = 0
        self.processed = 0
        self.trace: list[tuple] | None = None

    def schedule(self, time: int, node_id: int, link_id: int, callback: Callable[[int], None], tag: str = ""):
        if time < self.now:
            raise ValueError(f"cannot schedule in the past ({time} < {self.now})")
        heapq.heappush(self._heap, (time, node_id, link_id, next(self._counter), tag, callback))

    def __len__(self):
        return len(self._heap)

    def peek_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def step(self) -> bool:
        """Run one event; returns False on an empty queue."""
        if not self._heap:
            return False
        time, node_id, link_id, _, tag, callback = heapq.heappop(self._heap)
        self.now = time
        self.processed += 1
        if self.trace is not None:
            self.trace.append((time, node_id, link_id, tag))
        callback(time)
        return True

    def run(self, until: Callable[[], bool] | None = None, max_events: int | None = None) -> int:
        n = 0
        while (until is None or not until()) and (max_events is None or n < max_events):
            if not self.step():
                break
            n += 1
        return n

    def clear(self) -> None:
        self._heap.clear()


@dataclass
class LinkStats:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0
    blocked: int = 0
    credit_frames: int = 0


class Link:
    """One direction of a point-to-point connection."""

    def __init__(self, sched: Scheduler, link_id: int, src: "Endpoint", dst: "Endpoint",
                 capacity: int = DEFAULT_CAPACITY, latency: int = 1, name: str = ""):
        if capacity < 1 or latency < 1:
            raise ValueError("link capacity and latency must be >= 1")
        self.sched = sched
        self.link_id = link_id
        self.src = src
        self.dst = dst
        self.capacity = capacity
        self.latency = latency
        self.name = name or f"link{link_id}"
        self.credits = capacity
        self.inflight: deque[tuple[int, WireFrame]] = deque()
        self.rx: deque[WireFrame] = deque()
        self.stats = LinkStats()
        self.closed = False
        self.on_send: Callable[[WireFrame], None] | None = None
        self.on_deliver: Callable[[WireFrame], None] | None = None
        self._pending_credit = 0
        self._deliver_at: int | None = None
        self._credit_at: int | None = None

    def __repr__(self):
        return f"Link({self.name}, credits={self.credits}/{self.capacity})"

    # sender side
    def has_credit(self) -> bool:
        if self.closed:
            raise TransportError(f"send on closed link {self.name}")
        return self.credits > 0

    def try_send(self, frame: WireFrame) -> bool:
        if not self.has_credit():
            self.stats.blocked += 1
            return False
        self._enqueue(frame)
        return True

    def _enqueue(self, frame: WireFrame) -> None:
        self.credits -= 1
        arrive = self.sched.now + self.latency
        self.inflight.append((arrive, frame))
        self.stats.sent += 1
        if self.on_send is not None:
            self.on_send(frame)
        if self._deliver_at is None:
            self._deliver_at = arrive
            self.sched.schedule(arrive, self.dst.node_id, self.link_id, self._deliver, "deliver")

    def _deliver(self, now: int) -> None:
        self._deliver_at = None
        while self.inflight and self.inflight[0][0] <= now:
            _, frame = self.inflight.popleft()
            self.rx.append(frame)
            self.stats.delivered += 1
            if self.on_deliver is not None:
                self.on_deliver(frame)
        if self.inflight:
            self._deliver_at = self.inflight[0][0]
            self.sched.schedule(self._deliver_at, self.dst.node_id, self.link_id, self._deliver, "deliver")
        self.dst.wake(now)

    # receiver side
    def pop(self) -> WireFrame:
        frame = self.rx.popleft()
        self._pending_credit += 1
        if self._credit_at is None:
            self._credit_at = self.sched.now + self.latency
            self.sched.schedule(self._credit_at, self.src.node_id, self.link_id, self._credit_event, "credit")
        return frame

    def _credit_event(self, now: int) -> None:
        k, self._pending_credit, self._credit_at = self._pending_credit, 0, None
        self.stats.credit_frames += 1
        self.grant_credits(credit_frame(k).credits)
        self.src.wake(now)

    def grant_credits(self, k: int) -> None:
        if k < 0:
            raise ProtocolError("negative credit grant")
        if self.credits + k > self.capacity:
            raise ProtocolError(
                f"credit overflow on {self.name}: {self.credits} + {k} > capacity {self.capacity}")
        self.credits += k

    def reset(self) -> None:
        """Drop all queued state (used only when the world is torn down after a failure)."""
        self.inflight.clear()
        self.rx.clear()
        self.credits = self.capacity
        self._pending_credit = 0
        self._deliver_at = None
        self._credit_at = None


def try_send_all(links: Iterable[Link], frame: WireFrame) -> bool:
    """Multicast send: enqueue on every link or on none."""
    links = list(links)
    if not all(link.has_credit() for link in links):
        for link in links:
            link.stats.blocked += 1
        return False
    for link in links:
        link._enqueue(frame)
    return True


class Endpoint:
    """Base for simulated nodes: owns a wake-up schedule so ``process`` runs once per tick."""

    def __init__(self, sched: Scheduler, node_id: int, name: str):
        self.sched = sched
        self.node_id = node_id
        self.name = name
        self._wake_at: int | None = None
        self.alive = True

    def wake(self, now: int, delay: int = 0) -> None:
        t = now + delay
        if self._wake_at is not None and self._wake_at <= t:
            return
        self._wake_at = t
        self.sched.schedule(t, self.node_id, NO_LINK, self._run, "process")

    def _run(self, now: int) -> None:
        if self._wake_at != now:
            return  # superseded by an earlier wake
        self._wake_at = None
        if self.alive:
            self.process(now)

    def process(self, now: int) -> None:  # pragma: no cover - overridden
        raise NotImplementedError

    def reset_wake(self) -> None:
        self._wake_at = None


@dataclass
class Fabric:
    """Registry of links for one simulated world."""

    sched: Scheduler = field(default_factory=Scheduler)
    links: list[Link] = field(default_factory=list)

    def connect(self, src: Endpoint, dst: Endpoint, capacity: int = DEFAULT_CAPACITY,
                latency: int = 1, name: str = "") -> Link:
        link = Link(self.sched, len(self.links), src, dst, capacity, latency, name)
        self.links.append(link)
        return link

    def total_dropped(self) -> int:
        return sum(link.stats.dropped for link in self.links)

    def reset(self) -> None:
        self.sched.clear()
        for link in self.links:
            link.reset()
