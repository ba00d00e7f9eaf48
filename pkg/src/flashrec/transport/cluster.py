"""Endpoints, message delivery and the rendezvous store."""

from __future__ import annotations

import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Optional, TextIO

from .clock import Clock, Event, Timeout, Wait

log = logging.getLogger(__name__)

Address = tuple[str, int]


class DeliveryFailure(Exception):
    """Destination endpoint is not registered (its node was killed)."""


class StoreTimeout(TimeoutError):
    pass


class StoreKeyError(KeyError):
    pass


@dataclass
class Message:
    kind: str
    payload: Any
    src: Address
    dst: Address
    seq: int
    sent_at: float


class EventLog:
    """Newline-delimited ``tick,event_type,src,dst,detail`` records."""

    def __init__(self, sink: Optional[TextIO] = None):
        self.lines: list[str] = []
        self._sink = sink

    def record(self, tick: float, event_type: str, src: str, dst: str, detail: str = "") -> None:
        t = int(tick) if float(tick).is_integer() else round(tick, 6)
        line = f"{t},{event_type},{src},{dst},{detail}"
        self.lines.append(line)
        if self._sink is not None:
            self._sink.write(line + "\n")

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines)


def fmt_addr(addr: Optional[Address]) -> str:
    return "-" if addr is None else f"{addr[0]}/{addr[1]}"


class Endpoint:
    def __init__(self, cluster: "Cluster", node_id: str, process_id: int):
        self.cluster = cluster
        self.node_id = node_id
        self.process_id = process_id
        self.inbox: deque[Message] = deque()
        self.alive = True
        self._arrival: Optional[Event] = None

    @property
    def addr(self) -> Address:
        return (self.node_id, self.process_id)

    def _deliver(self, msg: Message) -> None:
        self.inbox.append(msg)
        if self._arrival is not None:
            ev, self._arrival = self._arrival, None
            ev.succeed()

    def _take(self, kind) -> Optional[Message]:
        for i, msg in enumerate(self.inbox):
            if kind is None or msg.kind == kind or (isinstance(kind, tuple) and msg.kind in kind):
                del self.inbox[i]
                return msg
        return None

    def recv(self, kind: str | tuple[str, ...] | None = None, timeout: Optional[float] = None):
        """Generator: next message (optionally of ``kind``), or None on timeout."""
        clock = self.cluster.clock
        deadline = None if timeout is None else clock.now + timeout
        while True:
            msg = self._take(kind)
            if msg is not None:
                return msg
            if deadline is not None and clock.now >= deadline:
                return None
            if self._arrival is None:
                self._arrival = clock.event()
            left = None if deadline is None else deadline - clock.now
            yield Wait(self._arrival, left)

    def drain(self, keep: Callable[[Message], bool] = lambda m: False) -> int:
        """Drop queued messages not selected by ``keep``; returns the count dropped."""
        kept = [m for m in self.inbox if keep(m)]
        dropped = len(self.inbox) - len(kept)
        self.inbox = deque(kept)
        return dropped

    def __repr__(self) -> str:
        return f"Endpoint({self.node_id!r}, {self.process_id})"


class Cluster:
    """One transport instance: all message passing between endpoints goes through it.

    Per (sender, receiver) pair delivery is FIFO even under random latency.
    """

    def __init__(self, clock: Clock, latency: float = 1, latency_fn: Optional[Callable[[], float]] = None,
                 event_log: Optional[EventLog] = None):
        self.clock = clock
        self.latency = latency
        self.latency_fn = latency_fn
        self.event_log = event_log
        self.endpoints: dict[Address, Endpoint] = {}
        self._pid = itertools.count()
        self._seq = itertools.count()
        self._last_delivery: dict[tuple[Address, Address], float] = {}
        self.sent_by_kind: dict[str, int] = {}
        self.sent = 0

    def log(self, event_type: str, src: Optional[Address] = None, dst: Optional[Address] = None,
            detail: str = "") -> None:
        if self.event_log is not None:
            self.event_log.record(self.clock.now, event_type, fmt_addr(src), fmt_addr(dst), detail)

    def register(self, node_id: str) -> Endpoint:
        ep = Endpoint(self, node_id, next(self._pid))
        self.endpoints[ep.addr] = ep
        self.log("register", ep.addr)
        return ep

    def deregister(self, ep: Endpoint) -> None:
        if self.endpoints.pop(ep.addr, None) is not None:
            ep.alive = False
            self.log("deregister", ep.addr)

    def kill_node(self, node_id: str) -> list[Endpoint]:
        victims = [ep for addr, ep in self.endpoints.items() if addr[0] == node_id]
        for ep in victims:
            self.deregister(ep)
        return victims

    def is_alive(self, addr: Address) -> bool:
        return addr in self.endpoints

    def send(self, src: Endpoint, dst: Address | Endpoint, kind: str, payload: Any = None,
             latency: Optional[float] = None, bulk: bool = False) -> bool:
        """Queue ``payload`` for ``dst``.

        ``bulk`` transfers stream for their whole latency and are dropped if the
        sender dies before they finish.
        """
        if isinstance(dst, Endpoint):
            dst = dst.addr
        if dst not in self.endpoints:
            self.log("send_failed", src.addr, dst, kind)
            raise DeliveryFailure(dst)
        if latency is None:
            latency = self.latency_fn() if self.latency_fn is not None else self.latency
        now = self.clock.now
        pair = (src.addr, dst)
        at = max(now + latency, self._last_delivery.get(pair, -math.inf))
        self._last_delivery[pair] = at
        msg = Message(kind, payload, src.addr, dst, next(self._seq), now)
        self.sent += 1
        self.sent_by_kind[kind] = self.sent_by_kind.get(kind, 0) + 1
        self.log("send", src.addr, dst, kind)
        self.clock.call_later(at - now, lambda: self._arrive(msg, bulk))
        return True

    def _arrive(self, msg: Message, bulk: bool) -> None:
        ep = self.endpoints.get(msg.dst)
        if ep is None or (bulk and msg.src not in self.endpoints):
            self.log("drop", msg.src, msg.dst, msg.kind)
            return
        self.log("deliver", msg.src, msg.dst, msg.kind)
        ep._deliver(msg)


@dataclass(frozen=True)
class StoreEstablishmentReport:
    n: int
    p: int
    rounds: int
    per_connection_cost: float
    elapsed: float


def store_rounds(n: int, p: int) -> int:
    if n < 1 or p < 1:
        raise ValueError("n and p must be at least 1")
    return n if p == 1 else -(-n // p)


def _batches(n: int, size: int) -> Iterator[range]:
    for lo in range(0, n, size):
        yield range(lo, min(lo + size, n))


class Store:
    """Rendezvous key-value store; last writer wins."""

    def __init__(self, clock: Clock):
        self.clock = clock
        self.data: dict[str, bytes] = {}
        self.connected: set[int] = set()
        self._waiters: dict[str, Event] = {}

    def establish(self, n: int, p: int, per_connection_cost: float = 1):
        """Generator: connect ``n`` clients ``p`` at a time (serially when p == 1)."""
        rounds = store_rounds(n, p)
        start = self.clock.now
        counted = 0
        for batch in _batches(n, 1 if p == 1 else p):
            yield Timeout(per_connection_cost)
            self.connected.update(batch)
            counted += 1
        assert counted == rounds
        return StoreEstablishmentReport(n, p, counted, per_connection_cost, self.clock.now - start)

    def put(self, key: str, value: bytes) -> None:
        self.data[key] = value
        ev = self._waiters.pop(key, None)
        if ev is not None:
            ev.succeed(value)

    def get(self, key: str) -> bytes:
        try:
            return self.data[key]
        except KeyError:
            raise StoreKeyError(key) from None

    def wait(self, key: str, timeout: Optional[float] = None):
        """Generator: value of ``key`` once set; raises StoreTimeout."""
        if key in self.data:
            return self.data[key]
        ev = self._waiters.get(key)
        if ev is None:
            ev = self._waiters[key] = self.clock.event()
        fired = yield Wait(ev, timeout)
        if not fired:
            raise StoreTimeout(key)
        return self.data[key]


def establish_store(n: int, p: int, clock: Clock, per_connection_cost: float = 1):
    """Generator wrapper: fresh store, ``n`` clients, parallelism ``p``."""
    store = Store(clock)
    report = yield from store.establish(n, p, per_connection_cost)
    return report
