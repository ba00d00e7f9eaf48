"""Communication groups and blocking collectives.

Collectives never time out on their own by default: when a member dies the
survivors stay blocked until something interrupts them.  Reductions sum
contributions in member order, so results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..topology import RankStatus, RankTable
from .clock import Clock, Event, Timeout, Wait
from .cluster import Cluster, DeliveryFailure, Endpoint


class GroupFormationError(RuntimeError):
    def __init__(self, rank: int, reason: str):
        super().__init__(f"rank {rank}: {reason}")
        self.rank = rank


class CollectiveTimeout(TimeoutError):
    pass


class RestoreError(RuntimeError):
    """A replica transfer did not complete (donor lost)."""


def ring_links(members: Sequence[int]) -> frozenset[tuple[int, int]]:
    n = len(members)
    if n < 2:
        return frozenset()
    return frozenset(tuple(sorted((members[i], members[(i + 1) % n]))) for i in range(n))


def tree_links(members: Sequence[int]) -> frozenset[tuple[int, int]]:
    return frozenset(tuple(sorted((members[(i - 1) // 2], members[i]))) for i in range(1, len(members)))


PATTERNS = {"ring": ring_links, "tree": tree_links}


def max_neighbors(members: Sequence[int], links: Iterable[tuple[int, int]]) -> int:
    count = {m: 0 for m in members}
    for a, b in links:
        count[a] += 1
        count[b] += 1
    return max(count.values(), default=0)


@dataclass
class _Round:
    kind: str
    done: Event
    contributions: dict[int, Optional[np.ndarray]] = field(default_factory=dict)


class CommGroup:
    def __init__(self, clock: Clock, members: Sequence[int], links: frozenset[tuple[int, int]],
                 established_at: float, elapsed: float = 0.0, op_cost: float = 0.0, version: int = 0):
        self.clock = clock
        self.members = tuple(members)
        self.links = links
        self.established_at = established_at
        self.elapsed = elapsed
        self.op_cost = op_cost
        self.ranktable_version = version
        self._next: dict[int, int] = {m: 0 for m in self.members}
        self._rounds: dict[int, _Round] = {}
        self.dead: set[int] = set()
        self.completed_rounds = 0

    def __contains__(self, rank: int) -> bool:
        return rank in self._next

    def mark_dead(self, rank: int) -> None:
        """A member died: no round can complete from now on, as with a real ring."""
        if rank in self._next:
            self.dead.add(rank)

    def _enter(self, rank: int, kind: str, contribution: Optional[np.ndarray]) -> _Round:
        if rank not in self._next:
            raise ValueError(f"rank {rank} is not a member of this group")
        k = self._next[rank]
        self._next[rank] = k + 1
        rnd = self._rounds.get(k)
        if rnd is None:
            rnd = self._rounds[k] = _Round(kind, self.clock.event())
        elif rnd.kind != kind:
            raise RuntimeError(f"collective mismatch in round {k}: {rnd.kind} vs {kind}")
        rnd.contributions[rank] = contribution
        if len(rnd.contributions) == len(self.members) and not self.dead:
            del self._rounds[k]
            self.completed_rounds += 1
            rnd.done.succeed(self._reduce(rnd))
        return rnd

    def _reduce(self, rnd: _Round):
        if rnd.kind == "barrier":
            return None
        parts = [rnd.contributions[m] for m in self.members]
        n = parts[0].shape
        for m, part in zip(self.members, parts):
            if part.shape != n:
                raise ValueError(f"rank {m} contributed shape {part.shape}, expected {n}")
        acc = np.zeros_like(parts[0])
        for part in parts:
            acc = acc + part
        return acc

    def round_of(self, rank: int) -> int:
        return self._next[rank]


def form_group(members: Sequence[int], rt: RankTable, clock: Clock, pattern: str = "ring",
               link_cost: float = 1, op_cost: float = 0):
    """Generator: validate membership against ``rt`` and establish links in parallel.

    Elapsed time is the busiest member's neighbor count times ``link_cost``.
    """
    members = list(members)
    for r in members:
        if not 0 <= r < rt.world_size:
            raise GroupFormationError(r, "not in ranktable")
        if rt.entry(r).status is RankStatus.FAULTY:
            raise GroupFormationError(r, "marked faulty")
    links = PATTERNS[pattern](members)
    elapsed = max_neighbors(members, links) * link_cost
    if elapsed:
        yield Timeout(elapsed)
    return CommGroup(clock, members, links, clock.now, elapsed, op_cost, rt.version)


def _finish(group: CommGroup, rnd: _Round, timeout: Optional[float]):
    fired = yield Wait(rnd.done, timeout)
    if not fired:
        raise CollectiveTimeout(f"collective blocked for {timeout} ticks")
    if group.op_cost:
        yield Timeout(group.op_cost)
    return rnd.done.value


def barrier(group: CommGroup, rank: int, timeout: Optional[float] = None):
    rnd = group._enter(rank, "barrier", None)
    yield from _finish(group, rnd, timeout)


def all_reduce_sum(group: CommGroup, rank: int, contribution, timeout: Optional[float] = None,
                   on_complete: Optional[Callable[[], None]] = None):
    """Generator: elementwise sum over members, added in member order.

    ``on_complete`` runs the moment the round completes, before the operation cost elapses.
    """
    rnd = group._enter(rank, "all_reduce", np.array(contribution, dtype=np.float64, copy=True))
    if on_complete is not None:
        rnd.done.add_callback(lambda _e: on_complete())
    result = yield from _finish(group, rnd, timeout)
    return result.copy()


def copy_state(cluster: Cluster, target: Endpoint, donor, timeout: Optional[float] = None):
    """Generator (target side): fetch the donor's serialized state.

    The donor answers ``state_request`` with :func:`serve_state`.  Raises
    RestoreError if the donor is gone or the transfer never lands.
    """
    try:
        cluster.send(target, donor, "state_request", None)
    except DeliveryFailure:
        raise RestoreError(f"donor {donor} unreachable") from None
    msg = yield from target.recv("state_reply", timeout)
    if msg is None:
        raise RestoreError(f"no state from donor {donor} within {timeout} ticks")
    return msg.payload


def serve_state(cluster: Cluster, donor: Endpoint, request_src, payload: bytes, cost: float) -> None:
    """Donor side: stream ``payload`` back; lost if the donor dies within ``cost`` ticks."""
    cluster.send(donor, request_src, "state_reply", bytes(payload), latency=cost, bulk=True)
