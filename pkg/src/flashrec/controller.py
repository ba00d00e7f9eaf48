"""Global recovery controller.

The controller ingests heartbeats and device-plugin reports, detects failures,
waits for the healthy ranks' step tags to settle, plans the recovery and
drives it through control messages.  The decision and planning steps are pure
functions (:func:`decide_stop_moment`, :func:`plan_recovery`) so they can be
tested without a cluster.
"""

from __future__ import annotations

import enum
import itertools
import logging
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from .failures import FailureClass
from .protocol import (
    ACK,
    CONTROL,
    FINISHED,
    HANG_REPORT,
    HEARTBEAT,
    IN_OPTIMIZER,
    JOINED,
    PLUGIN_REPORT,
    PROCESS_EXIT,
    RANK_INFO,
    RANKTABLE,
    RESTORE_FAILED,
    Action,
    Control,
    HeartbeatRecord,
    Mode,
    Phase,
    RanktableMode,
    RuntimeContext,
)
from .topology import (
    ParallelTopology,
    RankTable,
    check_recoverability,
    read_ranktable_file,
    replace_node,
    write_ranktable_file,
)
from .transport import CommGroup, DeliveryFailure, Store, Timeout, Wait, form_group

log = logging.getLogger(__name__)


class FailureKind(str, enum.Enum):
    HEARTBEAT_MISS = "HeartbeatMiss"
    PLUGIN_REPORT = "PluginReport"
    PROCESS_EXIT = "ProcessExit"
    PROTOCOL_VIOLATION = "ProtocolViolation"
    STOP_WAIT_TIMEOUT = "StopWaitTimeout"
    HANG = "Hang"


@dataclass(frozen=True)
class FailureEvent:
    node_id: str
    device_id: int
    kind: FailureKind
    failure_class: FailureClass
    detected_at: float
    evidence_at: float
    rank: Optional[int] = None

    def __post_init__(self) -> None:
        if self.detected_at < self.evidence_at:
            raise ValueError("detected_at precedes the evidence")


class UnknownRank(KeyError):
    pass


class StepTagConflict(RuntimeError):
    """Healthy step tags are in a state the barrier makes impossible."""


class CheckpointFallback(RuntimeError):
    def __init__(self, lost_shards):
        super().__init__(f"no healthy replica for {len(lost_shards)} shard(s)")
        self.lost_shards = lost_shards


class ResourceExhausted(RuntimeError):
    pass


class StaleRanktable(ValueError):
    pass


class ScenarioFailure(RuntimeError):
    """Training cannot continue: no replica and no checkpoint, or no spare nodes."""


class RecoveryError(RuntimeError):
    pass


class _Replan(Exception):
    pass


# ---------------------------------------------------------------------------
# registry and detection


def tag_transition_ok(prev_tag: int, last_step: int, new_tag: int) -> bool:
    """Step-tag automaton: i -> -1 -> i+1, repeats allowed."""
    if new_tag == prev_tag:
        return True
    if prev_tag >= 0 and new_tag == IN_OPTIMIZER:
        return True
    if prev_tag == IN_OPTIMIZER and new_tag == last_step + 1:
        return True
    return False


@dataclass
class RankRecord:
    rank: int
    node_id: str
    tag: int = 0
    last_step: int = 0
    last_seen: float = 0.0
    incarnation: int = 0
    monitored: bool = True
    accept_from: int = 0  # heartbeats from older incarnations are stale


class Registry:
    def __init__(self, rt: RankTable, heartbeat_period: float = 1, miss_threshold: int = 3, now: float = 0.0):
        self.heartbeat_period = heartbeat_period
        self.miss_threshold = miss_threshold
        self.records = {e.rank: RankRecord(e.rank, e.node_id, last_seen=now) for e in rt.entries}

    @property
    def miss_window(self) -> float:
        return self.miss_threshold * self.heartbeat_period

    def record(self, rank: int) -> RankRecord:
        try:
            return self.records[rank]
        except KeyError:
            raise UnknownRank(rank) from None

    def ingest(self, hb: HeartbeatRecord) -> Optional[FailureEvent]:
        rec = self.record(hb.rank)
        if hb.incarnation < rec.accept_from or hb.incarnation < rec.incarnation:
            return None  # sent by a process that has since been failed or replaced
        if hb.incarnation > rec.incarnation or not rec.monitored:
            rec.incarnation = hb.incarnation
            rec.node_id = hb.node_id
            rec.monitored = True
            rec.tag = hb.step_tag
            if hb.step_tag >= 0:
                rec.last_step = hb.step_tag
            rec.last_seen = max(rec.last_seen, hb.sent_at)
            return None
        rec.last_seen = max(rec.last_seen, hb.sent_at)
        if not tag_transition_ok(rec.tag, rec.last_step, hb.step_tag):
            rec.monitored = False
            rec.accept_from = rec.incarnation + 1
            return FailureEvent(rec.node_id, hb.rank, FailureKind.PROTOCOL_VIOLATION, FailureClass.UNCLASSIFIED,
                                hb.sent_at, hb.sent_at, hb.rank)
        rec.tag = hb.step_tag
        if hb.step_tag >= 0:
            rec.last_step = hb.step_tag
        return None

    def detect(self, now: float) -> list[FailureEvent]:
        out = []
        window = self.miss_window
        for rec in self.records.values():
            if rec.monitored and now >= rec.last_seen + window:
                rec.monitored = False
                rec.accept_from = rec.incarnation + 1
                out.append(FailureEvent(rec.node_id, rec.rank, FailureKind.HEARTBEAT_MISS,
                                        FailureClass.UNCLASSIFIED, now, rec.last_seen, rec.rank))
        return out

    def suspend(self, ranks: Iterable[int]) -> None:
        for r in ranks:
            rec = self.records[r]
            rec.monitored = False
            rec.accept_from = max(rec.accept_from, rec.incarnation + 1)

    def rebase(self, rank: int, step: int, now: float) -> None:
        """Expect ``rank`` to resume tagging from ``step``."""
        rec = self.records[rank]
        rec.tag = rec.last_step = step
        rec.last_seen = max(rec.last_seen, now)
        rec.monitored = True

    def move(self, rank: int, node_id: str, incarnation: int, now: float) -> None:
        rec = self.records[rank]
        rec.node_id = node_id
        rec.incarnation = rec.accept_from = incarnation
        rec.last_seen = now
        rec.monitored = False


def ingest_heartbeat(registry: Registry, hb: HeartbeatRecord) -> Optional[FailureEvent]:
    """Update ``registry``; returns a protocol-violation event for an illegal tag transition."""
    return registry.ingest(hb)


def detect_failures(registry: Registry, now: float) -> list[FailureEvent]:
    """Ranks silent for ``miss_threshold * heartbeat_period`` ticks, each reported once."""
    return registry.detect(now)


# ---------------------------------------------------------------------------
# stop decision


class StopKind(str, enum.Enum):
    WAIT = "wait"
    FORWARD_BACKWARD = "forward_backward"
    OPTIMIZER_STEP = "optimizer_step"


@dataclass(frozen=True)
class StopDecision:
    kind: StopKind
    failure_step: int
    resume_step: Optional[int] = None

    @property
    def authorized(self) -> bool:
        return self.kind is not StopKind.WAIT

    @property
    def failure_phase(self) -> Optional[Phase]:
        return {StopKind.FORWARD_BACKWARD: Phase.FORWARD_BACKWARD,
                StopKind.OPTIMIZER_STEP: Phase.OPTIMIZER}.get(self.kind)


def decide_stop_moment(failure_step: int, tags: dict[int, int]) -> StopDecision:
    """Classify the healthy ranks' step tags relative to the failed step ``i``.

    All ``i``: the failure hit forward/backward, resume at ``i``.  All ``i+1``:
    the optimizer of step ``i`` completed everywhere, resume at ``i+1``.  Any
    rank still inside an optimizer (-1) or behind ``i`` means wait.
    """
    i = failure_step
    values = set(tags.values())
    if not values:
        return StopDecision(StopKind.FORWARD_BACKWARD, i, i)
    ahead = sorted(v for v in values if v > i + 1)
    if ahead:
        raise StepTagConflict(f"tag {ahead[0]} is more than one step past failed step {i}")
    if IN_OPTIMIZER in values or any(0 <= v < i for v in values):
        return StopDecision(StopKind.WAIT, i)
    if values == {i}:
        return StopDecision(StopKind.FORWARD_BACKWARD, i, i)
    if values == {i + 1}:
        return StopDecision(StopKind.OPTIMIZER_STEP, i, i + 1)
    raise StepTagConflict(f"mixed tags {sorted(values)} with no rank inside an optimizer")


# ---------------------------------------------------------------------------
# planning


@dataclass(frozen=True)
class PlannedAction:
    target: Any  # rank, or node id for Recreate
    action: Action
    arg: Any = None


@dataclass(frozen=True)
class RecoveryPlan:
    resume_step: int
    failure_step: int
    failure_phase: Phase
    faulty_ranks: frozenset[int]
    faulty_nodes: frozenset[str]
    replacements: tuple[tuple[str, str], ...]
    donor_map: dict[int, int]
    actions: tuple[PlannedAction, ...]
    ranktable_version_after: int

    @property
    def replacement_nodes(self) -> frozenset[str]:
        return frozenset(new for _, new in self.replacements)

    def targets(self, action: Action) -> list:
        return [a.target for a in self.actions if a.action is action]


def plan_recovery(decision: StopDecision, faulty_ranks: Iterable[int], topo: ParallelTopology, rt: RankTable,
                  spare_pool: list[str], dead_nodes: Optional[Iterable[str]] = None) -> RecoveryPlan:
    """Build the ordered action list for an authorized stop.

    ``dead_nodes`` are recreated on spares; they default to every node that
    hosts a faulty rank.  Ranks on nodes that were already recreated only need
    restoring.
    """
    if not decision.authorized:
        raise ValueError("stop moment not yet authorized")
    faulty = frozenset(faulty_ranks)
    verdict = check_recoverability(topo, faulty)
    if not verdict.recoverable:
        raise CheckpointFallback(verdict.lost_shards)
    dead = sorted(set(dead_nodes) if dead_nodes is not None else {rt.node_of(r) for r in faulty})
    if len(spare_pool) < len(dead):
        raise ResourceExhausted(f"{len(dead)} node(s) to recreate, {len(spare_pool)} spare(s) left")
    replacements = tuple(zip(dead, spare_pool))
    healthy = [r for r in range(topo.world_size) if r not in faulty]
    everyone = list(range(topo.world_size))
    resume = decision.resume_step
    actions: list[PlannedAction] = []
    actions += [PlannedAction(r, Action.STOP) for r in healthy]
    actions += [PlannedAction(r, Action.CLEAN) for r in healthy]
    actions += [PlannedAction(old, Action.RECREATE, new) for old, new in replacements]
    actions += [PlannedAction(r, Action.RESET) for r in everyone]
    actions += [PlannedAction(r, Action.RESTORE, verdict.donor_map[r]) for r in sorted(faulty)]
    actions += [PlannedAction(r, Action.ROLLBACK, resume) for r in everyone]
    actions += [PlannedAction(r, Action.CONTINUE) for r in everyone]
    return RecoveryPlan(resume, decision.failure_step, decision.failure_phase, faulty, frozenset(dead),
                        replacements, dict(verdict.donor_map), tuple(actions), rt.version + len(replacements))


def publish_ranktable(rt: RankTable, shared_path) -> None:
    """Atomically install ``rt`` in the shared file; refuses to go backwards."""
    current = read_ranktable_file(shared_path)
    if current is not None and rt.version <= current.version:
        raise StaleRanktable(f"version {rt.version} does not supersede {current.version}")
    write_ranktable_file(shared_path, rt)


def container_start_ticks(seed: int, node_id: str, mean: float, sd: float) -> int:
    """Deterministic per-node container start latency."""
    draw = random.Random(f"{seed}:{node_id}").gauss(mean, sd)
    return max(1, int(round(draw)))


# ---------------------------------------------------------------------------
# runtime


@dataclass
class RecoveryReport:
    mode: str
    detected_at: float
    continued_at: float
    failure_step: int
    failure_phase: Optional[Phase]
    resume_step: int
    faulty_nodes: tuple[str, ...]
    replacements: tuple[tuple[str, str], ...]
    failures: tuple[FailureEvent, ...]
    recreated_containers: int = 0
    replans: int = 0
    ranktable_messages: int = 0
    donor_map: dict[int, int] = field(default_factory=dict)

    @property
    def restart_ticks(self) -> float:
        return self.continued_at - self.detected_at


class Controller:
    """Single logical event processor driving detection and recovery."""

    def __init__(self, ctx: RuntimeContext, rt: RankTable, spares: Iterable[str] = (),
                 worker_factory: Optional[Callable[..., Any]] = None):
        self.ctx = ctx
        self.rt = rt
        self.spares = list(spares)
        self.ep = ctx.cluster.register("controller")
        ctx.controller_addr = self.ep.addr
        t = ctx.timings
        self.registry = Registry(rt, t.heartbeat_period, t.miss_threshold, ctx.clock.now)
        self.workers: dict[int, Any] = {}
        self.worker_factory = worker_factory
        self.reports: list[RecoveryReport] = []
        self.failures: list[FailureEvent] = []
        self._consumed = 0  # failures already attributed to a report
        self._resumed_upto = 0  # failure count when the last recovery told training to continue
        self.store = Store(ctx.clock)
        self.dead_nodes: set[str] = set()
        self.restore_pending: set[int] = set()
        self.finished: set[int] = set()
        self.exit_status: Optional[int] = None
        self.failure_reason: Optional[str] = None
        self.ranktable_publishes = 0
        self.done = ctx.clock.event()
        self._epoch = itertools.count(1)
        self._acks: dict[tuple[int, Action], dict[int, Any]] = {}
        self._joined: set[tuple[int, int]] = set()
        self._rank_info: list[tuple] = []
        self._hangs: list[tuple[float, tuple]] = []
        self._recovering = False
        self._restore_failed: set[int] = set()
        self._new_failure = False
        self._watch_tags = False
        self._changed = None
        self._procs = []

    # -- setup

    def attach(self, workers: dict[int, Any]) -> None:
        self.workers = dict(workers)

    def start(self) -> "Controller":
        clock = self.ctx.clock
        self._procs.append(clock.spawn(self._receiver(), "controller-rx"))
        self._procs.append(clock.spawn(self._driver(), "controller"))
        if self.ctx.heartbeats_enabled:
            self._procs.append(clock.spawn(self._ticker(), "controller-ticker"))
        else:
            self._procs.append(clock.spawn(self._job_watchdog(), "controller-watchdog"))
        return self

    def publish_ranktable(self, rt: RankTable) -> None:
        """Zero messages: workers read the file themselves."""
        if self.ctx.ranktable_path is None:
            return
        publish_ranktable(rt, self.ctx.ranktable_path)
        self.ranktable_publishes += 1

    # -- plumbing

    def _poke(self) -> None:
        if self._changed is not None:
            ev, self._changed = self._changed, None
            ev.succeed()

    def _wait(self, pred: Callable[[], bool], timeout: Optional[float] = None, abort: bool = False,
              stall: Optional[float] = None):
        """Block until ``pred()`` holds.

        ``abort`` raises ``_Replan`` on a new detected failure. ``stall`` polls at that period
        and raises ``_Replan`` once a worker is found dead, for restarts where nothing else
        would notice: the job stalls until its collective timeout fires.
        """
        clock = self.ctx.clock
        deadline = None if timeout is None else clock.now + timeout
        while not pred():
            if abort and self._new_failure:
                raise _Replan()
            left = None
            if deadline is not None:
                left = deadline - clock.now
                if left <= 0:
                    return False
            if stall is not None:
                left = stall if left is None else min(left, stall)
            if self._changed is None:
                self._changed = clock.event()
            yield Wait(self._changed, left)
            if stall is not None and not pred() and any(not w.alive for w in self.workers.values()):
                raise _Replan()
        return True

    def _wait_any(self, timeout: Optional[float] = None):
        """Block until the next relevant message (or ``timeout``)."""
        if self._changed is None:
            self._changed = self.ctx.clock.event()
        yield Wait(self._changed, timeout)

    def _send(self, rank: int, ctl: Control) -> None:
        w = self.workers.get(rank)
        if w is None:
            return
        try:
            self.ctx.cluster.send(self.ep, w.ep.addr, CONTROL, ctl)
        except DeliveryFailure:
            log.debug("control %s to dead rank %d dropped", ctl.action.value, rank)

    def _broadcast(self, ranks: Iterable[int], action: Action, epoch: int, arg=None) -> None:
        for r in ranks:
            self._send(r, Control(action, arg, epoch))

    def _await_acks(self, epoch: int, action: Action, ranks: Iterable[int], abort: bool = True,
                    stall: Optional[float] = None):
        want = set(ranks)
        got = self._acks.setdefault((epoch, action), {})

        def ready() -> bool:
            if abort and self._restore_failed & want:
                raise _Replan()
            return want.issubset(got)

        yield from self._wait(ready, abort=abort, stall=stall)
        return {r: got[r] for r in want}

    def _all_finished(self) -> bool:
        return len(self.finished) == self.ctx.topo.world_size

    # -- message intake

    def _receiver(self):
        while True:
            msg = yield from self.ep.recv()
            self._on_message(msg)

    def _on_message(self, msg) -> None:
        kind = msg.kind
        if kind == HEARTBEAT:
            try:
                event = self.registry.ingest(msg.payload)
            except UnknownRank:
                log.warning("heartbeat from unregistered rank %s", msg.payload.rank)
                return
            if event is not None:
                self._fail(event)
            if self._watch_tags:
                self._poke()
        elif kind in (PLUGIN_REPORT, PROCESS_EXIT):
            report = msg.payload
            if report.node_id not in self.rt.nodes():
                return
            fk = FailureKind.PLUGIN_REPORT if kind == PLUGIN_REPORT else FailureKind.PROCESS_EXIT
            for dev in report.faulty_devices:
                self._fail(FailureEvent(report.node_id, dev, fk, FailureClass(report.devices[dev]),
                                        self.ctx.clock.now, report.sent_at))
        elif kind == ACK:
            ack = msg.payload
            self._acks.setdefault((ack.epoch, ack.action), {})[ack.rank] = ack.info
            self._poke()
        elif kind == JOINED:
            self._joined.add(msg.payload)
            self._poke()
        elif kind == FINISHED:
            rank, inc, _step = msg.payload
            if inc == self.registry.records[rank].incarnation:
                self.finished.add(rank)
                self._poke()
        elif kind == HANG_REPORT:
            rank, inc, _step = msg.payload
            if inc == self.registry.records[rank].incarnation:
                self._hangs.append((self.ctx.clock.now, msg.payload))
                self._poke()
        elif kind == RESTORE_FAILED:
            self._restore_failed.add(msg.payload[0])
            self._poke()
        elif kind == RANK_INFO:
            self._rank_info.append(msg.payload)
            self._poke()
        else:
            log.warning("controller ignoring %s message", kind)

    def _ticker(self):
        period = self.ctx.timings.heartbeat_period
        while True:
            yield Timeout(period)
            for event in self.registry.detect(self.ctx.clock.now):
                self._fail(event)

    def _job_watchdog(self):
        """Scheduler view of a conventional job: notice when no training process is left.

        Survivors of a partial failure report the hang themselves; this only matters once
        every worker has died and nobody is left to time out on a collective.
        """
        while True:
            yield Timeout(self.ctx.timings.hang_timeout)
            if self._recovering or self._hangs or self._all_finished():
                continue
            if self.workers and not any(w.alive for w in self.workers.values()):
                step = min(w.state.step for w in self.workers.values())
                self._hangs.append((self.ctx.clock.now, (None, None, step)))
                self._poke()

    def _fail(self, event: FailureEvent) -> None:
        node = event.node_id
        if node in self.dead_nodes or node not in self.rt.nodes():
            return
        self.dead_nodes.add(node)
        self.failures.append(event)
        ranks = self.rt.ranks_on(node)
        self.registry.suspend(ranks)
        self.finished.difference_update(ranks)
        self._fence(ranks)
        self._new_failure = True
        self._poke()

    def _fence(self, ranks: Iterable[int]) -> None:
        """Make sure a failed rank is really gone (fail-stop), and that its group cannot complete."""
        for r in ranks:
            w = self.workers.get(r)
            if w is None:
                continue
            if w.group is not None:
                w.group.mark_dead(r)
            if w.alive:
                w.kill()

    # -- main loop

    def _driver(self):
        try:
            while True:
                yield from self._wait(lambda: bool(self.dead_nodes) or bool(self._hangs) or self._all_finished())
                if self._all_finished() and not self.dead_nodes:
                    break
                self._recovering = True
                if self.ctx.mode is Mode.FLASH:
                    yield from self._flash_recovery()
                else:
                    yield from self._baseline_recovery()
                self._recovering = False
            self.exit_status = 0
        except ScenarioFailure as err:
            log.error("scenario failed: %s", err)
            self.failure_reason = str(err)
            self.exit_status = 2
        self.done.succeed(self.exit_status)

    def _faulty_ranks(self) -> set[int]:
        out = set(self.restore_pending)
        for node in self.dead_nodes:
            out.update(self.rt.ranks_on(node))
        return out

    def _new_events(self) -> list[FailureEvent]:
        return self.failures[self._consumed:]

    def _flash_recovery(self):
        detected_at = min(e.detected_at for e in self._new_events())
        faulty = self._faulty_ranks()
        failure_step = min(self.registry.records[r].last_step for r in faulty if r not in self.restore_pending)
        counted = set(faulty)
        replans = 0
        recreated = 0
        rt_msgs0 = self._ranktable_messages()
        all_replacements: list[tuple[str, str]] = []
        while True:
            self._new_failure = False
            self._restore_failed.clear()
            faulty = self._faulty_ranks()
            fresh = [r for r in faulty if r not in counted and r not in self.restore_pending]
            if fresh:
                failure_step = min([failure_step] + [self.registry.records[r].last_step for r in fresh])
            counted |= faulty
            fresh_since = max(e.detected_at for e in self.failures)
            try:
                decision = yield from self._await_stop_moment(failure_step, faulty, fresh_since)
                plan = plan_recovery(decision, faulty, self.ctx.topo, self.rt, self.spares, self.dead_nodes)
            except _Replan:
                replans += 1
                continue
            except StepTagConflict as err:
                log.error("step tags inconsistent: %s", err)
                yield from self._restart_from_checkpoint(detected_at, failure_step, "fallback")
                return
            except CheckpointFallback as err:
                log.warning("%s; falling back to checkpoint", err)
                yield from self._restart_from_checkpoint(detected_at, failure_step, "fallback")
                return
            except ResourceExhausted as err:
                raise ScenarioFailure(str(err)) from None
            try:
                done = yield from self.execute_plan(plan)
            except _Replan:
                replans += 1
                recreated += self._last_recreated
                all_replacements += self._last_replacements
                continue
            recreated += self._last_recreated
            all_replacements += self._last_replacements
            break
        self.reports.append(RecoveryReport(
            "flash", detected_at, done, failure_step, plan.failure_phase, plan.resume_step,
            tuple(sorted({old for old, _ in all_replacements} - {new for _, new in all_replacements})),
            tuple(all_replacements), tuple(self.failures[self._consumed:self._resumed_upto]),
            recreated, replans, self._ranktable_messages() - rt_msgs0, plan.donor_map))
        self._consumed = self._resumed_upto

    def _ranktable_messages(self) -> int:
        sent = self.ctx.cluster.sent_by_kind
        return sent.get(RANK_INFO, 0) + sent.get(RANKTABLE, 0)

    def _await_stop_moment(self, failure_step: int, faulty: set[int], fresh_since: float):
        """Wait until every healthy rank has reported a tag after the failure, then classify."""
        clock = self.ctx.clock
        start = clock.now
        healthy = [r for r in range(self.ctx.topo.world_size) if r not in faulty]
        records = self.registry.records
        self._watch_tags = True
        try:
            while True:
                tags = {r: records[r].tag for r in healthy if records[r].last_seen >= fresh_since}
                if len(tags) == len(healthy):
                    decision = decide_stop_moment(failure_step, tags)
                    if decision.authorized:
                        self.ctx.observer.on_stop_decision(failure_step, tags, decision)
                        return decision
                left = self.ctx.timings.stop_wait_timeout - (clock.now - start)
                if left <= 0:
                    laggards = [r for r in healthy if r not in tags or tags[r] == IN_OPTIMIZER or tags[r] < failure_step]
                    for r in laggards:
                        self._fail(FailureEvent(self.rt.node_of(r), r, FailureKind.STOP_WAIT_TIMEOUT,
                                                FailureClass.UNCLASSIFIED, clock.now, clock.now, r))
                    raise _Replan()
                yield from self._wait_any(left)
                if self._new_failure:
                    raise _Replan()
        finally:
            self._watch_tags = False

    def execute_plan(self, plan: RecoveryPlan):
        """Generator: carry out ``plan``; returns the tick at which training was told to continue.

        Healthy-rank suspension and faulty-node recreation run concurrently.
        Raises ``_Replan`` internally when a new failure lands mid-recovery.
        """
        ctx = self.ctx
        t = ctx.timings
        clock = ctx.clock
        epoch = next(self._epoch)
        self._last_recreated = 0
        self._last_replacements = []
        everyone = list(range(ctx.topo.world_size))
        healthy = [r for r in everyone if r not in plan.faulty_ranks]
        spawned = [clock.spawn(self._recreate(old, new), f"recreate-{new}") for old, new in plan.replacements]
        for p in spawned:
            p.done.add_callback(lambda _e: self._poke())
        try:
            self._broadcast(healthy, Action.STOP, epoch)
            stopped = yield from self._await_acks(epoch, Action.STOP, healthy)
            behind = {r: step for r, step in stopped.items() if step != plan.resume_step}
            if behind:
                # decided on tags that were already out of date: look again at the stopped ranks
                log.warning("ranks stopped at %s, plan expected step %d; replanning", behind, plan.resume_step)
                raise _Replan()
            self._broadcast(healthy, Action.CLEAN, epoch)
            yield from self._await_acks(epoch, Action.CLEAN, healthy)
            yield from self._wait(lambda: all(not p.alive for p in spawned), abort=True)
            for p in spawned:
                if p.error is not None:
                    raise RecoveryError(f"{p.name} failed: {p.error}")
            self.publish_ranktable(self.rt)
            mode = ctx.ranktable_mode
            self._rank_info.clear()
            self._broadcast(everyone, Action.RESET, epoch, mode.value)
            if mode is RanktableMode.NEGOTIATE:
                yield from self._negotiate(everyone)
            yield from self._await_acks(epoch, Action.RESET, everyone)
            group = yield from form_group(everyone, self.rt, clock, "ring", t.link_ticks, t.allreduce_ticks)
            for r in sorted(plan.donor_map):
                donor = self.workers[plan.donor_map[r]]
                self._send(r, Control(Action.RESTORE, (donor.ep.addr, plan.resume_step), epoch))
            yield from self._await_acks(epoch, Action.RESTORE, plan.donor_map)
            self._broadcast(everyone, Action.ROLLBACK, epoch, plan.resume_step)
            acks = yield from self._await_acks(epoch, Action.ROLLBACK, everyone)
            self._check_replicas(acks)
        finally:
            for p in spawned:
                p.kill()
        self.restore_pending.clear()
        return (yield from self._resume_all(epoch, plan.resume_step, group))

    def _resume_all(self, epoch: int, resume_step: int, group: CommGroup):
        if self._new_failure:
            raise _Replan()  # landed after the last check: fold it into this recovery
        everyone = list(range(self.ctx.topo.world_size))
        continued_at = self.ctx.clock.now
        for r in everyone:
            self.registry.rebase(r, resume_step, continued_at)
        self.finished.clear()
        # failures from here on belong to the next recovery
        self._resumed_upto = len(self.failures)
        self._broadcast(everyone, Action.CONTINUE, epoch, group)
        got = self._acks.setdefault((epoch, Action.CONTINUE), {})
        yield from self._wait(lambda: all(r in got or self.rt.node_of(r) in self.dead_nodes for r in everyone))
        bad = [r for r, info in got.items() if info == "protocol_error"]
        if bad:
            raise RecoveryError(f"ranks {bad} refused to continue")
        return continued_at

    def _check_replicas(self, rollback_acks: dict[int, Any]) -> None:
        topo = self.ctx.topo
        for shard in topo.shards():
            digests = {rollback_acks[r][1] for r in topo.holders(shard)}
            if len(digests) != 1:
                raise RecoveryError(f"replicas of {shard} disagree after restore")

    def _recreate(self, old: str, new: str):
        """Bring up ``new`` in place of ``old``: container, agent, store, workers."""
        ctx = self.ctx
        t = ctx.timings
        clock = ctx.clock
        yield Timeout(container_start_ticks(ctx.seed, new, t.container_start_mean, t.container_start_sd))
        yield Timeout(t.agent_ticks)
        # only this node's clients join the running store
        yield from self.store.establish(ctx.devices_per_node, ctx.store_parallelism, t.store_connection_ticks)
        self.spares.remove(new)
        self.rt = replace_node(self.rt, old, new)
        self.dead_nodes.discard(old)
        self._last_recreated += 1
        self._last_replacements.append((old, new))
        ranks = self.rt.ranks_on(new)
        joins = set()
        for r in ranks:
            prev = self.workers.get(r)
            inc = (prev.incarnation + 1) if prev is not None else 1
            self.registry.move(r, new, inc, clock.now)
            self.workers[r] = self.worker_factory(r, new, inc)
            self.restore_pending.add(r)
            joins.add((r, inc))
        ctx.observer.on_node_recreated(old, new)
        yield from self._wait(lambda: joins <= self._joined)

    def _negotiate(self, ranks: list[int], stall: Optional[float] = None):
        """Legacy ranktable exchange: collect every rank's info, then send each its table."""
        cost = self.ctx.timings.negotiate_message_ticks
        want = len(ranks)
        yield from self._wait(lambda: len(self._rank_info) >= want, abort=True, stall=stall)
        for _ in range(want):
            yield Timeout(cost)
        for r in ranks:
            w = self.workers[r]
            try:
                self.ctx.cluster.send(self.ep, w.ep.addr, RANKTABLE, self.rt)
            except DeliveryFailure:
                pass
            yield Timeout(cost)

    # -- conventional restart

    def _baseline_recovery(self):
        detected_at = self._hangs[0][0] if self._hangs else self.ctx.clock.now
        if self._hangs:
            failure_step = min(p[2] for _, p in self._hangs)
        else:
            failure_step = min(self.registry.records[r].last_step for r in self._faulty_ranks())
        yield from self._restart_from_checkpoint(detected_at, failure_step, "checkpoint")

    def _restart_from_checkpoint(self, detected_at: float, failure_step: int, label: str):
        """Tear down every process, recreate every container, reload the last checkpoint.

        A failure that lands while the job is coming back up restarts the whole sequence.
        """
        rt_msgs0 = self._ranktable_messages()
        all_replacements: list[tuple[str, str]] = []
        attempts = 0
        recreated = [0]
        while True:
            attempts += 1
            try:
                ckpt, continued_at = yield from self._restart_attempt(failure_step, all_replacements, recreated)
                break
            except _Replan:
                log.warning("failure during restart; starting over")
        replaced = {old for old, _ in all_replacements} - {new for _, new in all_replacements}
        self.reports.append(RecoveryReport(
            label, detected_at, continued_at, failure_step, None, ckpt, tuple(sorted(replaced)),
            tuple(all_replacements), tuple(self.failures[self._consumed:self._resumed_upto]), recreated[0], attempts - 1,
            self._ranktable_messages() - rt_msgs0))
        self._consumed = self._resumed_upto

    def _restart_attempt(self, failure_step: int, all_replacements: list, recreated: list):
        ctx = self.ctx
        t = ctx.timings
        clock = ctx.clock
        world = ctx.topo.world_size
        self._new_failure = False
        self._restore_failed.clear()
        yield Timeout(t.cleanup_ticks)
        dead = {self.rt.node_of(r) for r, w in self.workers.items() if not w.alive} | set(self.dead_nodes)
        for r, w in self.workers.items():
            if w.group is not None:
                w.group.mark_dead(r)
            w.kill()
        self.registry.suspend(range(world))  # torn down on purpose, not failed
        ckpt = ctx.checkpoints.latest_complete(world, clock.now) if ctx.checkpoints is not None else None
        if ckpt is None:
            raise ScenarioFailure(f"no replica and no checkpoint to recover step {failure_step}")
        dead = sorted(dead)
        if len(self.spares) < len(dead):
            raise ScenarioFailure(f"{len(dead)} node(s) to recreate, {len(self.spares)} spare(s) left")
        replacements = list(zip(dead, self.spares))
        all_replacements.extend(replacements)
        for old, new in replacements:
            self.spares.remove(new)
            self.rt = replace_node(self.rt, old, new)
        self.dead_nodes.clear()
        self.restore_pending.clear()
        nodes = self.rt.nodes()
        recreated[0] += len(nodes)
        yield Timeout(max(container_start_ticks(ctx.seed, n, t.container_start_mean, t.container_start_sd)
                          for n in nodes))
        yield Timeout(t.agent_ticks)
        store = self.store
        store.connected.clear()
        yield from store.establish(world, 1, t.store_connection_ticks)
        epoch = next(self._epoch)
        joins = set()
        for r in range(world):
            prev = self.workers.get(r)
            inc = prev.incarnation + 1 if prev is not None else 1
            node = self.rt.node_of(r)
            self.registry.move(r, node, inc, clock.now)
            self.workers[r] = self.worker_factory(r, node, inc)
            joins.add((r, inc))
        for old, new in replacements:
            ctx.observer.on_node_recreated(old, new)
        self._hangs.clear()
        stall = t.hang_timeout
        yield from self._wait(lambda: joins <= self._joined, abort=True, stall=stall)
        everyone = list(range(world))
        self._rank_info.clear()
        self._broadcast(everyone, Action.RESET, epoch, RanktableMode.NEGOTIATE.value)
        yield from self._negotiate(everyone, stall)
        yield from self._await_acks(epoch, Action.RESET, everyone, stall=stall)
        group = yield from form_group(everyone, self.rt, clock, "ring", t.link_ticks, t.allreduce_ticks)
        self._broadcast(everyone, Action.LOAD_CHECKPOINT, epoch, ckpt)
        yield from self._await_acks(epoch, Action.LOAD_CHECKPOINT, everyone, stall=stall)
        self._broadcast(everyone, Action.ROLLBACK, epoch, ckpt)
        acks = yield from self._await_acks(epoch, Action.ROLLBACK, everyone, stall=stall)
        self._check_replicas(acks)
        self.publish_ranktable(self.rt)
        continued_at = yield from self._resume_all(epoch, ckpt, group)
        return ckpt, continued_at
