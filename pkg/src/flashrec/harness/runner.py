"""Scenario execution, fault injection and metric collection."""

from __future__ import annotations

import csv
import io
import logging
import random
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..controller import Controller, RecoveryReport, StopDecision
from ..failures import FailureClass, category_of, sample_failure
from ..protocol import IN_OPTIMIZER, Mode, Observer, Phase, RuntimeContext
from ..topology import build_ranktable, build_topology, write_ranktable_file
from ..transport import Cluster, ClockMode, CommGroup, EventLog, RealClock, SimClock, ring_links
from ..worker import (
    Checkpoint,
    CheckpointStore,
    DevicePlugin,
    Status,
    Worker,
    Workload,
    loss_digest,
    reference_run,
)
from .scenario import RANDOM, REPLACEMENT, SAMPLED, FaultPhase, FaultSpec, Scenario

log = logging.getLogger(__name__)

CSV_COLUMNS = ("scenario_id", "n_devices", "failure_step", "failure_phase", "failure_class", "detection_ticks",
               "restart_ticks", "redone_steps", "total_ticks", "mode", "loss_digest")


@dataclass(frozen=True)
class InjectedFault:
    spec: FaultSpec
    at: float
    node_id: str
    step: int
    phase: Phase
    failure_class: FailureClass
    category: str


@dataclass(frozen=True)
class MetricsRow:
    scenario_id: str
    n_devices: int
    failure_step: Optional[int]
    failure_phase: str
    failure_class: str
    detection_ticks: float
    restart_ticks: float
    redone_steps: int
    total_ticks: float
    mode: str
    loss_digest: str

    def values(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in CSV_COLUMNS]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return str(int(v)) if v.is_integer() else repr(round(v, 6))
    return str(v)


@dataclass
class ScenarioResult:
    scenario: Scenario
    exit_status: int
    rows: list[MetricsRow]
    reports: list[RecoveryReport]
    injected: list[InjectedFault]
    losses: list[Optional[float]]
    loss_log: list[tuple[float, int, int, float]]
    loss_conflicts: list[tuple[int, float, float]]
    stop_decisions: list[tuple[int, dict[int, int], StopDecision]]
    final_digests: dict[int, str]
    checkpoint_steps: list[int]
    checkpoint_stall_ticks: float
    recreated_containers: int
    ranktable_messages: int
    ranktable_publishes: int
    worker_violations: list[tuple[int, str]]
    end_tick: float
    event_log: str
    failure_reason: Optional[str] = None
    # (tick, sorted tags) wherever running ranks held two step values and nobody was mid-optimizer
    tag_anomalies: list[tuple[float, tuple[int, ...]]] = field(default_factory=list)

    @property
    def loss_digest(self) -> str:
        return loss_digest(x if x is not None else float("nan") for x in self.losses)

    @property
    def csv(self) -> str:
        return rows_to_csv(self.rows)


def rows_to_csv(rows: list[MetricsRow], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(CSV_COLUMNS)
    for row in rows:
        w.writerow(row.values())
    return buf.getvalue()


class _Recorder(Observer):
    """Collects training telemetry and fires scheduled faults."""

    def __init__(self, horizon: int):
        self.losses: list[Optional[float]] = [None] * horizon
        self.loss_log: list[tuple[float, int, int, float]] = []
        self.conflicts: list[tuple[int, float, float]] = []
        self.decisions: list = []
        self.checkpoint_steps: set[int] = set()
        self.injector: Optional[FaultInjector] = None
        self.clock = None
        self.audit_workers: Optional[dict] = None  # rank -> Worker, when tag auditing is on
        self.tag_anomalies: list[tuple[float, tuple[int, ...]]] = []

    def on_phase(self, rank, node_id, step, phase):
        if self.injector is not None:
            self.injector.on_phase(rank, node_id, step, phase)

    def on_loss(self, rank, step, loss):
        self.loss_log.append((self.clock.now, rank, step, loss))
        prev = self.losses[step]
        if prev is not None and prev != loss:
            self.conflicts.append((step, prev, loss))
        self.losses[step] = loss

    def on_tag(self, rank, tag):
        if self.audit_workers is None:
            return
        tags = {w.tag for w in self.audit_workers.values() if w.alive and w.status is Status.RUNNING}
        if IN_OPTIMIZER not in tags and len(tags) > 1:
            self.tag_anomalies.append((self.clock.now, tuple(sorted(tags))))

    def on_stop_decision(self, failure_step, tags, decision):
        self.decisions.append((failure_step, dict(tags), decision))

    def on_node_recreated(self, old_node, new_node):
        if self.injector is not None:
            self.injector.on_node_recreated(old_node, new_node)

    def on_checkpoint(self, rank, step):
        self.checkpoint_steps.add(step)


class FaultInjector:
    """Kills nodes when the scheduled (step, phase) is reached."""

    def __init__(self, sc: Scenario, ctx: RuntimeContext, controller: Controller,
                 plugins: dict[str, DevicePlugin]):
        self.sc = sc
        self.ctx = ctx
        self.controller = controller
        self.plugins = plugins
        self.rng = random.Random(f"faults:{sc.seed}")
        self.injected: list[InjectedFault] = []
        self._armed: list[tuple[FaultSpec, int, FaultPhase, float, FailureClass]] = []
        self._replacement: list[FaultSpec] = []
        t = ctx.timings
        dpn = sc.devices_per_node
        for spec in sc.faults:
            if spec.target_node == REPLACEMENT:
                self._replacement.append(spec)
                continue
            node_idx = self.rng.randrange(sc.n_nodes) if spec.target_node == RANDOM else int(spec.target_node.rpartition("-")[2])
            watch_rank = node_idx * dpn  # follow the rank, since the node may be renamed by a recovery
            phase = spec.phase
            if phase is FaultPhase.RANDOM:
                span = t.fb_ticks + t.allreduce_ticks + t.optimizer_ticks
                offset = self.rng.uniform(0, span) if spec.offset == RANDOM else float(spec.offset)
                phase = FaultPhase.FORWARD_BACKWARD
            elif spec.offset == RANDOM:
                span = t.fb_ticks if phase is FaultPhase.FORWARD_BACKWARD else t.optimizer_ticks
                offset = self.rng.uniform(0, span)
            else:
                offset = float(spec.offset)
            cls = self._draw_class(spec)
            self._armed.append((spec, watch_rank, phase, offset, cls))

    def _draw_class(self, spec: FaultSpec) -> FailureClass:
        if spec.failure_class == SAMPLED:
            return sample_failure(self.rng)[1]
        return FailureClass(spec.failure_class)

    def on_phase(self, rank: int, node_id: str, step: int, phase: Phase) -> None:
        want = FaultPhase.FORWARD_BACKWARD if phase is Phase.FORWARD_BACKWARD else FaultPhase.OPTIMIZER
        for item in list(self._armed):
            spec, watch_rank, fphase, offset, cls = item
            if rank == watch_rank and step == spec.at_step and fphase is want:
                self._armed.remove(item)
                self.ctx.clock.call_later(offset, lambda s=spec, r=rank, c=cls: self._fire(s, r, c))

    def on_node_recreated(self, old_node: str, new_node: str) -> None:
        if not self._replacement:
            return
        spec = self._replacement.pop(0)
        offset = self.rng.uniform(0, 5) if spec.offset == RANDOM else float(spec.offset)
        cls = self._draw_class(spec)
        rank = self.controller.rt.ranks_on(new_node)[0]
        self.ctx.clock.call_later(offset, lambda: self._fire(spec, rank, cls))

    def _fire(self, spec: FaultSpec, rank: int, cls: FailureClass) -> None:
        workers = self.controller.workers
        node = workers[rank].node_id
        victims = [w for w in workers.values() if w.node_id == node and w.alive]
        if not victims:
            log.warning("fault target %s already dead; ignoring", node)
            return
        first = min(victims, key=lambda w: w.rank)
        phase = Phase.OPTIMIZER if first.phase is Phase.OPTIMIZER else Phase.FORWARD_BACKWARD
        step = first.last_step
        for w in victims:
            if w.group is not None:
                w.group.mark_dead(w.rank)
            w.kill()
        self.injected.append(InjectedFault(spec, self.ctx.clock.now, node, step, phase, cls, category_of(cls)))
        self.ctx.cluster.log("fault", None, None, f"{node}:{cls.value}")
        plugin = self.plugins.get(node)
        if plugin is None:
            return
        if spec.silent:
            self.ctx.cluster.deregister(plugin.ep)
        elif self.ctx.mode is Mode.FLASH:
            plugin.inject(first.rank % self.sc.devices_per_node, cls)


def build_context(sc: Scenario, ranktable_path: Optional[Path], event_log: Optional[EventLog] = None):
    clock = SimClock() if sc.clock_mode is ClockMode.SIMULATED else RealClock(sc.tick_seconds)
    t = sc.timings
    cluster = Cluster(clock, latency=t.latency, event_log=event_log)
    dp, tp, pp, zero = sc.topo
    topo = build_topology(dp, tp, pp, zero)
    workload = Workload(seed=sc.seed, param_len=sc.param_len, batch_size=sc.batch_size, lr=sc.lr,
                        momentum=sc.momentum)
    ctx = RuntimeContext(clock=clock, cluster=cluster, topo=topo, workload=workload, timings=t,
                         horizon=sc.horizon_steps, mode=sc.mode, devices_per_node=sc.devices_per_node,
                         checkpoint_interval=sc.checkpoint_interval_t, store_parallelism=sc.store_parallelism_p,
                         ranktable_mode=sc.ranktable_mode, ranktable_path=ranktable_path, seed=sc.seed,
                         checkpoints=CheckpointStore())
    return ctx


def run_scenario(sc: Scenario, workdir: Optional[Path] = None, audit_tags: bool = False) -> ScenarioResult:
    """Run ``sc`` to its horizon (or to an unrecoverable failure).

    ``audit_tags`` checks the step tags of all running ranks on every tag
    change (quadratic in world size, so meant for small test clusters).
    """
    if workdir is None:
        with tempfile.TemporaryDirectory(prefix="flashrec-") as tmp:
            return _run(sc, Path(tmp), audit_tags)
    return _run(sc, Path(workdir), audit_tags)


def _run(sc: Scenario, workdir: Path, audit_tags: bool = False) -> ScenarioResult:
    event_log = EventLog() if sc.record_events else None
    rt_path = workdir / "ranktable.json"
    ctx = build_context(sc, rt_path, event_log)
    clock = ctx.clock
    topo = ctx.topo
    world = topo.world_size
    recorder = _Recorder(sc.horizon_steps)
    recorder.clock = clock
    ctx.observer = recorder

    rt = build_ranktable(world, sc.devices_per_node)
    write_ranktable_file(rt_path, rt)
    spares = [f"spare-{k}" for k in range(sc.spare_nodes)]
    controller = Controller(ctx, rt, spares)
    plugins: dict[str, DevicePlugin] = {}

    def add_plugin(node: str) -> None:
        if ctx.mode is Mode.FLASH and node not in plugins:
            plugins[node] = DevicePlugin(ctx, node, sc.devices_per_node)

    def make_worker(rank: int, node: str, incarnation: int) -> Worker:
        add_plugin(node)
        return Worker(ctx, rank, node, status=Status.IDLE, incarnation=incarnation).start()

    controller.worker_factory = make_worker
    if sc.checkpoint_interval_t:
        # launch checkpoint: the initial weights are on persistent storage before step 0
        for r in range(world):
            sl = ctx.workload.shard_slice(topo, topo.shard_of(r))
            init = ctx.workload.initial_state(sl.stop - sl.start)
            ctx.checkpoints.put(r, Checkpoint(init.to_bytes(), 0, 0, 0, 0))
    for node in rt.nodes():
        add_plugin(node)
    group = CommGroup(clock, list(range(world)), ring_links(list(range(world))), 0, 0, ctx.timings.allreduce_ticks)
    workers = {r: Worker(ctx, r, rt.node_of(r), group=group) for r in range(world)}
    controller.attach(workers)
    if audit_tags:
        recorder.audit_workers = controller.workers
    injector = FaultInjector(sc, ctx, controller, plugins)
    recorder.injector = injector
    controller.start()
    for w in workers.values():
        w.start()

    controller.done.add_callback(lambda _e: clock.stop())
    limit = sc.max_ticks
    if limit is None:
        t = ctx.timings
        limit = 50 * (sc.horizon_steps * (t.step_ticks + t.k0_ticks) + (len(sc.faults) + 1) *
                      (t.hang_timeout + t.container_start_mean + 10 * t.container_start_sd + 4 * world + 200))
    clock.run(until=limit)
    if controller.exit_status is None:
        raise RuntimeError(f"scenario {sc.scenario_id} did not finish within {limit} ticks")
    for w in list(controller.workers.values()):
        w.kill()

    final = {r: w.state.digest() for r, w in controller.workers.items()}
    violations = [(r, v) for r, w in controller.workers.items() for v in w.violations]
    result = ScenarioResult(
        scenario=sc, exit_status=controller.exit_status, rows=[], reports=list(controller.reports),
        injected=list(injector.injected), losses=list(recorder.losses), loss_log=recorder.loss_log,
        loss_conflicts=recorder.conflicts, stop_decisions=recorder.decisions, final_digests=final,
        checkpoint_steps=sorted(recorder.checkpoint_steps),
        checkpoint_stall_ticks=len(recorder.checkpoint_steps) * ctx.timings.k0_ticks,
        recreated_containers=sum(r.recreated_containers for r in controller.reports),
        ranktable_messages=sum(r.ranktable_messages for r in controller.reports),
        ranktable_publishes=controller.ranktable_publishes, worker_violations=violations,
        end_tick=clock.now, event_log=event_log.text() if event_log else "", failure_reason=controller.failure_reason,
        tag_anomalies=recorder.tag_anomalies)
    result.rows = metrics_rows(result)
    return result


def metrics_rows(res: ScenarioResult) -> list[MetricsRow]:
    """One row per recovery plus a summary row."""
    sc = res.scenario
    step_ticks = sc.timings.step_ticks
    digest = res.loss_digest if res.exit_status == 0 else ""
    rows = []
    pending = list(res.injected)
    for rep in res.reports:
        mine = [f for f in pending if f.at <= rep.continued_at]
        pending = [f for f in pending if f.at > rep.continued_at]
        if mine:
            first = mine[0]
            fault_at, step, phase, cls = first.at, first.step, first.phase.value, first.failure_class.value
        else:
            fault_at, step, phase, cls = rep.detected_at, rep.failure_step, "", ""
        detection = rep.detected_at - fault_at
        redone = (step + 1) - rep.resume_step
        rows.append(MetricsRow(sc.scenario_id, sc.world_size, step, phase, cls, detection, rep.restart_ticks,
                               redone, detection + rep.restart_ticks + redone * step_ticks, rep.mode, digest))
    rows.append(MetricsRow(sc.scenario_id, sc.world_size, None, "summary", "",
                           sum(r.detection_ticks for r in rows), sum(r.restart_ticks for r in rows),
                           sum(r.redone_steps for r in rows), sum(r.total_ticks for r in rows), sc.mode.value,
                           digest))
    return rows


def reference_losses(sc: Scenario) -> list[float]:
    """Failure-free loss trajectory for ``sc``'s seed and topology."""
    dp, tp, pp, zero = sc.topo
    topo = build_topology(dp, tp, pp, zero)
    wl = Workload(seed=sc.seed, param_len=sc.param_len, batch_size=sc.batch_size, lr=sc.lr, momentum=sc.momentum)
    losses, _ = reference_run(wl, topo, sc.horizon_steps)
    return losses
