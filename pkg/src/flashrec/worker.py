"""Training processes, their monitoring agents, checkpoints and the device plugin.

The workload is a coordinate-separable linear regression trained with SGD and
momentum.  Each coordinate is its own regression head, so any contiguous
sharding of the parameter vector trains independently and a shard's update
only needs the data-parallel sum of its own gradient.  Batches come from a
counter-based generator keyed on ``(seed, step, dp_rank)``; any step's batch
can be regenerated without storing data.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import struct
from collections import deque
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional

import numpy as np

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
    STATE_REQUEST,
    Ack,
    Action,
    Control,
    HeartbeatRecord,
    Phase,
    RanktableMode,
    RuntimeContext,
    TrainStepPhase,
)
from .topology import ParallelTopology, RankTable, ShardId, parse_ranktable
from .failures import FailureClass, category_of
from .transport import (
    CollectiveTimeout,
    DeliveryFailure,
    Event,
    Interrupt,
    RestoreError,
    Timeout,
    Wait,
    all_reduce_sum,
    barrier,
    copy_state,
    serve_state,
)

log = logging.getLogger(__name__)


class StopSignal(Interrupt):
    """Delivered to a training process when the controller orders a stop."""


class Superseded(Interrupt):
    """A control from a newer recovery plan replaces the one being handled."""


class NoCheckpoint(LookupError):
    pass


class WorkerProtocolError(RuntimeError):
    pass


@dataclass(eq=False)
class ModelState:
    params: np.ndarray
    optimizer_momentum: np.ndarray
    step: int
    rng_cursor: int

    def to_bytes(self) -> bytes:
        """Little-endian: step, params, momentum, rng_cursor."""
        return (struct.pack("<q", self.step)
                + np.ascontiguousarray(self.params, dtype="<f8").tobytes()
                + np.ascontiguousarray(self.optimizer_momentum, dtype="<f8").tobytes()
                + struct.pack("<q", self.rng_cursor))

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelState":
        body = len(data) - 16
        if body < 0 or body % 16:
            raise ValueError(f"bad ModelState payload of {len(data)} bytes")
        n = body // 16
        (step,) = struct.unpack_from("<q", data, 0)
        params = np.frombuffer(data, dtype="<f8", count=n, offset=8).astype(np.float64)
        momentum = np.frombuffer(data, dtype="<f8", count=n, offset=8 + 8 * n).astype(np.float64)
        (cursor,) = struct.unpack_from("<q", data, 8 + 16 * n)
        return cls(params, momentum, step, cursor)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def copy(self) -> "ModelState":
        return ModelState(self.params.copy(), self.optimizer_momentum.copy(), self.step, self.rng_cursor)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ModelState) and self.to_bytes() == other.to_bytes()


@lru_cache(maxsize=64)
def _target_weights(seed: int, param_len: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=seed & 0xFFFFFFFFFFFFFFFF, counter=[0, 0, 0, 1 << 63]))
    w = rng.normal(0.0, 1.0, param_len)
    w.setflags(write=False)
    return w


@dataclass(frozen=True)
class Batch:
    step: int
    dp_rank: int
    features: np.ndarray  # (batch_size, param_len)
    targets: np.ndarray  # (batch_size, param_len)


@dataclass(frozen=True)
class Workload:
    seed: int = 0
    param_len: int = 64
    batch_size: int = 4
    lr: float = 0.05
    momentum: float = 0.9
    noise: float = 0.01

    def shard_slice(self, topo: ParallelTopology, shard: ShardId) -> slice:
        n = topo.num_shards
        if self.param_len < n:
            raise ValueError(f"param_len {self.param_len} smaller than {n} shards")
        i = topo.shard_index(shard)
        base, extra = divmod(self.param_len, n)
        lo = i * base + min(i, extra)
        return slice(lo, lo + base + (1 if i < extra else 0))

    def batch(self, step: int, dp_rank: int) -> Batch:
        counter = [0, 0, dp_rank, step]
        rng = np.random.Generator(np.random.Philox(key=self.seed & 0xFFFFFFFFFFFFFFFF, counter=counter))
        x = rng.normal(0.0, 1.0, (self.batch_size, self.param_len))
        eps = rng.normal(0.0, self.noise, (self.batch_size, self.param_len))
        y = x * _target_weights(self.seed, self.param_len) + eps
        return Batch(step, dp_rank, x, y)

    def batch_at_cursor(self, cursor: int, dp_rank: int) -> Batch:
        if cursor % self.batch_size:
            raise ValueError(f"cursor {cursor} is not on a batch boundary")
        return self.batch(cursor // self.batch_size, dp_rank)

    def initial_state(self, size: Optional[int] = None) -> ModelState:
        n = self.param_len if size is None else size
        return ModelState(np.zeros(n), np.zeros(n), 0, 0)


def local_gradient(params: np.ndarray, batch: Batch, sl: slice) -> tuple[np.ndarray, float]:
    """Gradient and summed loss of the heads in ``sl``."""
    x = batch.features[:, sl]
    resid = x * params - batch.targets[:, sl]
    b = batch.features.shape[0]
    grad = (x * resid).sum(axis=0) / b
    loss = 0.5 * float((resid * resid).sum()) / b
    return grad, loss


def apply_update(state: ModelState, grad: np.ndarray, workload: Workload) -> ModelState:
    momentum = workload.momentum * state.optimizer_momentum + grad
    params = state.params - workload.lr * momentum
    return ModelState(params, momentum, state.step + 1, state.rng_cursor + workload.batch_size)


def train_step(state: ModelState, batch: Batch, workload: Workload) -> tuple[ModelState, float]:
    """Single-replica step over the full parameter vector; returns (state, loss)."""
    if batch.step != state.rng_cursor // workload.batch_size:
        raise ValueError(f"batch for step {batch.step} does not match cursor {state.rng_cursor}")
    grad, loss = local_gradient(state.params, batch, slice(None))
    return apply_update(state, grad, workload), loss


def contribution_vector(workload: Workload, sl: slice, grad: np.ndarray, loss: float) -> np.ndarray:
    """All-reduce payload: the shard's gradient in place, loss in the trailing slot."""
    vec = np.zeros(workload.param_len + 1)
    vec[sl] = grad
    vec[-1] = loss
    return vec


def rollback_iterator(state: ModelState, resume_step: int, batch_size: int) -> ModelState:
    if resume_step < 0 or resume_step > state.step:
        raise ValueError(f"cannot roll iterator to step {resume_step} from state at step {state.step}")
    return replace(state, rng_cursor=resume_step * batch_size)


def loss_digest(losses) -> str:
    return hashlib.sha256(np.asarray(list(losses), dtype="<f8").tobytes()).hexdigest()


def reference_run(workload: Workload, topo: ParallelTopology, horizon: int):
    """Failure-free training computed sequentially, with the same member-order sums.

    Returns ``(losses, states)`` where ``states[s][shard]`` is the shard state
    after ``s`` steps.
    """
    shards = topo.shards()
    slices = {s: workload.shard_slice(topo, s) for s in shards}
    states = {s: workload.initial_state(slices[s].stop - slices[s].start) for s in shards}
    history = [dict(states)]
    losses = []
    for step in range(horizon):
        batches = [workload.batch(step, d) for d in range(topo.dp_degree)]
        acc = np.zeros(workload.param_len + 1)
        for rank in range(topo.world_size):
            shard = topo.shard_of(rank)
            grad, loss = local_gradient(states[shard].params, batches[topo.dp_index(rank)], slices[shard])
            acc = acc + contribution_vector(workload, slices[shard], grad, loss)
        for s in shards:
            states[s] = apply_update(states[s], acc[slices[s]] / topo.dp_degree, workload)
        losses.append(float(acc[-1] / topo.dp_degree))
        history.append(dict(states))
    return losses, history


# ---------------------------------------------------------------------------
# checkpoints


class Tier(str, enum.Enum):
    HOST_MEMORY = "host_memory"
    PERSISTENT = "persistent"


@dataclass(frozen=True)
class Checkpoint:
    state: bytes
    snapshot_cost: float
    persist_cost: float
    saved_at_step: int
    durable_at: float

    def __post_init__(self) -> None:
        if ModelState.from_bytes(self.state).step != self.saved_at_step:
            raise ValueError("saved_at_step must equal the state's step")


def save_checkpoint(state: ModelState, tier: Tier, clock, k0: float, k1: float):
    """Generator: snapshot ``state``.

    Host-memory snapshots stall the caller for ``k0`` ticks; persisting
    overlaps with training and is durable ``k1`` ticks later.
    """
    if tier is Tier.HOST_MEMORY:
        if k0:
            yield Timeout(k0)
        return Checkpoint(state.to_bytes(), k0, k1, state.step, clock.now)
    return Checkpoint(state.to_bytes(), k0, k1, state.step, clock.now + k1)


def load_checkpoint(latest: Optional[Checkpoint]) -> ModelState:
    if latest is None:
        raise NoCheckpoint("no checkpoint to load")
    return ModelState.from_bytes(latest.state)


class CheckpointStore:
    """Persistent storage shared by all nodes."""

    def __init__(self) -> None:
        self._by_step: dict[int, dict[int, Checkpoint]] = {}
        self.saves = 0

    def put(self, rank: int, ckpt: Checkpoint) -> None:
        self._by_step.setdefault(ckpt.saved_at_step, {})[rank] = ckpt
        self.saves += 1

    def latest_complete(self, world_size: int, now: float) -> Optional[int]:
        for step in sorted(self._by_step, reverse=True):
            saved = self._by_step[step]
            if len(saved) == world_size and all(c.durable_at <= now for c in saved.values()):
                return step
        return None

    def get(self, rank: int, step: int) -> Optional[Checkpoint]:
        return self._by_step.get(step, {}).get(rank)


# ---------------------------------------------------------------------------
# device plugin


@dataclass(frozen=True)
class PluginReport:
    node_id: str
    devices: dict[int, str]  # device -> "ok" or failure class
    sent_at: float

    @property
    def faulty_devices(self) -> list[int]:
        return sorted(d for d, s in self.devices.items() if s != "ok")


class DevicePlugin:
    """Per-node agent that reports device health to the controller."""

    def __init__(self, ctx: RuntimeContext, node_id: str, devices: int):
        self.ctx = ctx
        self.node_id = node_id
        self.devices = devices
        self.faults: dict[int, FailureClass] = {}
        self.ep = ctx.cluster.register(node_id)

    def report(self) -> PluginReport:
        status = {d: (self.faults[d].value if d in self.faults else "ok") for d in range(self.devices)}
        return PluginReport(self.node_id, status, self.ctx.clock.now)

    def inject(self, device: int, cls: FailureClass) -> None:
        """Record a device fault and push it to the controller immediately."""
        self.faults[device] = cls
        kind = PROCESS_EXIT if category_of(cls) == "software" else PLUGIN_REPORT
        try:
            self.ctx.cluster.send(self.ep, self.ctx.controller_addr, kind, self.report())
        except DeliveryFailure:
            log.warning("controller unreachable from plugin on %s", self.node_id)


def device_plugin_report(plugin: DevicePlugin) -> PluginReport:
    return plugin.report()


# ---------------------------------------------------------------------------
# worker runtime


@lru_cache(maxsize=8)
def _parse_cached(data: bytes) -> RankTable:
    return parse_ranktable(data)


def load_ranktable(path) -> RankTable:
    """Read the shared ranktable file; identical contents are parsed once per process."""
    with open(path, "rb") as fh:
        return _parse_cached(fh.read())


class Status(str, enum.Enum):
    RUNNING = "running"
    IDLE = "idle"
    RESTORING = "restoring"
    FINISHED = "finished"


def _jitter(seed: int, rank: int, step: int, spread: int) -> int:
    if spread <= 0:
        return 0
    x = (seed * 0x9E3779B97F4A7C15 + rank * 0xBF58476D1CE4E5B9 + step * 0x94D049BB133111EB) & (2**64 - 1)
    x ^= x >> 31
    x = (x * 0xD6E8FEB86659FD93) & (2**64 - 1)
    x ^= x >> 32
    return x % (spread + 1)


class Worker:
    """One rank: a training process plus its co-resident monitoring agent."""

    def __init__(self, ctx: RuntimeContext, rank: int, node_id: str, state: Optional[ModelState] = None,
                 group=None, status: Status = Status.RUNNING, incarnation: int = 0):
        self.ctx = ctx
        self.rank = rank
        self.node_id = node_id
        self.incarnation = incarnation
        self.shard = ctx.topo.shard_of(rank)
        self.dp_rank = ctx.topo.dp_index(rank)
        self.slice = ctx.workload.shard_slice(ctx.topo, self.shard)
        if state is None:
            state = ctx.workload.initial_state(self.slice.stop - self.slice.start)
        self.state = state
        self.group = group
        self.status = status
        self.tag = state.step
        self.last_step = state.step
        self.phase = Phase.IDLE if status is not Status.RUNNING else Phase.FORWARD_BACKWARD
        self.train_phase: Optional[TrainStepPhase] = None
        self.in_flight: Optional[np.ndarray] = None
        self.ranktable_version: Optional[int] = None
        self.violations: list[str] = []
        self._reset_done = False
        self._handling: Optional[int] = None  # epoch of the control being handled
        self._controls: deque[Control] = deque()
        self._control_ready: Optional[Event] = None
        self.ep = ctx.cluster.register(node_id)
        self.trainer = None
        self.agent = None

    # -- lifecycle

    def start(self) -> "Worker":
        clock = self.ctx.clock
        self.trainer = clock.spawn(self._trainer(), f"trainer-{self.rank}.{self.incarnation}")
        self.agent = clock.spawn(self._agent(), f"agent-{self.rank}.{self.incarnation}")
        return self

    def kill(self) -> None:
        for proc in (self.trainer, self.agent):
            if proc is not None:
                proc.kill()
        self.ctx.cluster.deregister(self.ep)
        self.status = Status.IDLE

    @property
    def alive(self) -> bool:
        return self.ep.alive

    # -- messaging helpers

    def _send(self, kind: str, payload) -> None:
        try:
            self.ctx.cluster.send(self.ep, self.ctx.controller_addr, kind, payload)
        except DeliveryFailure:
            pass

    def _ack(self, ctl: Control, info=None) -> None:
        self._send(ACK, Ack(self.rank, ctl.action, ctl.epoch, info))

    def _heartbeat(self) -> None:
        self._send(HEARTBEAT, HeartbeatRecord(self.rank, self.node_id, self.tag, self.phase,
                                              self.ctx.clock.now, incarnation=self.incarnation))

    def _enter_optimizer(self) -> None:
        if self.alive:
            self._set_tag(IN_OPTIMIZER, Phase.OPTIMIZER)

    def _set_tag(self, tag: int, phase: Phase) -> None:
        changed = tag != self.tag
        self.tag = tag
        self.phase = phase
        if tag >= 0:
            self.last_step = tag
        if changed:
            self.ctx.observer.on_tag(self.rank, tag)
            if self.ctx.heartbeats_enabled:
                self._heartbeat()

    # -- monitoring agent

    def _agent(self):
        period = self.ctx.timings.heartbeat_period
        beating = self.ctx.heartbeats_enabled
        clock = self.ctx.clock
        next_beat = clock.now + period
        self._send(JOINED, (self.rank, self.incarnation))
        if beating:
            self._heartbeat()
        while True:
            timeout = max(0, next_beat - clock.now) if beating else None
            msg = yield from self.ep.recv((CONTROL, STATE_REQUEST), timeout)
            if msg is None:
                self._heartbeat()
                next_beat += period
                continue
            if msg.kind == STATE_REQUEST:
                serve_state(self.ctx.cluster, self.ep, msg.src, self.state.to_bytes(), self.ctx.timings.copy_ticks)
                continue
            ctl: Control = msg.payload
            # a newer plan pre-empts training and any half-finished control of an older plan
            busy = self._handling is not None
            if ctl.action is Action.STOP and (busy or self.status in (Status.RUNNING, Status.RESTORING)):
                self.trainer.interrupt(StopSignal(ctl.epoch))
                continue
            self._controls.append(ctl)
            if busy and ctl.epoch > self._handling:
                self.trainer.interrupt(Superseded())
            elif self._control_ready is not None:
                ev, self._control_ready = self._control_ready, None
                ev.succeed()

    def _next_control(self):
        while not self._controls:
            if self._control_ready is None:
                self._control_ready = self.ctx.clock.event()
            yield Wait(self._control_ready)
        return self._controls.popleft()

    # -- training process

    def _trainer(self):
        while True:
            try:
                if self.status is Status.RUNNING:
                    yield from self._train()
                ctl = yield from self._next_control()
                self._handling = ctl.epoch
                try:
                    yield from self._handle(ctl)
                finally:
                    self._handling = None
            except StopSignal as sig:
                self._on_stop(sig.args[0] if sig.args else 0)
            except Superseded:
                pass  # the newer control is already queued
            except CollectiveTimeout:
                # conventional path: a hung collective is the only failure signal
                self.status = Status.IDLE
                self.phase = Phase.IDLE
                self._send(HANG_REPORT, (self.rank, self.incarnation, self.state.step))

    def _train(self):
        ctx = self.ctx
        t = ctx.timings
        wl = ctx.workload
        while self.state.step < ctx.horizon:
            i = self.state.step
            self._set_tag(i, Phase.FORWARD_BACKWARD)
            self.train_phase = TrainStepPhase.FORWARD
            ctx.observer.on_phase(self.rank, self.node_id, i, Phase.FORWARD_BACKWARD)
            yield Timeout(t.fb_ticks + _jitter(ctx.seed, self.rank, i, t.jitter_ticks))
            self.train_phase = TrainStepPhase.BACKWARD
            batch = wl.batch_at_cursor(self.state.rng_cursor, self.dp_rank)
            grad, loss = local_gradient(self.state.params, batch, self.slice)
            self.in_flight = contribution_vector(wl, self.slice, grad, loss)
            self.train_phase = TrainStepPhase.GRAD_SYNC_BARRIER
            # the step is committed once the round completes, so the tag flips then
            reduced = yield from all_reduce_sum(self.group, self.rank, self.in_flight, ctx.collective_timeout,
                                                on_complete=self._enter_optimizer)
            self.in_flight = None
            self._set_tag(IN_OPTIMIZER, Phase.OPTIMIZER)
            self.train_phase = TrainStepPhase.OPTIMIZER
            ctx.observer.on_phase(self.rank, self.node_id, i, Phase.OPTIMIZER)
            yield Timeout(t.optimizer_ticks)
            dp = ctx.topo.dp_degree
            self.state = apply_update(self.state, reduced[self.slice] / dp, wl)
            self._set_tag(i + 1, Phase.FORWARD_BACKWARD)
            self.train_phase = None
            ctx.observer.on_loss(self.rank, i, float(reduced[-1] / dp))
            ctx.observer.on_state(self.rank, self.state)
            if ctx.checkpoint_interval and self.state.step % ctx.checkpoint_interval == 0:
                yield from self._checkpoint()
        # closing synchronization, so a rank lost after the last all-reduce is still noticed
        yield from barrier(self.group, self.rank, ctx.collective_timeout)
        self.status = Status.FINISHED
        self.phase = Phase.IDLE
        self._send(FINISHED, (self.rank, self.incarnation, self.state.step))

    def _checkpoint(self):
        t = self.ctx.timings
        host = yield from save_checkpoint(self.state, Tier.HOST_MEMORY, self.ctx.clock, t.k0_ticks, t.k1_ticks)
        persisted = yield from save_checkpoint(self.state, Tier.PERSISTENT, self.ctx.clock, 0, t.k1_ticks)
        assert host.state == persisted.state
        self.ctx.checkpoints.put(self.rank, persisted)
        self.ctx.observer.on_checkpoint(self.rank, self.state.step)

    def _on_stop(self, epoch: int) -> None:
        if self.phase is Phase.OPTIMIZER:
            self.violations.append(f"stopped inside optimizer at step {self.last_step}")
        self.status = Status.IDLE
        self.phase = Phase.IDLE
        self.train_phase = None
        self.in_flight = None
        self.tag = self.state.step
        self._ack(Control(Action.STOP, epoch=epoch), self.state.step)

    def _handle(self, ctl: Control):
        ctx = self.ctx
        t = ctx.timings
        action = ctl.action
        if action is Action.STOP:
            self._ack(ctl, self.state.step)
        elif action is Action.CLEAN:
            self.in_flight = None
            self.ep.drain(keep=lambda m: m.kind in (CONTROL, STATE_REQUEST))
            self._ack(ctl)
        elif action is Action.RESET:
            self.group = None
            mode = RanktableMode(ctl.arg) if ctl.arg is not None else ctx.ranktable_mode
            if mode is RanktableMode.SHARED_FILE:
                yield Timeout(t.ranktable_load_ticks)
                self.ranktable_version = load_ranktable(ctx.ranktable_path).version
            else:
                self._send(RANK_INFO, (self.rank, self.node_id, self.rank % ctx.devices_per_node))
                msg = yield from self.ep.recv(RANKTABLE)
                self.ranktable_version = msg.payload.version
            self._reset_done = True
            self._ack(ctl, self.ranktable_version)
        elif action is Action.RESTORE:
            donor_addr, resume_step = ctl.arg
            self.status = Status.RESTORING
            self.phase = Phase.RESTORING
            try:
                payload = yield from copy_state(ctx.cluster, self.ep, donor_addr, t.restore_timeout)
            except RestoreError as err:
                self._send(RESTORE_FAILED, (self.rank, str(err)))
                return
            state = ModelState.from_bytes(payload)
            if state.step != resume_step:
                raise WorkerProtocolError(f"donor state at step {state.step}, plan expects {resume_step}")
            self.state = state
            self.status = Status.IDLE
            self.phase = Phase.IDLE
            self._ack(ctl, state.digest())
        elif action is Action.LOAD_CHECKPOINT:
            yield Timeout(t.checkpoint_load_ticks)
            self.state = load_checkpoint(ctx.checkpoints.get(self.rank, ctl.arg))
            self._ack(ctl, self.state.step)
        elif action is Action.ROLLBACK:
            self.state = rollback_iterator(self.state, ctl.arg, ctx.workload.batch_size)
            self.tag = self.last_step = self.state.step
            self._ack(ctl, (self.state.rng_cursor, self.state.digest()))
        elif action is Action.CONTINUE:
            if not self._reset_done:
                self.violations.append("continue before reset")
                self._ack(ctl, "protocol_error")
                return
            self._reset_done = False
            self.group = ctl.arg
            self.status = Status.RUNNING
            self._ack(ctl)
        else:
            raise WorkerProtocolError(f"unsupported action {action}")
