"""Message vocabulary and shared runtime context for workers and the controller."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Optional

from .config import Timings
from .topology import ParallelTopology
from .transport import Clock, Cluster

if TYPE_CHECKING:
    from .worker import CheckpointStore, Workload

IN_OPTIMIZER = -1  # step tag while the optimizer runs


class Phase(str, enum.Enum):
    FORWARD_BACKWARD = "forward_backward"
    OPTIMIZER = "optimizer"
    RESTORING = "restoring"
    IDLE = "idle"


class TrainStepPhase(str, enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    GRAD_SYNC_BARRIER = "grad_sync_barrier"
    OPTIMIZER = "optimizer"


class Health(str, enum.Enum):
    OK = "ok"
    DEGRADED = "degraded"


class Action(str, enum.Enum):
    STOP = "stop"
    CLEAN = "clean"
    RESET = "reset"
    RECREATE = "recreate"
    RESTORE = "restore"
    LOAD_CHECKPOINT = "load_checkpoint"
    ROLLBACK = "rollback"
    CONTINUE = "continue"


class Mode(str, enum.Enum):
    FLASH = "flash"
    CHECKPOINT = "checkpoint"


class RanktableMode(str, enum.Enum):
    SHARED_FILE = "shared_file"
    NEGOTIATE = "negotiate"


# message kinds
HEARTBEAT = "heartbeat"
PLUGIN_REPORT = "plugin_report"
PROCESS_EXIT = "process_exit"
CONTROL = "control"
ACK = "ack"
JOINED = "joined"
FINISHED = "finished"
HANG_REPORT = "hang_report"
RESTORE_FAILED = "restore_failed"
RANK_INFO = "rank_info"
RANKTABLE = "ranktable"
STATE_REQUEST = "state_request"
STATE_REPLY = "state_reply"

RANKTABLE_KINDS = (RANK_INFO, RANKTABLE)


@dataclass(frozen=True)
class HeartbeatRecord:
    rank: int
    node_id: str
    step_tag: int
    phase: Phase
    sent_at: float
    health: Health = Health.OK
    incarnation: int = 0


@dataclass(frozen=True)
class Control:
    action: Action
    arg: Any = None
    epoch: int = 0


@dataclass(frozen=True)
class Ack:
    rank: int
    action: Action
    epoch: int
    info: Any = None


class Observer:
    """Instrumentation hooks; the harness overrides these.  Never used for control flow."""

    def on_phase(self, rank: int, node_id: str, step: int, phase: Phase) -> None:
        pass

    def on_loss(self, rank: int, step: int, loss: float) -> None:
        pass

    def on_state(self, rank: int, state) -> None:
        pass

    def on_tag(self, rank: int, tag: int) -> None:
        pass

    def on_stop_decision(self, failure_step: int, tags: dict[int, int], decision) -> None:
        pass

    def on_node_recreated(self, old_node: str, new_node: str) -> None:
        pass

    def on_checkpoint(self, rank: int, step: int) -> None:
        pass


@dataclass
class RuntimeContext:
    clock: Clock
    cluster: Cluster
    topo: ParallelTopology
    workload: "Workload"
    timings: Timings
    horizon: int
    mode: Mode = Mode.FLASH
    devices_per_node: int = 1
    checkpoint_interval: int = 0
    store_parallelism: int = 16
    ranktable_mode: RanktableMode = RanktableMode.SHARED_FILE
    ranktable_path: Optional[Path] = None
    seed: int = 0
    observer: Observer = field(default_factory=Observer)
    checkpoints: Optional["CheckpointStore"] = None
    controller_addr: Optional[tuple[str, int]] = None

    @property
    def heartbeats_enabled(self) -> bool:
        return self.mode is Mode.FLASH

    @property
    def collective_timeout(self) -> Optional[float]:
        # conventional jobs only notice a dead peer when the collective times out
        return self.timings.hang_timeout if self.mode is Mode.CHECKPOINT else None
