"""Scenario and fault descriptions, and their JSON form.

A scenario file is one JSON object whose keys mirror :class:`Scenario`.
Unknown keys are rejected so typos surface as configuration errors::

    {
      "scenario_id": "dp4-fb",
      "seed": 7,
      "topo": {"dp": 4, "tp": 1, "pp": 1, "zero": 1},
      "n_nodes": 4,
      "devices_per_node": 1,
      "horizon_steps": 20,
      "mode": "flash",
      "checkpoint_interval_t": 0,
      "faults": [{"at_step": 10, "phase": "ForwardBackward", "target_node": "node-2"}],
      "clock_mode": "simulated",
      "store_parallelism_p": 16,
      "ranktable_mode": "shared_file",
      "timings": {"hang_timeout": 60}
    }
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Union

from ..config import Timings
from ..failures import FailureClass
from ..protocol import Mode, RanktableMode
from ..transport import ClockMode

RANDOM = "Random"
REPLACEMENT = "replacement"
SAMPLED = "SampledFromTaxonomy"


log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class FaultPhase(str, enum.Enum):
    FORWARD_BACKWARD = "ForwardBackward"
    OPTIMIZER = "Optimizer"
    RANDOM = "Random"


@dataclass(frozen=True)
class FaultSpec:
    at_step: int
    phase: FaultPhase = FaultPhase.FORWARD_BACKWARD
    target_node: str = RANDOM  # node id, "Random", or "replacement" (the next recreated node)
    failure_class: str = SAMPLED
    silent: bool = False  # whole node lost, plugin included: only heartbeats can tell
    offset: Union[float, str] = 0  # ticks into the phase, or "Random"

    def __post_init__(self) -> None:
        object.__setattr__(self, "phase", FaultPhase(self.phase))
        if self.at_step < 0:
            raise ConfigError("fault at_step must be non-negative")
        if self.failure_class != SAMPLED:
            try:
                FailureClass(self.failure_class)
            except ValueError:
                raise ConfigError(f"unknown failure_class {self.failure_class!r}") from None
        if isinstance(self.offset, str):
            if self.offset != RANDOM:
                raise ConfigError(f"offset must be a number or {RANDOM!r}")
        elif self.offset < 0:
            raise ConfigError("fault offset must be non-negative")


@dataclass(frozen=True)
class Scenario:
    seed: int = 0
    topo: tuple[int, int, int, int] = (4, 1, 1, 1)  # dp, tp, pp, zero
    n_nodes: int = 4
    devices_per_node: int = 1
    horizon_steps: int = 20
    mode: Mode = Mode.FLASH
    checkpoint_interval_t: int = 0
    faults: tuple[FaultSpec, ...] = ()
    clock_mode: ClockMode = ClockMode.SIMULATED
    store_parallelism_p: int = 16
    ranktable_mode: RanktableMode = RanktableMode.SHARED_FILE
    scenario_id: str = "scenario"
    spare_nodes: int = 4
    timings: Timings = field(default_factory=Timings)
    param_len: int = 64
    batch_size: int = 4
    lr: float = 0.05
    momentum: float = 0.9
    tick_seconds: float = 0.01  # real clock only
    max_ticks: Optional[int] = None
    record_events: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "clock_mode", ClockMode(self.clock_mode))
        object.__setattr__(self, "ranktable_mode", RanktableMode(self.ranktable_mode))
        object.__setattr__(self, "topo", tuple(self.topo))
        object.__setattr__(self, "faults", tuple(self.faults))
        self.validate()

    @property
    def world_size(self) -> int:
        dp, tp, pp, zero = self.topo
        return dp * tp * pp * zero

    def validate(self) -> None:
        if len(self.topo) != 4 or any(d < 1 for d in self.topo):
            raise ConfigError("topo needs four positive degrees (dp, tp, pp, zero)")
        if self.devices_per_node < 1 or self.n_nodes < 1:
            raise ConfigError("n_nodes and devices_per_node must be positive")
        if self.n_nodes * self.devices_per_node != self.world_size:
            raise ConfigError(f"n_nodes*devices_per_node = {self.n_nodes * self.devices_per_node} "
                              f"but the topology has {self.world_size} ranks")
        if self.horizon_steps < 1:
            raise ConfigError("horizon_steps must be positive")
        if self.checkpoint_interval_t < 0:
            raise ConfigError("checkpoint_interval_t must be non-negative")
        if self.mode is Mode.CHECKPOINT and self.checkpoint_interval_t < 1:
            raise ConfigError("checkpoint mode needs checkpoint_interval_t >= 1")
        if self.store_parallelism_p < 1:
            raise ConfigError("store_parallelism_p must be positive")
        if self.spare_nodes < 0:
            raise ConfigError("spare_nodes must be non-negative")
        if self.param_len < self.world_size // self.topo[0]:
            raise ConfigError("param_len must cover one coordinate per shard")
        t = self.timings
        if self.mode is Mode.FLASH and t.miss_threshold * t.heartbeat_period <= t.heartbeat_period + t.latency:
            log.warning("heartbeat window %d <= period + latency %d: healthy ranks will be reported missing",
                        t.miss_threshold * t.heartbeat_period, t.heartbeat_period + t.latency)
        for f in self.faults:
            if f.at_step >= self.horizon_steps:
                raise ConfigError(f"fault at step {f.at_step} is beyond the horizon {self.horizon_steps}")
            if f.target_node not in (RANDOM, REPLACEMENT):
                node = _node_index(f.target_node)
                if node is None or node >= self.n_nodes:
                    raise ConfigError(f"unknown target node {f.target_node!r}")

    def with_size(self, n_devices: int) -> "Scenario":
        """Same scenario scaled to ``n_devices`` by growing the DP degree."""
        dp, tp, pp, zero = self.topo
        per_replica = tp * pp * zero
        if n_devices % per_replica or n_devices % self.devices_per_node:
            raise ConfigError(f"{n_devices} devices do not fit replicas of {per_replica} "
                              f"on nodes of {self.devices_per_node}")
        return replace(self, topo=(n_devices // per_replica, tp, pp, zero),
                       n_nodes=n_devices // self.devices_per_node)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "topo":
                value = dict(zip(("dp", "tp", "pp", "zero"), value))
            elif f.name == "faults":
                value = [_fault_dict(x) for x in value]
            elif f.name == "timings":
                value = value.to_dict()
            elif isinstance(value, enum.Enum):
                value = value.value
            out[f.name] = value
        return out


def _node_index(node_id: str) -> Optional[int]:
    prefix, _, idx = node_id.rpartition("-")
    if prefix != "node" or not idx.isdigit():
        return None
    return int(idx)


def _fault_dict(f: FaultSpec) -> dict[str, Any]:
    d = asdict(f)
    d["phase"] = f.phase.value
    return d


def scenario_from_dict(data: dict[str, Any]) -> Scenario:
    if not isinstance(data, dict):
        raise ConfigError("scenario must be a JSON object")
    known = {f.name for f in fields(Scenario)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
    data = dict(data)
    try:
        topo = data.get("topo", {"dp": 4})
        if isinstance(topo, dict):
            extra = set(topo) - {"dp", "tp", "pp", "zero"}
            if extra:
                raise ConfigError(f"unknown topo fields: {sorted(extra)}")
            data["topo"] = (topo.get("dp", 1), topo.get("tp", 1), topo.get("pp", 1), topo.get("zero", 1))
        faults = []
        for raw in data.get("faults", []):
            faults.append(FaultSpec(**raw))
        data["faults"] = tuple(faults)
        if "timings" in data:
            data["timings"] = Timings.from_dict(data["timings"])
        return Scenario(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None


def load_scenario(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from None
    return scenario_from_dict(data)


def dump_scenario(sc: Scenario) -> str:
    return json.dumps(sc.to_dict(), indent=2)
