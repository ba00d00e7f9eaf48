"""Scale sweeps: the same single-node fault at several cluster sizes."""

from __future__ import annotations

from dataclasses import dataclass, replace

from ..protocol import Mode
from ..transport import store_rounds
from .runner import MetricsRow, run_scenario
from .scenario import ConfigError, Scenario


@dataclass(frozen=True)
class SweepPoint:
    n_devices: int
    mode: str
    detection_ticks: float
    restart_ticks: float
    redone_steps: int
    recreated_containers: int
    ranktable_messages: int
    store_rounds: int
    exit_status: int
    rows: tuple[MetricsRow, ...]


def sweep_scale(base: Scenario, sizes: list[int], modes: tuple[Mode, ...] = (Mode.FLASH, Mode.CHECKPOINT)
                ) -> list[SweepPoint]:
    """Run ``base`` at each device count in ``sizes`` and in each mode."""
    if len(sizes) < 2:
        raise ConfigError("a sweep needs at least two sizes")
    if len(base.faults) != 1:
        raise ConfigError("a sweep scenario must inject exactly one fault")
    out = []
    for mode in modes:
        interval = base.checkpoint_interval_t or (base.horizon_steps if mode is Mode.CHECKPOINT else 0)
        for n in sizes:
            sc = replace(base.with_size(n), mode=mode, checkpoint_interval_t=interval,
                         scenario_id=f"{base.scenario_id}-{mode.value}-{n}")
            res = run_scenario(sc)
            rep = res.reports[0] if res.reports else None
            row = res.rows[0]
            if mode is Mode.FLASH:
                rounds = store_rounds(sc.devices_per_node, sc.store_parallelism_p)
            else:
                rounds = store_rounds(n, 1)
            out.append(SweepPoint(n, mode.value, row.detection_ticks, row.restart_ticks, row.redone_steps,
                                  rep.recreated_containers if rep else 0, res.ranktable_messages, rounds,
                                  res.exit_status, tuple(res.rows)))
    return out


def plot_series(points: list[SweepPoint]) -> str:
    """CSV of restart ticks per size, one column per mode."""
    sizes = sorted({p.n_devices for p in points})
    modes = sorted({p.mode for p in points})
    by = {(p.n_devices, p.mode): p for p in points}
    lines = ["n_devices," + ",".join(f"{m}_restart_ticks" for m in modes)]
    for n in sizes:
        lines.append(f"{n}," + ",".join(_num(by[(n, m)].restart_ticks) if (n, m) in by else "" for m in modes))
    return "\n".join(lines) + "\n"


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else f"{v:.6g}"
