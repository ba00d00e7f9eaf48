"""Closed-form recovery cost model for periodic checkpointing vs. replica recovery.

All durations are seconds.  The checkpoint interval is held in steps and
converted with ``step_time``; the expected recomputation per failure is half
an interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


class NoInteriorOptimum(ValueError):
    """The total cost is monotone in the interval, so no finite optimum exists."""


@dataclass(frozen=True)
class OverheadParams:
    d: float
    t: int
    m: int
    s0: float
    k0: float
    k1: float = 0.0  # overlaps with training, never charged
    step_time: float = 1.0

    def __post_init__(self) -> None:
        if self.d <= 0:
            raise ValueError("d must be positive")
        if self.t < 1:
            raise ValueError("t must be at least one step")
        if self.m < 0 or self.s0 < 0 or self.k0 < 0 or self.k1 < 0:
            raise ValueError("m, s0, k0, k1 must be non-negative")
        if self.step_time <= 0:
            raise ValueError("step_time must be positive")

    @property
    def s1(self) -> float:
        return self.t * self.step_time / 2

    def with_interval(self, t: int) -> "OverheadParams":
        return replace(self, t=t)


def _total(d: float, m: float, s0: float, k0: float, interval_seconds):
    return m * (s0 + interval_seconds / 2) + (d / interval_seconds) * k0


def f_total(p: OverheadParams) -> float:
    """Failure recovery plus checkpointing time over the period ``d``."""
    if p.t == 0:
        raise ValueError("t must be non-zero")
    return _total(p.d, p.m, p.s0, p.k0, p.t * p.step_time)


def f_total_continuous(p: OverheadParams, interval_seconds: float) -> float:
    return _total(p.d, p.m, p.s0, p.k0, interval_seconds)


def _require_interior(p: OverheadParams) -> None:
    if p.m < 1 or p.k0 <= 0:
        raise NoInteriorOptimum(f"m={p.m}, k0={p.k0}: cost is monotone in t")


def optimal_interval(p: OverheadParams) -> float:
    """Continuous optimum interval in seconds."""
    _require_interior(p)
    return math.sqrt(2 * p.d * p.k0 / p.m)


def f_min(p: OverheadParams) -> float:
    _require_interior(p)
    return p.m * p.s0 + math.sqrt(2 * p.d * p.k0 * p.m)


def brute_force_optimal(p: OverheadParams, t_max: int, chunk: int = 1 << 20) -> int:
    """Exhaustive argmin of :func:`f_total` over integer steps ``1..t_max``.

    Ties go to the smaller interval.
    """
    if t_max < 1:
        raise ValueError("t_max must be at least 1")
    best_t, best_v = 1, math.inf
    for lo in range(1, t_max + 1, chunk):
        ts = np.arange(lo, min(lo + chunk, t_max + 1), dtype=np.float64)
        vals = _total(p.d, p.m, p.s0, p.k0, ts * p.step_time)
        i = int(np.argmin(vals))
        if vals[i] < best_v:
            best_v, best_t = float(vals[i]), int(ts[i])
    return best_t


def discretization_gap(p: OverheadParams) -> float:
    """Largest cost penalty from rounding the optimum interval to whole steps."""
    x = optimal_interval(p) / p.step_time
    lo, hi = max(1, math.floor(x)), max(1, math.ceil(x))
    best = f_min(p)
    return max(f_total(p.with_interval(lo)), f_total(p.with_interval(hi))) - best


def f_flash(m: int, s0p: float, s1p: float) -> float:
    """Recovery time without checkpoints: restart plus at most one redone step per failure."""
    if m < 0 or s0p < 0 or s1p < 0:
        raise ValueError("arguments must be non-negative")
    return m * (s0p + s1p)


def cluster_success_prob(p_fault: float, n: int) -> float:
    """Probability that ``n`` independent devices all run correctly."""
    if not 0 <= p_fault <= 1 or n < 0:
        raise ValueError("need 0 <= p_fault <= 1 and n >= 0")
    return (1 - p_fault) ** n


def dp_group_loss_prob(p_fault: float, dp_degree: int) -> float:
    """Probability that every replica in a data-parallel group fails."""
    if not 0 <= p_fault <= 1 or dp_degree < 1:
        raise ValueError("need 0 <= p_fault <= 1 and dp_degree >= 1")
    return p_fault ** dp_degree


def break_even_failures(d: float, k0: float, s0: float, s0p: float, s1p: float) -> float:
    """Failure count below which replica recovery costs less than optimal checkpointing.

    Returns ``inf`` when replica recovery wins for every failure count.
    """
    excess = s0p + s1p - s0
    if excess <= 0:
        return math.inf
    return 2 * d * k0 / excess ** 2


@dataclass(frozen=True)
class AnalysisReport:
    t_star_seconds: float
    t_star_steps: float
    brute_force_steps: int
    f_min: float
    f_total_at_brute_force: float
    f_flash: float
    break_even_m: float

    def lines(self) -> list[str]:
        be = "inf" if math.isinf(self.break_even_m) else f"{self.break_even_m:.6g}"
        return [
            f"t_star_seconds={self.t_star_seconds:.6f}",
            f"t_star_steps={self.t_star_steps:.6f}",
            f"brute_force_steps={self.brute_force_steps}",
            f"f_min={self.f_min:.6f}",
            f"f_total_at_brute_force={self.f_total_at_brute_force:.6f}",
            f"f_flash={self.f_flash:.6f}",
            f"break_even_m={be}",
        ]


def analyze(d: float, m: int, s0: float, k0: float, step_time: float = 1.0,
            s0_flash: float | None = None, s1_flash: float | None = None) -> AnalysisReport:
    """Compare optimal periodic checkpointing against replica recovery.

    ``s0_flash`` defaults to ``s0`` (no restart speed-up credited) and
    ``s1_flash`` to one step.
    """
    s0p = s0 if s0_flash is None else s0_flash
    s1p = step_time if s1_flash is None else s1_flash
    p = OverheadParams(d=d, t=1, m=m, s0=s0, k0=k0, step_time=step_time)
    t_star = optimal_interval(p)
    steps = t_star / step_time
    t_max = max(2, math.ceil(2 * steps) + 2)
    bf = brute_force_optimal(p, t_max)
    if abs(bf - round(steps)) > 1:
        raise AssertionError(f"brute force optimum {bf} disagrees with closed form {steps:.3f}")
    return AnalysisReport(
        t_star_seconds=t_star,
        t_star_steps=steps,
        brute_force_steps=bf,
        f_min=f_min(p),
        f_total_at_brute_force=f_total(p.with_interval(bf)),
        f_flash=f_flash(m, s0p, s1p),
        break_even_m=break_even_failures(d, k0, s0, s0p, s1p),
    )
