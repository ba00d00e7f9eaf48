"""Tick costs for every simulated activity."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass(frozen=True)
class Timings:
    # training
    fb_ticks: int = 4
    optimizer_ticks: int = 2
    allreduce_ticks: int = 1
    jitter_ticks: int = 0  # extra forward/backward ticks drawn per (rank, step)
    # messaging and detection
    latency: int = 1
    heartbeat_period: int = 1
    miss_threshold: int = 3
    stop_wait_timeout: int = 50
    # restart
    cleanup_ticks: int = 2
    container_start_mean: float = 20.0
    container_start_sd: float = 3.0
    agent_ticks: int = 5
    store_connection_ticks: int = 1
    ranktable_load_ticks: int = 1
    negotiate_message_ticks: int = 1
    link_ticks: int = 1
    copy_ticks: int = 2
    restore_timeout: int = 30
    # checkpointing
    k0_ticks: int = 3
    k1_ticks: int = 5
    checkpoint_load_ticks: int = 10
    hang_timeout: int = 60

    @property
    def step_ticks(self) -> int:
        return self.fb_ticks + self.allreduce_ticks + self.optimizer_ticks

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Timings":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown timing fields: {sorted(unknown)}")
        return cls(**data)
