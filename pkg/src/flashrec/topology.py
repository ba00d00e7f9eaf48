"""Parallelism layout, replica placement and the shared ranktable.

Ranks enumerate nested loops with dp outermost, then pp, then tp, with zero
innermost.  ZeRO slices shard state inside a data-parallel replica; the same
slice in every other replica is its copy.
"""

from __future__ import annotations

import enum
import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Iterable, Mapping, Optional


class TopologyError(ValueError):
    """Invalid topology arguments."""


class RankTableError(ValueError):
    """Malformed ranktable input or an invalid ranktable mutation."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class NodeNotFound(KeyError):
    pass


@dataclass(frozen=True, order=True)
class ShardId:
    pp_stage: int
    tp_slice: int
    zero_slice: int


@dataclass(frozen=True)
class ParallelTopology:
    dp_degree: int
    tp_degree: int
    pp_degree: int
    zero_degree: int

    @property
    def world_size(self) -> int:
        return self.dp_degree * self.tp_degree * self.pp_degree * self.zero_degree

    @property
    def num_shards(self) -> int:
        return self.pp_degree * self.tp_degree * self.zero_degree

    def coords(self, rank: int) -> tuple[int, int, int, int]:
        """Return ``(dp, pp, tp, zero)`` coordinates of ``rank``."""
        self._check_rank(rank)
        rank, z = divmod(rank, self.zero_degree)
        rank, t = divmod(rank, self.tp_degree)
        d, p = divmod(rank, self.pp_degree)
        return d, p, t, z

    def rank_of(self, dp: int, pp: int, tp: int, zero: int) -> int:
        return ((dp * self.pp_degree + pp) * self.tp_degree + tp) * self.zero_degree + zero

    def dp_index(self, rank: int) -> int:
        return self.coords(rank)[0]

    def shard_of(self, rank: int) -> ShardId:
        _, p, t, z = self.coords(rank)
        return ShardId(p, t, z)

    def shard_index(self, shard: ShardId) -> int:
        """Position of ``shard`` in a flattened parameter vector."""
        return (shard.pp_stage * self.tp_degree + shard.tp_slice) * self.zero_degree + shard.zero_slice

    def shards(self) -> list[ShardId]:
        return [ShardId(p, t, z) for p, t, z in
                product(range(self.pp_degree), range(self.tp_degree), range(self.zero_degree))]

    def holders(self, shard: ShardId) -> list[int]:
        """All ranks holding ``shard``, ascending."""
        return [self.rank_of(d, shard.pp_stage, shard.tp_slice, shard.zero_slice)
                for d in range(self.dp_degree)]

    def replica_group(self, dp: int) -> list[int]:
        """Ranks forming one complete copy of the model state."""
        base = dp * self.num_shards
        return list(range(base, base + self.num_shards))

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.world_size:
            raise TopologyError(f"rank {rank} outside [0, {self.world_size})")


def build_topology(dp: int, tp: int = 1, pp: int = 1, zero: int = 1) -> ParallelTopology:
    for name, value in (("dp", dp), ("tp", tp), ("pp", pp), ("zero", zero)):
        if not isinstance(value, int) or value < 1:
            raise TopologyError(f"{name} degree must be a positive integer, got {value!r}")
    return ParallelTopology(dp, tp, pp, zero)


def shard_map(topo: ParallelTopology, rank: int) -> frozenset[ShardId]:
    return frozenset({topo.shard_of(rank)})


@dataclass(frozen=True)
class RecoverabilityVerdict:
    recoverable: bool
    donor_map: Mapping[int, int] = field(default_factory=dict)
    lost_shards: tuple[ShardId, ...] = ()


def check_recoverability(topo: ParallelTopology, faulty: Iterable[int]) -> RecoverabilityVerdict:
    """Decide whether every shard on ``faulty`` ranks survives on a healthy rank.

    Donors are the lowest healthy rank holding the shard.
    """
    faulty = set(faulty)
    for r in faulty:
        topo._check_rank(r)
    donors: dict[int, int] = {}
    lost: set[ShardId] = set()
    for r in sorted(faulty):
        for shard in shard_map(topo, r):
            healthy = [h for h in topo.holders(shard) if h not in faulty]
            if healthy:
                donors[r] = healthy[0]
            else:
                lost.add(shard)
    if lost:
        return RecoverabilityVerdict(False, {}, tuple(sorted(lost)))
    return RecoverabilityVerdict(True, donors, ())


class RankStatus(str, enum.Enum):
    HEALTHY = "healthy"
    FAULTY = "faulty"
    REPLACED = "replaced"


@dataclass(frozen=True)
class RankEntry:
    rank: int
    node_id: str
    device_id: int
    status: RankStatus = RankStatus.HEALTHY


@dataclass(frozen=True)
class RankTable:
    version: int
    entries: tuple[RankEntry, ...]

    def __post_init__(self) -> None:
        _validate_entries(self.entries)

    @property
    def world_size(self) -> int:
        return len(self.entries)

    def nodes(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.node_id, None)
        return list(seen)

    def ranks_on(self, node_id: str) -> list[int]:
        return [e.rank for e in self.entries if e.node_id == node_id]

    def node_of(self, rank: int) -> str:
        return self.entries[rank].node_id

    def entry(self, rank: int) -> RankEntry:
        return self.entries[rank]

    def with_status(self, ranks: Iterable[int], status: RankStatus) -> "RankTable":
        ranks = set(ranks)
        entries = tuple(replace(e, status=status) if e.rank in ranks else e for e in self.entries)
        return RankTable(self.version + 1, entries)


def _validate_entries(entries: tuple[RankEntry, ...]) -> None:
    if not entries:
        raise RankTableError("entries", "world_size must be at least 1")
    seen: set[int] = set()
    for pos, e in enumerate(entries):
        if e.rank in seen:
            raise RankTableError("rank", f"duplicate rank {e.rank}")
        seen.add(e.rank)
        if e.rank != pos:
            raise RankTableError("rank", f"ranks must be contiguous from 0; got {e.rank} at position {pos}")


def build_ranktable(world_size: int, devices_per_node: int, node_prefix: str = "node") -> RankTable:
    if world_size < 1 or devices_per_node < 1 or world_size % devices_per_node:
        raise RankTableError("world_size", f"{world_size} ranks do not fill nodes of {devices_per_node}")
    entries = tuple(RankEntry(r, f"{node_prefix}-{r // devices_per_node}", r % devices_per_node)
                    for r in range(world_size))
    return RankTable(0, entries)


def replace_node(rt: RankTable, old_node: str, new_node: str) -> RankTable:
    if not any(e.node_id == old_node for e in rt.entries):
        raise NodeNotFound(old_node)
    entries = tuple(replace(e, node_id=new_node, status=RankStatus.REPLACED) if e.node_id == old_node else e
                    for e in rt.entries)
    return RankTable(rt.version + 1, entries)


def serialize_ranktable(rt: RankTable) -> bytes:
    doc = {
        "version": rt.version,
        "world_size": rt.world_size,
        "entries": [{"rank": e.rank, "node_id": e.node_id, "device_id": e.device_id, "status": e.status.value}
                    for e in rt.entries],
    }
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _field(obj: Mapping, key: str, kind: type, where: str):
    if key not in obj:
        raise RankTableError(f"{where}{key}", "missing")
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise RankTableError(f"{where}{key}", f"expected integer, got {value!r}")
    if kind is str and not isinstance(value, str):
        raise RankTableError(f"{where}{key}", f"expected string, got {value!r}")
    return value


def parse_ranktable(data: bytes) -> RankTable:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise RankTableError("document", f"not valid UTF-8 JSON: {err}") from None
    if not isinstance(doc, dict):
        raise RankTableError("document", "expected a JSON object")
    version = _field(doc, "version", int, "")
    world_size = _field(doc, "world_size", int, "")
    raw = doc.get("entries")
    if not isinstance(raw, list):
        raise RankTableError("entries", "expected a list")
    if world_size < 1:
        raise RankTableError("world_size", "must be at least 1")
    if len(raw) != world_size:
        raise RankTableError("world_size", f"declares {world_size} ranks but {len(raw)} entries present")
    entries = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise RankTableError(f"entries[{i}]", "expected an object")
        where = f"entries[{i}]."
        status = _field(item, "status", str, where)
        try:
            status = RankStatus(status)
        except ValueError:
            raise RankTableError(f"{where}status", f"unknown status {status!r}") from None
        entries.append(RankEntry(_field(item, "rank", int, where), _field(item, "node_id", str, where),
                                 _field(item, "device_id", int, where), status))
    return RankTable(version, tuple(entries))


def write_ranktable_file(path: os.PathLike | str, rt: RankTable) -> None:
    """Atomically replace ``path`` with ``rt``; readers never see a partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(serialize_ranktable(rt))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_ranktable_file(path: os.PathLike | str) -> Optional[RankTable]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        return None
    return parse_ranktable(data)
