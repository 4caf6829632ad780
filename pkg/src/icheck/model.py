"""Domain types shared by the controller, agents, managers and the client library."""

from __future__ import annotations

import enum
import itertools
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

#: number of COMPLETE versions retained per (app, adapt_epoch)
KEEP_VERSIONS = 2


class DistributionScheme(enum.IntEnum):
    BLOCK = 0
    CYCLIC = 1

    @classmethod
    def parse(cls, value) -> "DistributionScheme":
        if isinstance(value, cls):
            return value
        try:
            if isinstance(value, str):
                return cls[value.upper()]
            return cls(int(value))
        except (KeyError, ValueError, TypeError):
            raise InvalidArgument(f"unknown distribution scheme {value!r}") from None


class RankStatus(enum.IntEnum):
    PENDING = 0
    COMMITTED = 1


class StorageLevel(enum.IntEnum):
    MEMORY = 1
    PFS = 2
    BOTH = 3

    @property
    def in_memory(self) -> bool:
        return self in (StorageLevel.MEMORY, StorageLevel.BOTH)

    @property
    def on_pfs(self) -> bool:
        return self in (StorageLevel.PFS, StorageLevel.BOTH)


class ProcessType(enum.IntEnum):
    INITIAL = 0
    JOINING = 1


class ICheckError(Exception):
    """Base class for errors raised by this package."""


class InvalidArgument(ICheckError, ValueError):
    pass


class CorruptState(ICheckError):
    pass


def crc32(data) -> int:
    """CRC-32/ISO-HDLC of a bytes-like object."""
    return zlib.crc32(data) & 0xFFFFFFFF


class IdCounter:
    """Issues strictly increasing 64-bit ids, starting at 1. Thread-safe."""

    def __init__(self, start: int = 1):
        self._lock = threading.Lock()
        self._it = itertools.count(start)

    def next(self) -> int:
        with self._lock:
            return next(self._it)


def next_id(counter: IdCounter) -> int:
    return counter.next()


@dataclass(frozen=True)
class RegionDescriptor:
    region_id: str
    elem_size: int
    count_per_rank: Tuple[int, ...]
    scheme: DistributionScheme = DistributionScheme.BLOCK

    def __post_init__(self):
        if self.elem_size < 1:
            raise InvalidArgument(f"elem_size must be >= 1, got {self.elem_size}")
        object.__setattr__(self, "count_per_rank", tuple(int(c) for c in self.count_per_rank))
        object.__setattr__(self, "scheme", DistributionScheme.parse(self.scheme))

    @property
    def total_n(self) -> int:
        return sum(self.count_per_rank)

    @property
    def world_size(self) -> int:
        return len(self.count_per_rank)

    def nbytes(self, rank: Optional[int] = None) -> int:
        if rank is None:
            return self.total_n * self.elem_size
        return self.count_per_rank[rank] * self.elem_size

    def is_consistent(self) -> bool:
        from .layout import Layout, owned_count

        layout = Layout(self.total_n, self.world_size, self.scheme)
        return all(owned_count(layout, r) == c for r, c in enumerate(self.count_per_rank))


@dataclass(frozen=True)
class AgentAssignment:
    agent_id: int
    node_id: str
    ranks: FrozenSet[int]
    host: str = ""
    port: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ranks", frozenset(self.ranks))
        if not self.ranks:
            raise InvalidArgument(f"agent {self.agent_id} has no ranks")

    @property
    def endpoint(self) -> Tuple[str, int]:
        return (self.host, self.port)


def validate_assignments(assignments: Sequence[AgentAssignment], world_size: int) -> None:
    """Raise unless every rank in [0, world_size) maps to exactly one agent."""
    seen: Dict[int, int] = {}
    ids = set()
    for a in assignments:
        if a.agent_id in ids:
            raise CorruptState(f"agent id {a.agent_id} assigned twice")
        ids.add(a.agent_id)
        for r in a.ranks:
            if r in seen:
                raise CorruptState(f"rank {r} assigned to agents {seen[r]} and {a.agent_id}")
            if not 0 <= r < world_size:
                raise CorruptState(f"rank {r} outside world of size {world_size}")
            seen[r] = a.agent_id
    if len(seen) != world_size:
        missing = sorted(set(range(world_size)) - set(seen))
        raise CorruptState(f"ranks without agent: {missing}")


def agent_for_rank(assignments: Iterable[AgentAssignment], rank: int) -> AgentAssignment:
    for a in assignments:
        if rank in a.ranks:
            return a
    raise KeyError(rank)


@dataclass(frozen=True)
class RegionMeta:
    """What an agent knows about one committed (rank, region) entry."""

    region_id: str
    elem_size: int
    count: int
    scheme: DistributionScheme
    total_n: int
    size: int
    crc: int


@dataclass
class CheckpointVersion:
    version: int
    adapt_epoch: int
    world_size: int
    rank_status: Dict[int, RankStatus] = field(default_factory=dict)
    storage_level: Dict[int, StorageLevel] = field(default_factory=dict)
    checksums: Dict[Tuple[int, str], int] = field(default_factory=dict)
    regions: Dict[Tuple[int, str], RegionMeta] = field(default_factory=dict)
    # rank -> agent id holding the bytes in memory, None once only on PFS
    locations: Dict[int, Optional[int]] = field(default_factory=dict)
    timestamp: float = field(default_factory=time.time)
    completed_at: Optional[float] = None

    def __post_init__(self):
        for r in range(self.world_size):
            self.rank_status.setdefault(r, RankStatus.PENDING)

    @property
    def complete(self) -> bool:
        return all(s is RankStatus.COMMITTED for s in self.rank_status.values())

    def mark(self, rank: int, agent_id: int, metas: Sequence[RegionMeta]) -> bool:
        """Record a rank commit. Returns True if this call completed the version."""
        if self.rank_status.get(rank) is RankStatus.COMMITTED:
            return False
        was_complete = self.complete
        self.rank_status[rank] = RankStatus.COMMITTED
        self.storage_level[rank] = StorageLevel.MEMORY
        self.locations[rank] = agent_id
        for m in metas:
            self.checksums[(rank, m.region_id)] = m.crc
            self.regions[(rank, m.region_id)] = m
        if self.complete and not was_complete:
            self.completed_at = time.time()
            return True
        return False

    def region_descriptors(self) -> List[RegionDescriptor]:
        by_region: Dict[str, Dict[int, RegionMeta]] = {}
        for (rank, rid), meta in self.regions.items():
            by_region.setdefault(rid, {})[rank] = meta
        out = []
        for rid in sorted(by_region):
            metas = by_region[rid]
            any_meta = next(iter(metas.values()))
            counts = tuple(metas[r].count if r in metas else 0 for r in range(self.world_size))
            out.append(RegionDescriptor(rid, any_meta.elem_size, counts, any_meta.scheme))
        return out


def gc_versions(versions: List[CheckpointVersion], keep: int = KEEP_VERSIONS) -> List[CheckpointVersion]:
    """Drop versions older than the `keep` newest COMPLETE ones of their epoch.

    Mutates `versions` in place and returns the removed entries, oldest first.
    Pending versions newer than the retained window are left alone.
    """
    removed: List[CheckpointVersion] = []
    for epoch in {v.adapt_epoch for v in versions}:
        complete = sorted(v.version for v in versions if v.adapt_epoch == epoch and v.complete)
        if len(complete) < keep:
            continue
        horizon = complete[-keep]
        removed.extend(v for v in versions if v.adapt_epoch == epoch and v.version < horizon)
    removed.sort(key=lambda v: v.version)
    ids = {id(v) for v in removed}
    versions[:] = [v for v in versions if id(v) not in ids]
    return removed


@dataclass
class ApplicationRecord:
    app_id: int
    name: str
    world_size: int
    regions: List[RegionDescriptor] = field(default_factory=list)
    assignments: List[AgentAssignment] = field(default_factory=list)
    versions: List[CheckpointVersion] = field(default_factory=list)
    adapt_epoch: int = 0

    def __post_init__(self):
        if self.world_size < 1:
            raise InvalidArgument("world_size must be >= 1")

    def latest_complete(self, epoch: Optional[int] = None) -> Optional[CheckpointVersion]:
        best = None
        for v in self.versions:
            if not v.complete or (epoch is not None and v.adapt_epoch != epoch):
                continue
            if best is None or v.version > best.version:
                best = v
        return best

    def find_version(self, version: int) -> Optional[CheckpointVersion]:
        for v in self.versions:
            if v.version == version:
                return v
        return None


@dataclass(frozen=True)
class NodeStats:
    node_id: str
    mem_capacity: int
    mem_used: int = 0
    bw_used: float = 0.0
    mem_predicted: float = 0.0
    bw_predicted: float = 0.0
    sample_time: float = 0.0

    @property
    def free_predicted(self) -> float:
        return self.mem_capacity - max(self.mem_predicted, self.mem_used)
