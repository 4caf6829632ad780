"""Agent scheduling policy: how many agents, which ranks, which node."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterable, List, Optional, Sequence

from .layout import block_partition
from .model import InvalidArgument

MiB = 1024 * 1024


@dataclass
class PolicyConfig:
    per_agent_capacity: int = 256 * MiB
    max_agents_per_app: int = 8
    mem_headroom: float = 0.15
    target_rate: float = 256.0 * MiB
    flush_age: float = 30.0
    flush_pressure: float = 0.75

    def __post_init__(self):
        for fl in fields(self):
            if getattr(self, fl.name) <= 0:
                raise InvalidArgument(f"{fl.name} must be positive")
        for name in ("mem_headroom", "flush_pressure"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise InvalidArgument(f"{name} must be in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        known = {fl.name for fl in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown policy keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class NodeView:
    node_id: str
    capacity: int
    projected_used: float


class SchedulingPolicy:
    """Capacity-driven agent count, most-free-memory placement, 0.5x/2x probe dead band."""

    def __init__(self, config: Optional[PolicyConfig] = None):
        self.config = config or PolicyConfig()

    def agent_count(self, total_bytes: int, world_size: int) -> int:
        upper = min(self.config.max_agents_per_app, world_size)
        want = math.ceil(total_bytes / self.config.per_agent_capacity) if total_bytes > 0 else 1
        return max(1, min(want, upper))

    def rank_groups(self, world_size: int, count: int) -> List[List[int]]:
        return [list(range(off, off + n)) for off, n in block_partition(world_size, count)]

    def fits(self, node: NodeView, share: float) -> bool:
        return node.projected_used + share <= (1.0 - self.config.mem_headroom) * node.capacity

    def place(self, share: float, nodes: Iterable[NodeView]) -> Optional[str]:
        """Node with the most projected free memory that stays within headroom, or None."""
        best = None
        for n in nodes:
            if not self.fits(n, share):
                continue
            free = n.capacity - n.projected_used
            if best is None or free > best[0] or (free == best[0] and n.node_id < best[1]):
                best = (free, n.node_id)
        return None if best is None else best[1]

    def probe(self, rate: Optional[float], current: int, world_size: int) -> int:
        """New agent count given the observed aggregate transfer rate."""
        if rate is None:
            return current
        upper = min(self.config.max_agents_per_app, world_size)
        if rate < 0.5 * self.config.target_rate and current < upper:
            return current + 1
        if rate > 2.0 * self.config.target_rate and current > 1:
            return current - 1
        return current


def place_many(policy: SchedulingPolicy, shares: Sequence[float], nodes: List[NodeView]) -> Optional[List[str]]:
    """Place agents one by one, charging each placement to its node."""
    chosen = []
    views = {n.node_id: NodeView(n.node_id, n.capacity, n.projected_used) for n in nodes}
    for share in shares:
        nid = policy.place(share, views.values())
        if nid is None:
            return None
        views[nid].projected_used += share
        chosen.append(nid)
    return chosen
