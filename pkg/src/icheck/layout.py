"""Block/cyclic ownership of a global array and redistribution between layouts.

All counts and offsets are in elements; byte offsets appear only in
:func:`apply_plan`.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from .model import CorruptState, DistributionScheme, InvalidArgument


@dataclass(frozen=True)
class Layout:
    total_n: int
    p: int
    scheme: DistributionScheme = DistributionScheme.BLOCK

    def __post_init__(self):
        if self.p < 1:
            raise InvalidArgument(f"process count must be >= 1, got {self.p}")
        if self.total_n < 0:
            raise InvalidArgument(f"total_n must be >= 0, got {self.total_n}")
        object.__setattr__(self, "scheme", DistributionScheme.parse(self.scheme))

    def counts(self) -> List[int]:
        return [owned_count(self, r) for r in range(self.p)]


class Transfer(NamedTuple):
    src_rank: int
    src_offset: int
    dst_rank: int
    dst_offset: int
    length: int


@dataclass(frozen=True, eq=False)
class RedistributionPlan:
    """Runs as an int64 table with columns (src_rank, src_offset, dst_rank, dst_offset, length)."""

    runs: np.ndarray
    old: Layout
    new: Layout

    @functools.cached_property
    def transfers(self) -> Tuple[Transfer, ...]:
        return tuple(map(Transfer._make, self.runs.tolist()))

    def for_destination(self, dst_rank: int) -> List[Transfer]:
        sel = self.runs[self.runs[:, 2] == dst_rank]
        return [Transfer._make(row) for row in sel.tolist()]

    @property
    def total(self) -> int:
        return int(self.runs[:, 4].sum())

    def __eq__(self, other) -> bool:
        return (isinstance(other, RedistributionPlan) and self.old == other.old and self.new == other.new
                and np.array_equal(self.runs, other.runs))


def block_partition(total_n: int, p: int) -> List[Tuple[int, int]]:
    """(global_offset, length) per rank; the first ``total_n % p`` ranks get one extra."""
    if p < 1:
        raise InvalidArgument(f"process count must be >= 1, got {p}")
    q, rem = divmod(total_n, p)
    return [(r * q + min(r, rem), q + 1 if r < rem else q) for r in range(p)]


def cyclic_owner(i: int, p: int) -> Tuple[int, int]:
    if p < 1:
        raise InvalidArgument(f"process count must be >= 1, got {p}")
    if i < 0:
        raise InvalidArgument(f"negative index {i}")
    return i % p, i // p


def owned_count(layout: Layout, r: int) -> int:
    if not 0 <= r < layout.p:
        raise InvalidArgument(f"rank {r} out of range for {layout.p} processes")
    n, p = layout.total_n, layout.p
    if layout.scheme is DistributionScheme.BLOCK:
        q, rem = divmod(n, p)
        return q + 1 if r < rem else q
    return max(0, -(-(n - r) // p))


def global_indices(layout: Layout, r: int) -> np.ndarray:
    """Global indices owned by rank ``r``, in local order."""
    if layout.scheme is DistributionScheme.BLOCK:
        off, length = block_partition(layout.total_n, layout.p)[r]
        return np.arange(off, off + length, dtype=np.int64)
    return np.arange(r, layout.total_n, layout.p, dtype=np.int64)


def _owners(layout: Layout, g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    p = layout.p
    if layout.scheme is DistributionScheme.CYCLIC:
        return g % p, g // p
    q, rem = divmod(layout.total_n, p)
    # first `rem` ranks hold q+1 elements, the rest q
    split = rem * (q + 1)
    rank = np.where(g < split, g // (q + 1), rem + (g - split) // max(q, 1))
    local = g - (rank * q + np.minimum(rank, rem))
    return rank, local


def _destination_order(layout: Layout) -> np.ndarray:
    g = np.arange(layout.total_n, dtype=np.int64)
    if layout.scheme is DistributionScheme.BLOCK or layout.p == 1:
        return g
    return np.argsort(g % layout.p, kind="stable")


def redistribution_plan(old: Layout, new: Layout) -> RedistributionPlan:
    if old.total_n != new.total_n:
        raise InvalidArgument(
            f"total size must be conserved across adaptation ({old.total_n} != {new.total_n})"
        )
    n = new.total_n
    if n == 0:
        return RedistributionPlan(np.zeros((0, 5), dtype=np.int64), old, new)
    g = _destination_order(new)
    src_rank, src_off = _owners(old, g)
    dst_rank, dst_off = _owners(new, g)
    brk = np.ones(n, dtype=bool)
    brk[1:] = (
        (src_rank[1:] != src_rank[:-1])
        | (dst_rank[1:] != dst_rank[:-1])
        | (src_off[1:] != src_off[:-1] + 1)
        | (dst_off[1:] != dst_off[:-1] + 1)
    )
    starts = np.flatnonzero(brk)
    lengths = np.diff(np.append(starts, n))
    runs = np.stack((src_rank[starts], src_off[starts], dst_rank[starts], dst_off[starts], lengths), axis=1)
    return RedistributionPlan(runs.astype(np.int64), old, new)


def apply_plan(plan: RedistributionPlan, source_buffers: Sequence, elem_size: int) -> List[bytes]:
    """Move bytes of ``source_buffers`` (one per old rank) into the new layout."""
    if len(source_buffers) != plan.old.p:
        raise CorruptState(f"expected {plan.old.p} source buffers, got {len(source_buffers)}")
    srcs = [memoryview(b).cast("B") for b in source_buffers]
    for r, buf in enumerate(srcs):
        want = owned_count(plan.old, r) * elem_size
        if len(buf) != want:
            raise CorruptState(f"source rank {r} holds {len(buf)} bytes, expected {want}")
    if len(plan.runs) > _VECTOR_RUNS and elem_size > 0:
        return _apply_vectorized(plan, srcs, elem_size)
    out = [bytearray(owned_count(plan.new, r) * elem_size) for r in range(plan.new.p)]
    for t in plan.transfers:
        s = t.src_offset * elem_size
        d = t.dst_offset * elem_size
        k = t.length * elem_size
        out[t.dst_rank][d : d + k] = srcs[t.src_rank][s : s + k]
    return [bytes(b) for b in out]


_VECTOR_RUNS = 32  # above this many runs a single gather beats per-run slicing


def _apply_vectorized(plan: RedistributionPlan, srcs: Sequence[memoryview], elem_size: int) -> List[bytes]:
    t = plan.runs
    lengths = t[:, 4]
    src_base = np.concatenate(([0], np.cumsum(plan.old.counts())))
    dst_counts = plan.new.counts()
    dst_base = np.concatenate(([0], np.cumsum(dst_counts)))
    within = np.arange(plan.total) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    src_elem = np.repeat(src_base[t[:, 0]] + t[:, 1], lengths) + within
    dst_elem = np.repeat(dst_base[t[:, 2]] + t[:, 3], lengths) + within
    flat = np.frombuffer(b"".join(srcs), dtype=np.uint8).reshape(-1, elem_size)
    out = np.empty_like(flat)
    out[dst_elem] = flat[src_elem]
    return [out[dst_base[r] : dst_base[r + 1]].tobytes() for r in range(plan.new.p)]


def assemble_destination(transfers: Sequence[Transfer], count: int, elem_size: int, fetch) -> bytearray:
    """Build one destination rank's buffer, calling ``fetch(src_rank, byte_off, nbytes)`` per run."""
    out = bytearray(count * elem_size)
    for t in transfers:
        d = t.dst_offset * elem_size
        k = t.length * elem_size
        chunk = fetch(t.src_rank, t.src_offset * elem_size, k)
        if len(chunk) != k:
            raise CorruptState(f"run from rank {t.src_rank} returned {len(chunk)} bytes, expected {k}")
        out[d : d + k] = chunk
    return out
