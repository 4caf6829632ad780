"""Checkpoint data plane: staging store, restore, redistribution, flush and migration."""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import protocol as P
from .layout import Layout, Transfer, assemble_destination, owned_count, redistribution_plan
from .model import CorruptState, DistributionScheme, RegionMeta, StorageLevel, crc32
from .pfs import PfsTier
from .transport import Address, ConnectionPool, RemoteError, Server

log = logging.getLogger(__name__)

SNAPSHOT = 0  # version number reserved for adapt-time snapshots
CHUNK = 4 * 1024 * 1024

Key = Tuple[int, int, int, int, str]  # (app_id, epoch, version, rank, region_id)


class AgentError(Exception):
    def __init__(self, kind: str, reason: str):
        super().__init__(reason)
        self.kind = kind


@dataclass
class Entry:
    meta: RegionMeta
    data: Optional[bytes]
    level: StorageLevel


class StagingStore:
    """In-memory checkpoint entries; ``bytes_staged`` counts MEMORY/BOTH buffers."""

    def __init__(self):
        self._entries: Dict[Key, Entry] = {}
        self._cond = threading.Condition()
        self.bytes_staged = 0

    def __len__(self) -> int:
        return len(self._entries)

    def put(self, key: Key, data: bytes, meta: RegionMeta, level: StorageLevel = StorageLevel.MEMORY) -> None:
        if crc32(data) != meta.crc:
            raise AgentError("integrity", f"checksum mismatch for {key}")
        with self._cond:
            old = self._entries.get(key)
            if old is not None and old.data is not None:
                self.bytes_staged -= len(old.data)
            self._entries[key] = Entry(meta, data, level)
            self.bytes_staged += len(data)
            self._cond.notify_all()

    def get(self, key: Key) -> Optional[Entry]:
        with self._cond:
            return self._entries.get(key)

    def read(self, key: Key) -> bytes:
        e = self.get(key)
        if e is None or e.data is None:
            raise AgentError("missing", f"no in-memory entry {key}")
        if crc32(e.data) != e.meta.crc:
            raise AgentError("integrity", f"staged entry {key} fails its checksum")
        return e.data

    def wait_for(self, key: Key, timeout: float) -> Entry:
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                e = self._entries.get(key)
                if e is not None:
                    return e
                left = deadline - time.monotonic()
                if left <= 0:
                    raise AgentError("no source", f"snapshot {key} never arrived")
                self._cond.wait(left)

    def delete(self, key: Key) -> None:
        with self._cond:
            e = self._entries.pop(key, None)
            if e is not None and e.data is not None:
                self.bytes_staged -= len(e.data)

    def set_level(self, key: Key, level: StorageLevel) -> None:
        with self._cond:
            e = self._entries[key]
            if level is StorageLevel.PFS and e.data is not None:
                if e.level is not StorageLevel.BOTH:
                    raise CorruptState(f"refusing to drop {key} from memory before it is on PFS")
                self.bytes_staged -= len(e.data)
                e.data = None
            e.level = level

    def keys(self, pred=None) -> List[Key]:
        with self._cond:
            return [k for k in self._entries if pred is None or pred(k)]

    def check_accounting(self) -> None:
        with self._cond:
            total = sum(len(e.data) for e in self._entries.values() if e.data is not None)
            if total != self.bytes_staged:
                raise CorruptState(f"bytes_staged {self.bytes_staged} != {total}")


@dataclass
class PendingTransfer:
    key_base: Tuple[int, int, int, int]  # app, epoch, version, rank
    regions: Dict[str, P.RegionSum]
    buffers: Dict[str, bytearray]
    received: Dict[str, int]
    started: float
    snapshot: bool
    error: Optional[Tuple[int, str]] = None


@dataclass
class PushedPlan:
    transfers: List[Transfer]
    sources: List[P.AgentInfo]


@dataclass
class AgentCounters:
    bytes_moved: int = 0
    plans_computed: int = 0
    plans_pushed_used: int = 0
    directory_queries: int = 0
    commits: int = 0
    migrations_retried: int = 0


class Agent:
    def __init__(
        self,
        agent_id: int,
        node_id: str,
        app_id: int,
        ranks: Sequence[int] = (),
        budget: int = 1 << 62,
        controller: Optional[Address] = None,
        pfs_root: Optional[str] = None,
        host: str = "127.0.0.1",
        snapshot_timeout: float = 30.0,
    ):
        self.agent_id = agent_id
        self.node_id = node_id
        self.app_id = app_id
        self.ranks = set(ranks)
        self.budget = budget
        self.controller = controller
        self.pfs = PfsTier(pfs_root) if pfs_root else None
        self.host = host
        self.snapshot_timeout = snapshot_timeout
        self.store = StagingStore()
        self.registered: Dict[Tuple[int, int], Dict[str, P.RegionDecl]] = {}
        self.plans: Dict[Tuple[int, int, str], Tuple[P.LayoutSpec, P.LayoutSpec, PushedPlan]] = {}
        self.directories: Dict[Tuple[int, int], List[P.AgentInfo]] = {}
        self.complete_versions: Dict[int, set] = {}
        self.counters = AgentCounters()
        self.pool = ConnectionPool()
        self._lock = threading.Lock()
        self._migrate_lock = threading.Lock()
        self.server: Optional[Server] = None
        # fault injection
        self.corrupt_next_migration = False
        self.pfs_fault = None
        self.moved: set = set()

    # --- lifecycle -----------------------------------------------------------

    def start(self, port: int = 0) -> "Agent":
        self.server = Server(self._handler, host=self.host, port=port, name=f"agent{self.agent_id}").start()
        return self

    @property
    def address(self) -> Address:
        return self.server.address

    def info(self) -> P.AgentInfo:
        return P.AgentInfo(self.agent_id, self.node_id, self.address[0], self.address[1], sorted(self.ranks))

    def stop(self, abort: bool = False) -> None:
        if self.server is not None:
            self.server.stop(abort=abort)
        self.pool.close()
        for k in self.store.keys():
            self.store.delete(k)

    def _handler(self, conn):
        return _AgentConnection(self)

    # --- controller interaction ---------------------------------------------

    def _controller_call(self, msg, expect=None):
        if self.controller is None:
            raise AgentError("controller", "agent has no controller address")
        return self.pool.call(self.controller, msg, expect=expect)

    def _report_commit(self, pending: PendingTransfer, duration: float, nbytes: int) -> None:
        app, epoch, version, rank = pending.key_base
        if self.controller is None:
            return
        reply = self._controller_call(P.CommitReport(
            app, epoch, version, rank, self.agent_id, list(pending.regions.values()), nbytes, duration))
        if isinstance(reply, P.Purge):
            self.purge(reply.app_id, reply.epoch, reply.below_version)

    def _is_complete(self, app_id: int, version: int) -> bool:
        known = self.complete_versions.setdefault(app_id, set())
        if version in known:
            return True
        if self.controller is None:
            return True
        st = self._controller_call(P.VersionQuery(app_id, version), expect=P.VersionStatus)
        if st.complete:
            known.add(version)
        return st.complete

    # --- commits -------------------------------------------------------------

    def begin(self, msg, snapshot: bool) -> PendingTransfer:
        version = SNAPSHOT if snapshot else msg.version
        regions = {r.region_id: r for r in msg.regions}
        pending = PendingTransfer((msg.app_id, msg.epoch, version, msg.rank), regions, {}, {},
                                  time.monotonic(), snapshot)
        reg = self.registered.get((msg.app_id, msg.rank))
        for r in msg.regions:
            decl = reg.get(r.region_id) if reg else None
            if decl is None:
                pending.error = (P.ACK_UNREGISTERED, f"region {r.region_id!r} of rank {msg.rank} is not registered")
                break
            if r.size != decl.count * decl.elem_size or r.elem_size != decl.elem_size:
                pending.error = (P.ACK_UNREGISTERED,
                                 f"region {r.region_id!r}: declared {r.size} bytes, registered "
                                 f"{decl.count * decl.elem_size}")
                break
            pending.buffers[r.region_id] = bytearray(r.size)
            pending.received[r.region_id] = 0
        return pending

    def data(self, pending: PendingTransfer, msg: P.CommitData) -> None:
        if pending.error is not None:
            return
        buf = pending.buffers.get(msg.region_id)
        if buf is None or msg.offset + len(msg.data) > len(buf):
            pending.error = (P.ACK_INTEGRITY, f"chunk for {msg.region_id!r} at {msg.offset} out of bounds")
            return
        buf[msg.offset : msg.offset + len(msg.data)] = msg.data
        pending.received[msg.region_id] += len(msg.data)
        with self._lock:
            self.counters.bytes_moved += len(msg.data)

    def end(self, pending: PendingTransfer) -> P.CommitAck:
        app, epoch, version, rank = pending.key_base
        if pending.error is not None:
            return P.CommitAck(version, rank, pending.error[0], pending.error[1])
        metas = []
        for rid, r in pending.regions.items():
            buf = pending.buffers[rid]
            if pending.received[rid] != len(buf):
                return P.CommitAck(version, rank, P.ACK_INTEGRITY,
                                   f"region {rid!r}: received {pending.received[rid]} of {len(buf)} bytes")
            if crc32(buf) != r.crc:
                return P.CommitAck(version, rank, P.ACK_INTEGRITY, f"region {rid!r}: checksum mismatch")
            metas.append(RegionMeta(rid, r.elem_size, r.count, DistributionScheme(r.scheme), r.total_n, r.size, r.crc))
        nbytes = sum(m.size for m in metas)
        with self._migrate_lock:
            if rank in self.moved:
                return P.CommitAck(version, rank, P.ACK_FAILED, f"moved: rank {rank} migrated off agent {self.agent_id}")
            return self._store_commit(pending, metas, nbytes)

    def _store_commit(self, pending: PendingTransfer, metas: List[RegionMeta], nbytes: int) -> P.CommitAck:
        app, epoch, version, rank = pending.key_base
        if self.store.bytes_staged + nbytes > self.budget:
            self._alert_capacity(app, nbytes)
            return P.CommitAck(version, rank, P.ACK_CAPACITY,
                               f"staging {nbytes} bytes would exceed budget {self.budget}")
        for m in metas:
            self.store.put((app, epoch, version, rank, m.region_id), bytes(pending.buffers[m.region_id]), m)
        duration = time.monotonic() - pending.started
        if pending.snapshot:
            return P.CommitAck(version, rank, P.ACK_OK, "snapshot")
        self.drop_snapshots(app, epoch)
        try:
            self._report_commit(pending, duration, nbytes)
        except (OSError, RemoteError, P.ProtocolError) as exc:
            for m in metas:
                self.store.delete((app, epoch, version, rank, m.region_id))
            return P.CommitAck(version, rank, P.ACK_FAILED, f"controller unreachable: {exc}")
        with self._lock:
            self.counters.commits += 1
        return P.CommitAck(version, rank, P.ACK_OK, "")

    def _alert_capacity(self, app_id: int, nbytes: int) -> None:
        if self.controller is None:
            return

        def send():
            try:
                self._controller_call(P.CapacityAlert(self.agent_id, app_id, nbytes))
            except Exception:
                log.debug("capacity alert failed", exc_info=True)

        threading.Thread(target=send, daemon=True).start()

    def drop_snapshots(self, app_id: int, upto_epoch: int) -> None:
        for k in self.store.keys(lambda k: k[0] == app_id and k[2] == SNAPSHOT and k[1] <= upto_epoch):
            self.store.delete(k)

    def purge(self, app_id: int, epoch: int, below_version: int) -> int:
        victims = self.store.keys(
            lambda k: k[0] == app_id and k[1] == epoch and k[2] != SNAPSHOT and k[2] < below_version)
        for k in victims:
            self.store.delete(k)
        return len(victims)

    # --- restore -------------------------------------------------------------

    def load(self, key: Key) -> Tuple[bytes, RegionMeta]:
        e = self.store.get(key)
        if e is not None and e.data is not None:
            return self.store.read(key), e.meta
        app, epoch, version, rank, rid = key
        if self.pfs is not None:
            meta = self.pfs.region_meta(app, epoch, version, rank, rid)
            if meta is not None:
                try:
                    return self.pfs.read(app, epoch, version, rank, rid), meta
                except (OSError, CorruptState) as exc:
                    raise AgentError("storage", str(exc)) from exc
        raise AgentError("missing", f"no entry for app {app} epoch {epoch} v{version} rank {rank} {rid!r}")

    def restore(self, req: P.RestoreReq):
        if req.version == SNAPSHOT or not self._is_complete(req.app_id, req.version):
            raise AgentError("missing", f"version {req.version} is not a COMPLETE checkpoint")
        data, meta = self.load((req.app_id, req.epoch, req.version, req.rank, req.region_id))
        with self._lock:
            self.counters.bytes_moved += len(data)
        return _stream(data, lambda off, chunk, last: P.RestoreData(
            req.region_id, off, len(data), meta.crc, last, chunk))

    # --- redistribution ------------------------------------------------------

    def accept_plan(self, msg: P.PlanPush) -> None:
        transfers = [Transfer(r.src_rank, r.src_offset, r.dst_rank, r.dst_offset, r.length) for r in msg.runs]
        with self._lock:
            self.plans[(msg.app_id, msg.epoch, msg.region_id)] = (msg.old, msg.new, PushedPlan(transfers, msg.sources))

    def _plan_for(self, req: P.RedistReq) -> Tuple[List[Transfer], List[P.AgentInfo]]:
        with self._lock:
            pushed = self.plans.get((req.app_id, req.epoch, req.region_id))
        if pushed is not None and pushed[0] == req.old and pushed[1] == req.new:
            with self._lock:
                self.counters.plans_pushed_used += 1
            return [t for t in pushed[2].transfers if t.dst_rank == req.dst_rank], pushed[2].sources
        plan = redistribution_plan(P.from_layout_spec(req.old), P.from_layout_spec(req.new))
        with self._lock:
            self.counters.plans_computed += 1
            sources = self.directories.get((req.app_id, req.epoch))
        if sources is None:
            reply = self._controller_call(P.DirectoryQuery(req.app_id, req.epoch), expect=P.Directory)
            sources = reply.assignments
            with self._lock:
                self.counters.directory_queries += 1
                self.directories[(req.app_id, req.epoch)] = sources
        return plan.for_destination(req.dst_rank), sources

    def snapshot_slice(self, app_id: int, epoch: int, rank: int, region_id: str, offset: int, length: int,
                       timeout: Optional[float] = None) -> bytes:
        key = (app_id, epoch, SNAPSHOT, rank, region_id)
        self.store.wait_for(key, self.snapshot_timeout if timeout is None else timeout)
        data = self.store.read(key)
        if offset + length > len(data):
            raise AgentError("layout", f"snapshot of rank {rank} holds {len(data)} bytes, run needs {offset + length}")
        return data[offset : offset + length]

    def redistribute(self, req: P.RedistReq):
        new = P.from_layout_spec(req.new)
        old = P.from_layout_spec(req.old)
        if not 0 <= req.dst_rank < new.p:
            raise AgentError("layout", f"destination rank {req.dst_rank} outside new layout of {new.p}")
        transfers, sources = self._plan_for(req)
        owner = {}
        for a in sources:
            for r in a.ranks:
                owner[r] = a
        es = req.elem_size
        spans: Dict[int, Tuple[int, int]] = {}
        for t in transfers:
            lo, hi = spans.get(t.src_rank, (t.src_offset, t.src_offset + t.length))
            spans[t.src_rank] = (min(lo, t.src_offset), max(hi, t.src_offset + t.length))
        cache: Dict[int, Tuple[int, bytes]] = {}
        for src, (lo, hi) in spans.items():
            cache[src] = (lo * es, self._fetch_source(req, owner.get(src), src, lo * es, (hi - lo) * es))
            self._check_layout(req, old, src)

        def fetch(src_rank, byte_off, nbytes):
            base, blob = cache[src_rank]
            return blob[byte_off - base : byte_off - base + nbytes]

        out = assemble_destination(transfers, owned_count(new, req.dst_rank), es, fetch)
        with self._lock:
            self.counters.bytes_moved += len(out)
        data = bytes(out)
        return _stream(data, lambda off, chunk, last: P.RedistData(req.region_id, off, len(data), last, chunk))

    def _check_layout(self, req: P.RedistReq, old: Layout, src: int) -> None:
        e = self.store.get((req.app_id, req.epoch, SNAPSHOT, src, req.region_id))
        if e is None:
            return  # held by a peer, which checks sizes on fetch
        if e.meta.elem_size != req.elem_size or e.meta.total_n != old.total_n:
            raise AgentError("layout", f"request layout does not match registered region {req.region_id!r}")

    def _fetch_source(self, req: P.RedistReq, holder: Optional[P.AgentInfo], src: int, off: int, n: int) -> bytes:
        if holder is None:
            raise AgentError("no source", f"no agent holds source rank {src}")
        if holder.agent_id == self.agent_id:
            return self.snapshot_slice(req.app_id, req.epoch, src, req.region_id, off, n)
        reply = self.pool.call((holder.host, holder.port),
                               P.PeerFetch(req.app_id, req.epoch, src, req.region_id, off, n, self.snapshot_timeout),
                               timeout=self.snapshot_timeout + 10, expect=P.PeerData)
        if crc32(reply.data) != reply.crc:
            raise AgentError("integrity", f"peer data for rank {src} fails its checksum")
        with self._lock:
            self.counters.bytes_moved += len(reply.data)
        return reply.data

    # --- flush & migration ---------------------------------------------------

    def flush(self, order: P.FlushOrder) -> P.FlushAck:
        ack = P.FlushAck(order.app_id, order.epoch, order.version, self.agent_id, list(order.ranks), False, False, "")
        if self.pfs is None:
            ack.reason = "agent has no PFS root"
            return ack
        keys = self.store.keys(lambda k: k[0] == order.app_id and k[1] == order.epoch
                               and k[2] == order.version and k[3] in order.ranks)
        if {k[3] for k in keys} != set(order.ranks):
            ack.reason = f"missing ranks {sorted(set(order.ranks) - {k[3] for k in keys})}"
            return ack
        entries = []
        for k in keys:
            e = self.store.get(k)
            if e.data is None:
                continue  # already only on PFS
            entries.append((k[3], e.meta, self.store.read(k)))
        try:
            if entries:
                self.pfs.write_version(order.app_id, order.app_name, order.world_size, order.epoch,
                                       order.version, entries, before_manifest=self.pfs_fault)
        except Exception as exc:
            ack.reason = f"I/O failure: {exc}"
            return ack
        for k in keys:
            e = self.store.get(k)
            if e.level is StorageLevel.MEMORY:
                self.store.set_level(k, StorageLevel.BOTH)
            if order.evict and e.data is not None:
                self.store.set_level(k, StorageLevel.PFS)
        ack.ok = True
        ack.evicted = order.evict
        return ack

    def migrate_out(self, order: P.MigrateOrder) -> P.MigrateAck:
        """Copy every entry of ``order.ranks`` to the target.

        Later commits for those ranks are refused. The local copies stay until
        the agent is shut down, which the controller does only after it has
        re-pointed the version locations at the target.
        """
        ack = P.MigrateAck(order.app_id, self.agent_id, order.target.agent_id, list(order.ranks), 0, False, "")
        target = (order.target.host, order.target.port)
        ranks = set(order.ranks)
        with self._migrate_lock:
            self.moved |= ranks
            keys = self.store.keys(lambda k: k[0] == order.app_id and k[3] in ranks)
        try:
            for k in sorted(keys, key=lambda k: (k[1], k[2], k[3], k[4])):
                e = self.store.get(k)
                if e is None:
                    continue
                # entries only on PFS need no copy: the target loads them from there
                if e.data is not None and not self._send_entry(target, k, e):
                    ack.reason = f"target rejected entry {k} twice"
                    break
                ack.entries += 1
            else:
                ack.ok = True
        except (AgentError, OSError, P.ProtocolError) as exc:
            ack.reason = f"migration failed: {exc}"
        if not ack.ok:
            with self._migrate_lock:
                self.moved -= ranks
        return ack

    def _send_entry(self, target: Address, key: Key, e: Entry) -> bool:
        m = e.meta
        rs = P.RegionSum(m.region_id, m.elem_size, m.count, int(m.scheme), m.total_n, m.size, m.crc)
        for attempt in range(2):
            data = e.data
            if self.corrupt_next_migration and data:
                self.corrupt_next_migration = False
                data = bytes([data[0] ^ 0xFF]) + data[1:]
            try:
                self.pool.call(target, P.MigrateStream(key[0], key[1], key[2], key[3], rs, int(e.level), data))
                return True
            except RemoteError as exc:
                if exc.kind != "integrity":
                    raise AgentError("migrate", str(exc)) from exc
                with self._lock:
                    self.counters.migrations_retried += 1
        return False

    def migrate_in(self, msg: P.MigrateStream) -> P.Ok:
        r = msg.region
        meta = RegionMeta(r.region_id, r.elem_size, r.count, DistributionScheme(r.scheme), r.total_n, r.size, r.crc)
        level = StorageLevel(msg.level)
        if crc32(msg.data) != meta.crc:
            raise AgentError("integrity", f"migrated entry rank {msg.rank} {r.region_id!r} fails its checksum")
        self.store.put((msg.app_id, msg.epoch, msg.version, msg.rank, r.region_id), msg.data, meta, level)
        self.ranks.add(msg.rank)
        with self._lock:
            self.counters.bytes_moved += len(msg.data)
        return P.Ok("migrated")

    def stats(self) -> P.AgentStats:
        c = self.counters
        return P.AgentStats(self.agent_id, self.store.bytes_staged, c.bytes_moved, c.plans_computed,
                            c.plans_pushed_used, c.directory_queries, len(self.store))


def _stream(data: bytes, make):
    if not data:
        yield make(0, b"", True)
        return
    view = memoryview(data)
    for off in range(0, len(data), CHUNK):
        chunk = bytes(view[off : off + CHUNK])
        yield make(off, chunk, off + CHUNK >= len(data))


class _AgentConnection:
    """Per-connection protocol state (at most one transfer in progress)."""

    def __init__(self, agent: Agent):
        self.agent = agent
        self.pending: Optional[PendingTransfer] = None

    def __call__(self, msg: P.Message):
        a = self.agent
        try:
            return self._dispatch(a, msg)
        except AgentError as exc:
            return P.Error(exc.kind, str(exc))

    def _dispatch(self, a: Agent, msg: P.Message):
        if isinstance(msg, P.CommitData):
            if self.pending is not None:
                a.data(self.pending, msg)
            return None
        if isinstance(msg, P.CommitBegin):
            self.pending = a.begin(msg, snapshot=False)
            return None
        if isinstance(msg, P.SnapshotPush):
            self.pending = a.begin(msg, snapshot=True)
            return None
        if isinstance(msg, P.CommitEnd):
            pending, self.pending = self.pending, None
            if pending is None:
                return P.CommitAck(msg.version, msg.rank, P.ACK_FAILED, "no transfer in progress")
            return a.end(pending)
        if isinstance(msg, P.Connect):
            a.ranks.add(msg.rank)
            return P.Ok(f"agent {a.agent_id}")
        if isinstance(msg, P.MemRegister):
            a.registered[(msg.app_id, msg.rank)] = {r.region_id: r for r in msg.regions}
            return P.Ok("registered")
        if isinstance(msg, P.RestoreReq):
            return a.restore(msg)
        if isinstance(msg, P.RedistReq):
            return a.redistribute(msg)
        if isinstance(msg, P.PeerFetch):
            data = a.snapshot_slice(msg.app_id, msg.epoch, msg.rank, msg.region_id, msg.offset, msg.length,
                                    timeout=msg.timeout)
            with a._lock:
                a.counters.bytes_moved += len(data)
            return P.PeerData(crc32(data), data)
        if isinstance(msg, P.PlanPush):
            a.accept_plan(msg)
            return P.Ok("plan")
        if isinstance(msg, P.Purge):
            return P.Ok(str(a.purge(msg.app_id, msg.epoch, msg.below_version)))
        if isinstance(msg, P.FlushOrder):
            return a.flush(msg)
        if isinstance(msg, P.MigrateOrder):
            return a.migrate_out(msg)
        if isinstance(msg, P.MigrateStream):
            return a.migrate_in(msg)
        if isinstance(msg, P.AgentStatsQuery):
            return a.stats()
        return P.Error("protocol", f"agent does not handle {msg.name}")


def run_agent_process(kwargs: dict, pipe) -> None:
    """Entry point for agents launched as separate processes."""
    logging.basicConfig(level=logging.WARNING)
    agent = Agent(**kwargs).start()
    pipe.send(agent.address)
    stop = threading.Event()
    try:
        pipe.recv()  # any message or EOF ends the agent
    except EOFError:
        pass
    stop.set()
    agent.stop()
