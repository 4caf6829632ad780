"""Application-side library: init, region registration, non-blocking commits,
restart, redistribution, agent probing and finalize."""

from __future__ import annotations

import csv
import enum
import logging
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from . import protocol as P
from .layout import Layout, owned_count
from .model import DistributionScheme, ICheckError, InvalidArgument, ProcessType, crc32
from .pfs import PfsTier
from .transport import Address, Connection, ConnectionClosed, ConnectionPool, RemoteError, Throttle

log = logging.getLogger(__name__)

CHUNK = 4 * 1024 * 1024
MAX_RELOCATIONS = 3


class CommitError(ICheckError):
    """A previous asynchronous commit was refused or lost."""


class RestartError(ICheckError):
    pass


class RedistributionError(ICheckError):
    pass


class SessionCrashed(ICheckError):
    pass


class Mode(enum.Enum):
    ASYNC = "ASYNC"
    SYNC = "SYNC"


def _addr(text: str) -> Address:
    host, _, port = text.rpartition(":")
    return (host or "127.0.0.1", int(port))


@dataclass
class ClientConfig:
    controller: Address = ("127.0.0.1", 7600)
    sync: bool = False
    retries: int = 1
    throttle: Optional[float] = None
    launch_id: int = 0
    timeout: float = 600.0
    restart_attempts: int = 20

    @classmethod
    def from_env(cls, env=None, **overrides) -> "ClientConfig":
        env = os.environ if env is None else env
        cfg = cls()
        if env.get("ICHECK_CONTROLLER"):
            cfg.controller = _addr(env["ICHECK_CONTROLLER"])
        if env.get("ICHECK_SYNC"):
            cfg.sync = env["ICHECK_SYNC"].lower() in ("1", "true", "yes", "sync")
        if env.get("ICHECK_RETRIES"):
            cfg.retries = int(env["ICHECK_RETRIES"])
        if env.get("ICHECK_THROTTLE"):
            cfg.throttle = float(env["ICHECK_THROTTLE"]) or None
        if env.get("ICHECK_LAUNCH_ID"):
            cfg.launch_id = int(env["ICHECK_LAUNCH_ID"])
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg


@dataclass
class CommitStats:
    commit: int
    version: int
    t_copy: float
    t_blocked: float = 0.0
    t_transfer: float = 0.0
    mode: Mode = Mode.ASYNC
    ok: Optional[bool] = None


def export_csv(stats: Sequence[CommitStats], path) -> None:
    """Write ``commit,version,t_copy_us,t_blocked_us,t_transfer_us,mode`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["commit", "version", "t_copy_us", "t_blocked_us", "t_transfer_us", "mode"])
        for s in stats:
            w.writerow([s.commit, s.version, round(s.t_copy * 1e6), round(s.t_blocked * 1e6),
                        round(s.t_transfer * 1e6), s.mode.value])


def _bytes_view(buffer) -> memoryview:
    view = memoryview(buffer)
    if not view.c_contiguous:
        raise InvalidArgument("region buffers must be C-contiguous")
    return view.cast("B") if view.format != "B" or view.ndim != 1 else view


@dataclass
class Region:
    region_id: str
    buffer: object
    elem_size: int
    count: int
    scheme: DistributionScheme
    total_n: int
    staging: List[bytearray] = field(default_factory=list)

    @property
    def nbytes(self) -> int:
        return self.count * self.elem_size

    def view(self) -> memoryview:
        v = _bytes_view(self.buffer)
        if len(v) != self.nbytes:
            raise InvalidArgument(f"region {self.region_id!r}: buffer holds {len(v)} bytes, expected {self.nbytes}")
        return v

    def decl(self) -> P.RegionDecl:
        return P.RegionDecl(self.region_id, self.elem_size, self.count, int(self.scheme), self.total_n)


@dataclass
class _Job:
    index: int
    version: int
    epoch: int
    slots: Dict[str, memoryview]
    regions: Dict[str, Region]
    queued_at: float
    done: threading.Event = field(default_factory=threading.Event)
    stats: Optional[CommitStats] = None
    crash_after: Optional[int] = None
    hard_crash: bool = False


@dataclass
class AdaptWindow:
    epoch: int
    new_world: int
    prev_world: int
    old_agent: Optional[P.AgentInfo]
    new_agent: Optional[P.AgentInfo]
    generation: int
    next_version: int
    pushed: set = field(default_factory=set)


_ACTIVE: Dict[tuple, "Session"] = {}
_ACTIVE_LOCK = threading.Lock()


class Session:
    """One application rank's connection to the checkpoint service."""

    def __init__(self, name: str, rank: int, world_size: int, process_type: ProcessType, config: ClientConfig):
        self.name = name
        self.rank = rank
        self.world_size = world_size
        self.process_type = ProcessType(process_type)
        self.config = config
        self.app_id = 0
        self.epoch = 0
        self.generation = 0
        self.next_version = 1
        self.agent: Optional[P.AgentInfo] = None
        self.regions: Dict[str, Region] = {}
        self.stats: List[CommitStats] = []
        self.adapt: Optional[AdaptWindow] = None
        self.throttle = Throttle(config.throttle)
        self._ctl = ConnectionPool(timeout=config.timeout)
        self._conn: Optional[Connection] = None
        self._queue: "queue.Queue[Optional[_Job]]" = queue.Queue()
        self._inflight: Optional[_Job] = None
        self._cond = threading.Condition()
        self._deferred: Optional[CommitError] = None
        self._slot = 0
        self._commits = 0
        self._crash: Optional[tuple] = None
        self.crashed = False
        self.open = False
        self.last_probe_error: Optional[str] = None
        self._worker = threading.Thread(target=self._work, name=f"icheck-{name}-{rank}", daemon=True)

    # --- plumbing ------------------------------------------------------------

    def _call(self, msg, expect=None, timeout=None):
        try:
            return self._ctl.call(self.config.controller, msg, timeout=timeout or self.config.timeout, expect=expect)
        except (OSError, ConnectionClosed) as exc:
            raise ICheckError(f"controller {self.config.controller} unreachable: {exc}") from exc

    def _check_open(self) -> None:
        if self.crashed:
            raise SessionCrashed(f"rank {self.rank} crashed")
        if not self.open:
            raise ICheckError("session is not initialized or already finalized")

    def _agent_for(self, assignments: Sequence[P.AgentInfo], rank: int) -> Optional[P.AgentInfo]:
        for a in assignments:
            if rank in a.ranks:
                return a
        return None

    def _connect(self, agent: P.AgentInfo, epoch: int) -> Connection:
        conn = Connection.connect((agent.host, agent.port), throttle=self.throttle)
        try:
            conn.call(P.Connect(self.app_id, self.rank, epoch), timeout=30.0, expect=P.Ok)
            if self.regions:
                conn.call(P.MemRegister(self.app_id, self.rank, epoch, [r.decl() for r in self.regions.values()]),
                          timeout=30.0, expect=P.Ok)
        except BaseException:
            conn.close()
            raise
        return conn

    def _switch_agent(self, agent: P.AgentInfo, epoch: int) -> None:
        conn = self._connect(agent, epoch)
        old, self._conn, self.agent = self._conn, conn, agent
        if old is not None:
            old.close()

    def _register_regions(self) -> None:
        self._conn.call(P.MemRegister(self.app_id, self.rank, self.epoch, [r.decl() for r in self.regions.values()]),
                        timeout=30.0, expect=P.Ok)

    # --- init ----------------------------------------------------------------

    def _init(self, region_hints: Sequence[P.RegionDesc] = ()) -> None:
        ack = self._call(P.Register(self.name, self.rank, self.world_size, int(self.process_type),
                                    self.config.launch_id, list(region_hints)), expect=P.RegisterAck)
        self.app_id = ack.app_id
        self.generation = ack.generation
        self.next_version = ack.next_version
        agent = self._agent_for(ack.assignments, self.rank)
        if agent is None:
            raise ICheckError(f"no agent assigned to rank {self.rank}")
        if self.process_type is ProcessType.JOINING:
            self.world_size = ack.world_size
            self.epoch = ack.epoch
            self.adapt = AdaptWindow(ack.epoch, ack.world_size, ack.prev_world_size, None, agent,
                                     ack.generation, ack.next_version)
        else:
            self.epoch = ack.epoch
            if ack.world_size != self.world_size:
                raise ICheckError(f"controller reports world size {ack.world_size}, expected {self.world_size}")
        self._switch_agent(agent, self.epoch)
        self.open = True
        self._worker.start()

    # --- regions -------------------------------------------------------------

    def add_adapt(self, region_id: str, buffer, count: int, elem_size: int,
                  scheme=DistributionScheme.BLOCK, total_n: Optional[int] = None) -> None:
        self._check_open()
        if region_id in self.regions:
            raise InvalidArgument(f"region {region_id!r} already added")
        if elem_size < 1 or count < 0:
            raise InvalidArgument("elem_size must be >= 1 and count >= 0")
        scheme = DistributionScheme.parse(scheme)
        if total_n is None and self.world_size == 1:
            total_n = count
        if total_n is not None:
            expected = owned_count(Layout(total_n, self.world_size, scheme), self.rank)
            if count != expected:
                raise InvalidArgument(f"region {region_id!r}: rank {self.rank} owns {expected} of {total_n} "
                                      f"elements under {scheme.name}, got count {count}")
        region = Region(region_id, buffer, elem_size, count, scheme, total_n or 0)
        region.view()
        region.staging = [bytearray(region.nbytes), bytearray(region.nbytes)]
        self._drain()
        self.regions[region_id] = region
        self._register_regions()

    # --- commits -------------------------------------------------------------

    def _raise_deferred(self) -> None:
        with self._cond:
            err, self._deferred = self._deferred, None
        if err is not None:
            raise err

    def _drain(self, timeout: Optional[float] = None) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while self._inflight is not None:
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    return False
                self._cond.wait(left)
        return True

    def inject_crash(self, after_bytes: int, hard: bool = False) -> None:
        """Make the next commit stop after ``after_bytes`` data bytes, as if the rank died."""
        self._crash = (after_bytes, hard)

    def commit(self) -> CommitStats:
        self._check_open()
        if not self.regions:
            raise ICheckError("no regions registered")
        if self.adapt is not None:
            raise ICheckError("commit inside an adaptation window")
        self._raise_deferred()
        t0 = time.perf_counter()
        slot = self._slot
        self._slot ^= 1
        slots = {}
        for rid, r in self.regions.items():
            dst = memoryview(r.staging[slot])
            dst[:] = r.view()
            slots[rid] = dst
        t_copy = time.perf_counter() - t0
        mode = Mode.SYNC if self.config.sync else Mode.ASYNC
        job = _Job(self._commits, self.next_version, self.epoch, slots, dict(self.regions), 0.0)
        job.stats = CommitStats(self._commits, self.next_version, t_copy, mode=mode)
        if self._crash is not None:
            job.crash_after, job.hard_crash = self._crash
            self._crash = None
        self._commits += 1
        self.next_version += 1
        with self._cond:
            while self._inflight is not None:  # back-pressure: one transfer in flight
                self._cond.wait()
            self._inflight = job
        job.queued_at = time.perf_counter()
        self._queue.put(job)
        if mode is Mode.SYNC:
            job.done.wait()
        job.stats.t_blocked = time.perf_counter() - t0
        self.stats.append(job.stats)
        if mode is Mode.SYNC:
            self._raise_deferred()
        return job.stats

    def _work(self) -> None:
        while True:
            job = self._queue.get()
            if job is None:
                return
            try:
                self._transfer(job)
            except SessionCrashed:
                pass
            except Exception as exc:
                log.debug("commit of version %d failed", job.version, exc_info=True)
                with self._cond:
                    self._deferred = CommitError(f"version {job.version}: {exc}")
                job.stats.ok = False
            finally:
                job.stats.t_transfer = time.perf_counter() - job.queued_at
                with self._cond:
                    self._inflight = None
                    self._cond.notify_all()
                job.done.set()

    def _transfer(self, job: _Job) -> None:
        """Send one version; integrity failures are retried, agent changes are followed."""
        integrity_left = max(0, self.config.retries)
        moves_left = MAX_RELOCATIONS
        while True:
            try:
                ack = self._send_commit(job)
            except (OSError, ConnectionClosed) as exc:
                # the agent went away: ask the controller where this rank lives now
                before = self.agent.agent_id if self.agent else None
                if moves_left == 0 or self._follow_migration() == before:
                    raise
                moves_left -= 1
                log.info("rank %d: agent %s unreachable (%s), resending to agent %d", self.rank, before, exc,
                         self.agent.agent_id)
                continue
            if ack.status == P.ACK_OK:
                job.stats.ok = True
                return
            if ack.status == P.ACK_FAILED and ack.reason.startswith("moved") and moves_left:
                moves_left -= 1
                self._follow_migration()
                continue
            if ack.status != P.ACK_INTEGRITY or integrity_left == 0:
                raise CommitError(f"version {job.version} refused: {ack.reason}")
            integrity_left -= 1

    def _follow_migration(self) -> Optional[int]:
        """Wait for new assignments from the controller and connect to this rank's agent; returns its id."""
        reply = self._call(P.ProbeAgents(self.app_id, self.rank, self.generation, True), expect=P.ProbeAgentsAck)
        self.generation = reply.generation
        agent = self._agent_for(reply.assignments, self.rank)
        if agent is not None:
            self._switch_agent(agent, self.epoch)
        return self.agent.agent_id if self.agent else None

    def _send_commit(self, job: _Job) -> P.CommitAck:
        sums = []
        for rid, r in job.regions.items():
            data = job.slots[rid]
            sums.append(P.RegionSum(rid, r.elem_size, r.count, int(r.scheme), r.total_n, len(data), crc32(data)))
        conn = self._conn
        conn.send(P.CommitBegin(self.app_id, job.epoch, job.version, self.rank, sums))
        sent = 0
        for rid, data in job.slots.items():
            for off in range(0, max(len(data), 1), CHUNK):
                piece = data[off : off + CHUNK]
                if job.crash_after is not None and sent + len(piece) >= job.crash_after:
                    cut = job.crash_after - sent
                    if cut > 0:
                        conn.send(P.CommitData(rid, off, piece[:cut]))
                    self._die(job.hard_crash)
                conn.send(P.CommitData(rid, off, piece))
                sent += len(piece)
        conn.send(P.CommitEnd(self.app_id, job.version, self.rank))
        reply = conn.recv(timeout=self.config.timeout)
        if isinstance(reply, P.Error):
            raise RemoteError(reply.kind, reply.reason)
        if not isinstance(reply, P.CommitAck):
            raise P.ProtocolError("msg_type", f"expected CommitAck, got {reply.name}")
        return reply

    def _die(self, hard: bool) -> None:
        if hard:
            os._exit(137)
        self.crash()
        raise SessionCrashed(f"rank {self.rank} crashed mid-commit")

    def crash(self) -> None:
        """Drop every connection without cleanup, like a killed process."""
        self.crashed = True
        self.open = False
        if self._conn is not None:
            self._conn.abort()
        self._ctl.close()
        with _ACTIVE_LOCK:
            _ACTIVE.pop((self.name, self.rank), None)

    # --- restart -------------------------------------------------------------

    def restart(self) -> bool:
        self._check_open()
        self._drain()
        last_exc = None
        for attempt in range(self.config.restart_attempts):
            info = self._call(P.RestartQuery(self.app_id, self.name), expect=P.RestartInfo)
            if not info.found or info.epoch != self.epoch or info.world_size != self.world_size:
                return False
            try:
                data = self._fetch_all(info)
            except (RemoteError, OSError, ConnectionClosed, FileNotFoundError) as exc:
                # locations may be changing under a migration; ask again
                last_exc = exc
                time.sleep(0.05 * (attempt + 1))
                continue
            for rid, blob in data.items():
                self.regions[rid].view()[:] = blob
            self.next_version = max(self.next_version, info.version + 1)
            return True
        raise RestartError(f"restart of rank {self.rank} failed: {last_exc}")

    def _fetch_all(self, info: P.RestartInfo) -> Dict[str, bytes]:
        crcs = {(c.rank, c.region_id): c for c in info.checksums if c.rank == self.rank}
        loc = next((l for l in info.locations if l.rank == self.rank), None)
        if loc is None:
            raise RestartError(f"restart info has no location for rank {self.rank}")
        holder = next((a for a in info.assignments if a.agent_id == loc.agent_id), None)
        out = {}
        for rid, region in self.regions.items():
            expect = crcs.get((self.rank, rid))
            if expect is None:
                raise RestartError(f"checkpoint v{info.version} has no region {rid!r}")
            if expect.size != region.nbytes:
                raise RestartError(f"region {rid!r}: checkpoint holds {expect.size} bytes, buffer {region.nbytes}")
            if loc.agent_id == 0 or holder is None:
                blob = PfsTier(info.pfs_root).read(info.app_id, info.epoch, info.version, self.rank, rid)
            else:
                blob = self._stream((holder.host, holder.port),
                                    P.RestoreReq(info.app_id, info.epoch, info.version, self.rank, rid))
            if len(blob) != expect.size or crc32(blob) != expect.crc:
                raise RestartError(f"region {rid!r} of v{info.version} fails its checksum")
            out[rid] = blob
        return out

    def _stream(self, addr: Address, msg: P.Message) -> bytes:
        conn = Connection.connect(addr)
        try:
            conn.send(msg)
            buf = None
            while True:
                reply = conn.recv(timeout=self.config.timeout)
                if isinstance(reply, P.Error):
                    raise RemoteError(reply.kind, reply.reason)
                if buf is None:
                    buf = bytearray(reply.total)
                buf[reply.offset : reply.offset + len(reply.data)] = reply.data
                if reply.last:
                    if isinstance(reply, P.RestoreData) and crc32(buf) != reply.crc:
                        raise RemoteError("integrity", "restored bytes fail the agent's checksum")
                    return bytes(buf)
        finally:
            conn.close()

    # --- adaptation ----------------------------------------------------------

    def begin_adapt(self, new_world_size: int) -> AdaptWindow:
        """Enter an adaptation window (initial ranks); joining ranks are already inside one."""
        self._check_open()
        if self.adapt is not None:
            return self.adapt
        self._drain()
        self._raise_deferred()
        ack = self._call(P.AdaptBegin(self.app_id, self.rank, new_world_size), expect=P.RegisterAck)
        self.adapt = AdaptWindow(ack.epoch, ack.world_size, ack.prev_world_size, self.agent,
                                 self._agent_for(ack.assignments, self.rank), ack.generation, ack.next_version)
        return self.adapt

    def redistribute(self, region_id: str, buffer, new_count: int, scheme=DistributionScheme.BLOCK) -> None:
        self._check_open()
        w = self.adapt
        if w is None:
            raise RedistributionError("redistribute outside an adaptation window")
        region = self.regions.get(region_id)
        if region is None:
            raise InvalidArgument(f"unknown region {region_id!r}")
        if not region.total_n:
            raise RedistributionError(f"region {region_id!r}: total element count unknown, pass total_n")
        scheme = DistributionScheme.parse(scheme)
        old = Layout(region.total_n, w.prev_world, region.scheme)
        new = Layout(region.total_n, w.new_world, scheme)
        expected = owned_count(new, self.rank) if self.rank < w.new_world else 0
        if new_count != expected:
            raise InvalidArgument(f"region {region_id!r}: rank {self.rank} owns {expected} elements in the new "
                                  f"layout, got {new_count}")
        if self.process_type is ProcessType.INITIAL and region_id not in w.pushed:
            self._push_snapshot(w, region)
            w.pushed.add(region_id)
        if self.rank < w.new_world:
            req = P.RedistReq(self.app_id, w.epoch, region_id, region.elem_size, P.to_layout_spec(old),
                              P.to_layout_spec(new), self.rank)
            try:
                blob = self._stream((w.new_agent.host, w.new_agent.port), req)
            except RemoteError as exc:
                raise RedistributionError(f"{exc.kind}: {exc.reason}") from exc
            view = _bytes_view(buffer)
            if len(blob) != new_count * region.elem_size or len(view) != len(blob):
                raise RedistributionError(f"region {region_id!r}: got {len(blob)} bytes, buffer holds {len(view)}")
            view[:] = blob
        region.buffer = buffer
        region.count = new_count
        region.scheme = scheme
        region.staging = [bytearray(region.nbytes), bytearray(region.nbytes)]

    def _push_snapshot(self, w: AdaptWindow, region: Region) -> None:
        data = bytes(region.view())
        rs = P.RegionSum(region.region_id, region.elem_size, region.count, int(region.scheme), region.total_n,
                         len(data), crc32(data))
        conn = self._connect(w.old_agent, self.epoch)
        try:
            conn.send(P.SnapshotPush(self.app_id, w.epoch, self.rank, [rs]))
            for off in range(0, max(len(data), 1), CHUNK):
                conn.send(P.CommitData(region.region_id, off, data[off : off + CHUNK]))
            conn.send(P.CommitEnd(self.app_id, 0, self.rank))
            ack = conn.recv(timeout=self.config.timeout)
        finally:
            conn.close()
        if isinstance(ack, P.Error) or ack.status != P.ACK_OK:
            raise RedistributionError(f"snapshot of {region.region_id!r} refused: {getattr(ack, 'reason', ack)}")

    def commit_adapt(self) -> None:
        """Leave the adaptation window; ranks outside the new world only finalize."""
        self._check_open()
        w = self.adapt
        if w is None:
            raise ICheckError("no adaptation in progress")
        if self.rank >= w.new_world:
            self.adapt = None
            self.world_size = w.new_world
            return
        ack = self._call(P.AdaptCommit(self.app_id, self.rank, w.epoch), expect=P.RegisterAck)
        self.adapt = None
        self.epoch = ack.epoch
        self.world_size = ack.world_size
        self.generation = ack.generation
        self.next_version = max(ack.next_version, self.next_version)
        self.process_type = ProcessType.INITIAL
        agent = self._agent_for(ack.assignments, self.rank)
        self._switch_agent(agent, self.epoch)

    # --- probing -------------------------------------------------------------

    def probe_agents(self) -> bool:
        self._check_open()
        self._drain()
        ack = self._call(P.ProbeAgents(self.app_id, self.rank, self.generation, False), expect=P.ProbeAgentsAck)
        if ack.change == P.NO_CHANGE:
            return False
        agent = self._agent_for(ack.assignments, self.rank)
        try:
            self._switch_agent(agent, self.epoch)
        except (OSError, ConnectionClosed, RemoteError) as exc:
            self.last_probe_error = f"reconnect to agent {agent.agent_id} failed: {exc}"
            log.warning("%s; keeping agent %d", self.last_probe_error, self.agent.agent_id)
            return False
        self.generation = ack.generation
        return True

    # --- finalize ------------------------------------------------------------

    def finalize(self, timeout: float = 600.0) -> List[CommitStats]:
        self._check_open()
        if not self._drain(timeout):
            job = self._inflight
            raise CommitError(f"finalize timed out; unacknowledged versions: {[job.version] if job else []}")
        self._queue.put(None)
        self._worker.join(5)
        self.open = False
        with _ACTIVE_LOCK:
            _ACTIVE.pop((self.name, self.rank), None)
        try:
            self._raise_deferred()
            if self.rank == 0 and self.process_type is ProcessType.INITIAL:
                self._call(P.Deregister(self.app_id))
        finally:
            if self._conn is not None:
                self._conn.close()
            self._ctl.close()
        return list(self.stats)

    def agent_ids(self) -> List[int]:
        return [self.agent.agent_id] if self.agent else []


# --- the flat API --------------------------------------------------------------


def icheck_init(name: str, rank: int, world_size: int, process_type=ProcessType.INITIAL,
                config: Optional[ClientConfig] = None, regions: Sequence[P.RegionDesc] = ()) -> Session:
    """Register (rank 0) or attach to the application and connect to this rank's agent.

    ``regions`` optionally announces region sizes up front so the controller
    can size the agent set before the first commit.
    """
    config = config or ClientConfig.from_env()
    key = (name, rank)
    with _ACTIVE_LOCK:
        if key in _ACTIVE:
            raise ICheckError(f"rank {rank} of {name!r} is already initialized in this process")
        session = Session(name, rank, world_size, process_type, config)
        _ACTIVE[key] = session
    try:
        session._init(regions)
    except RemoteError as exc:
        with _ACTIVE_LOCK:
            _ACTIVE.pop(key, None)
        raise ICheckError(f"registration rejected: {exc.reason}") from exc
    except BaseException:
        with _ACTIVE_LOCK:
            _ACTIVE.pop(key, None)
        raise
    return session


def icheck_add_adapt(session: Session, region_id: str, buffer, count: int, elem_size: int,
                     scheme=DistributionScheme.BLOCK, total_n: Optional[int] = None) -> None:
    session.add_adapt(region_id, buffer, count, elem_size, scheme, total_n)


def icheck_commit(session: Session) -> CommitStats:
    return session.commit()


def icheck_restart(session: Session) -> bool:
    return session.restart()


def icheck_redistribute(session: Session, region_id: str, buffer, new_count: int,
                        scheme=DistributionScheme.BLOCK) -> None:
    session.redistribute(region_id, buffer, new_count, scheme)


def icheck_probe_agents(session: Session) -> bool:
    return session.probe_agents()


def icheck_finalize(session: Session) -> List[CommitStats]:
    return session.finalize()
