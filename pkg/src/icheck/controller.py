"""Global view: application registry, agent placement, commit tracking, flush
orchestration and the resource-manager interactions."""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import deque
from pathlib import Path
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set, Tuple

from . import protocol as P
from .layout import Layout, redistribution_plan
from .model import (
    KEEP_VERSIONS,
    AgentAssignment,
    ApplicationRecord,
    CheckpointVersion,
    DistributionScheme,
    IdCounter,
    NodeStats,
    ProcessType,
    RegionDescriptor,
    RegionMeta,
    StorageLevel,
    gc_versions,
    validate_assignments,
)
from .policy import NodeView, PolicyConfig, SchedulingPolicy, place_many
from .transport import Address, ConnectionPool, RemoteError, Server

log = logging.getLogger("icheck.controller")


class ControllerError(Exception):
    def __init__(self, kind: str, reason: str):
        super().__init__(reason)
        self.kind = kind


@dataclass
class NodeEntry:
    node_id: str
    capacity: int = 0
    stats: Optional[NodeStats] = None
    owned: bool = False
    manager: Optional[Address] = None
    reclaiming: bool = False
    flush_inflight: Optional[Tuple[int, int, int]] = None
    flush_log: List[Tuple[float, float]] = field(default_factory=list)


@dataclass
class AgentEntry:
    agent_id: int
    app_id: int
    node_id: str
    host: str
    port: int
    ranks: frozenset
    share: float
    alive: bool = True
    retired: bool = False

    def info(self, ranks=None) -> P.AgentInfo:
        return P.AgentInfo(self.agent_id, self.node_id, self.host, self.port, sorted(self.ranks if ranks is None else ranks))

    def assignment(self) -> AgentAssignment:
        return AgentAssignment(self.agent_id, self.node_id, self.ranks, self.host, self.port)


@dataclass
class PendingAdapt:
    epoch: int
    new_world_size: int
    prev_world_size: int
    assignments: List[AgentAssignment]
    plans_pushed: bool = False
    committed: Set[int] = field(default_factory=set)


@dataclass
class AppState:
    record: ApplicationRecord
    launch_id: int = 0
    ready: bool = False
    active: bool = True
    generation: int = 1
    max_version: int = 0
    region_hints: List[P.RegionDesc] = field(default_factory=list)
    rate_reports: Dict[int, Dict[int, Tuple[int, float]]] = field(default_factory=dict)
    rate_version_min: int = 0
    pending: Optional[PendingAdapt] = None
    prev_assignments: Dict[int, List[AgentAssignment]] = field(default_factory=dict)
    reconfiguring: bool = False
    probe_round: int = 0
    probe_arrivals: Set[int] = field(default_factory=set)


def _info(a: AgentAssignment) -> P.AgentInfo:
    return P.AgentInfo(a.agent_id, a.node_id, a.host, a.port, sorted(a.ranks))


@dataclass
class ControllerConfig:
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    host: str = "127.0.0.1"
    port: int = 0
    pfs_root: str = "pfs"
    rm: Optional[Address] = None
    tick: float = 0.5
    node_wait: float = 10.0
    probe_wait: float = 30.0
    adapt_wait: float = 60.0

    @classmethod
    def load(cls, path) -> "ControllerConfig":
        with open(path) as fh:
            raw = json.load(fh)
        policy = PolicyConfig.from_dict(raw.pop("policy", {}))
        listen = raw.pop("listen", None)
        if listen:
            host, _, port = listen.rpartition(":")
            raw.setdefault("host", host)
            raw.setdefault("port", int(port))
        if raw.get("rm"):
            host, _, port = raw["rm"].rpartition(":")
            raw["rm"] = (host, int(port))
        return cls(policy=policy, **raw)


class Controller:
    def __init__(self, config: Optional[ControllerConfig] = None, policy: Optional[SchedulingPolicy] = None):
        self.config = config or ControllerConfig()
        self.config.pfs_root = str(Path(self.config.pfs_root).resolve())
        self.policy = policy or SchedulingPolicy(self.config.policy)
        self.nodes: Dict[str, NodeEntry] = {}
        self.apps: Dict[int, AppState] = {}
        self.agents: Dict[int, AgentEntry] = {}
        self.ids = IdCounter()
        self.agent_ids = IdCounter()
        self.outstanding_requests: Set[str] = set()
        self.events: deque = deque(maxlen=10000)
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._pool = ConnectionPool(timeout=600.0)
        self._stop = threading.Event()
        self.server: Optional[Server] = None

    # --- lifecycle -----------------------------------------------------------

    def start(self) -> "Controller":
        self.server = Server(lambda conn: self.handle, host=self.config.host, port=self.config.port,
                             name="controller").start()
        threading.Thread(target=self._tick_loop, name="controller-tick", daemon=True).start()
        self.event("start", addr=f"{self.address[0]}:{self.address[1]}")
        return self

    @property
    def address(self) -> Address:
        return self.server.address

    def stop(self) -> None:
        self._stop.set()
        if self.server is not None:
            self.server.stop()
        self._pool.close()

    def event(self, _event: str, **kv) -> None:
        self.events.append((time.time(), _event, kv))
        log.info("event=%s %s", _event, " ".join(f"{k}={v}" for k, v in kv.items()))

    def count_events(self, name: str) -> int:
        return sum(1 for _, n, _ in list(self.events) if n == name)

    def _tick_loop(self) -> None:
        while not self._stop.wait(self.config.tick):
            try:
                self.run_flushes(time.time())
            except Exception:
                log.exception("flush scheduling failed")

    # --- dispatch ------------------------------------------------------------

    def handle(self, msg: P.Message):
        try:
            return self._dispatch(msg)
        except ControllerError as exc:
            return P.Error(exc.kind, str(exc))

    def _dispatch(self, msg: P.Message):
        if isinstance(msg, P.CommitReport):
            return self.record_commit_report(msg)
        if isinstance(msg, P.StatsReport):
            return self.handle_stats(msg)
        if isinstance(msg, P.Register):
            return self.register(msg)
        if isinstance(msg, P.ProbeAgents):
            return self.handle_probe(msg)
        if isinstance(msg, P.RestartQuery):
            return self.restart_info(app_id=msg.app_id, name=msg.name)
        if isinstance(msg, P.VersionQuery):
            return self.version_status(msg.app_id, msg.version)
        if isinstance(msg, P.Deregister):
            with self._lock:
                self._app(msg.app_id).active = False
            self.event("deregister", app=msg.app_id)
            return P.Ok("deregistered")
        if isinstance(msg, P.AdaptBegin):
            return self.adapt_begin(msg.app_id, msg.new_world_size)
        if isinstance(msg, P.AdaptCommit):
            return self.adapt_commit(msg.app_id, msg.rank, msg.epoch)
        if isinstance(msg, P.DirectoryQuery):
            return self.directory(msg.app_id, msg.epoch)
        if isinstance(msg, P.NodeGrant):
            self.handle_node_grant(msg.nodes)
            return P.Ok("granted")
        if isinstance(msg, P.NodeReclaim):
            self.handle_node_reclaim(msg.nodes, msg.deadline)
            return P.Ok("reclaim scheduled")
        if isinstance(msg, P.MigrateHint):
            return P.Ok(self.handle_migrate_hint(msg.node_from, msg.node_to))
        if isinstance(msg, P.AppAdaptNotice):
            return P.Ok(self.handle_adapt_notice(msg.app_id, msg.name, msg.new_world_size, msg.epoch))
        if isinstance(msg, P.CapacityAlert):
            threading.Thread(target=self.request_nodes, args=(1, "memory"), daemon=True).start()
            return P.Ok("noted")
        return P.Error("protocol", f"controller does not handle {msg.name}")

    # --- helpers -------------------------------------------------------------

    def _app(self, app_id: int) -> AppState:
        app = self.apps.get(app_id)
        if app is None:
            raise ControllerError("unknown app", f"application {app_id} is not registered")
        return app

    def _app_by_name(self, name: str) -> Optional[AppState]:
        for app in self.apps.values():
            if app.record.name == name:
                return app
        return None

    def _node_views(self, exclude: Iterable[str] = ()) -> List[NodeView]:
        exclude = set(exclude)
        views = []
        for n in self.nodes.values():
            if not n.owned or n.manager is None or n.reclaiming or n.node_id in exclude:
                continue
            views.append(NodeView(n.node_id, n.capacity, self._projected_used(n)))
        return views

    def _projected_used(self, node: NodeEntry) -> float:
        reserved = sum(a.share for a in self.agents.values() if a.alive and a.node_id == node.node_id)
        used = 0.0
        if node.stats is not None:
            used = max(node.stats.mem_used, node.stats.mem_predicted)
        return max(used, reserved)

    def _total_bytes(self, app: AppState) -> int:
        v = app.record.latest_complete()
        if v is not None:
            return sum(m.size for m in v.regions.values())
        return sum(sum(r.count_per_rank) * r.elem_size for r in app.region_hints)

    def _region_layouts(self, app: AppState) -> List[Tuple[str, int, int, DistributionScheme]]:
        """(region_id, elem_size, total_n, scheme) for every known region."""
        v = app.record.latest_complete(app.record.adapt_epoch)
        out = {}
        if v is not None:
            for (_, rid), m in v.regions.items():
                out[rid] = (rid, m.elem_size, m.total_n, DistributionScheme(m.scheme))
        else:
            for r in app.region_hints:
                out[r.region_id] = (r.region_id, r.elem_size, sum(r.count_per_rank), DistributionScheme(r.scheme))
        return [out[k] for k in sorted(out)]

    def _assignment_infos(self, assignments: List[AgentAssignment]) -> List[P.AgentInfo]:
        return [_info(a) for a in assignments]

    def _ack(self, app: AppState, pending: Optional[PendingAdapt] = None) -> P.RegisterAck:
        rec = app.record
        if pending is not None:
            return P.RegisterAck(rec.app_id, pending.epoch, pending.new_world_size, pending.prev_world_size,
                                 app.max_version + 1, app.generation, self._assignment_infos(pending.assignments))
        return P.RegisterAck(rec.app_id, rec.adapt_epoch, rec.world_size, rec.world_size, app.max_version + 1,
                             app.generation, self._assignment_infos(rec.assignments))

    # --- placement -----------------------------------------------------------

    def _plan_agents(self, app: AppState, world_size: int, count: int, reuse: List[AgentEntry]):
        """Decide rank groups and nodes under the lock; returns (groups, reused, new placements) or None."""
        total = self._total_bytes(app)
        groups = self.policy.rank_groups(world_size, count)
        share_of = lambda g: total * len(g) / max(world_size, 1)
        reused = [a for a in reuse if a.alive][: len(groups)]
        fresh_groups = groups[len(reused):]
        shares = [share_of(g) for g in fresh_groups]
        nodes = place_many(self.policy, shares, self._node_views())
        if nodes is None:
            return None
        return groups, reused, list(zip(fresh_groups, nodes, shares))

    def _launch(self, app_id: int, placements) -> List[AgentEntry]:
        """Launch one agent per (ranks, node, share); returns the started entries."""
        by_node: Dict[str, List[Tuple[P.AgentSpec, float]]] = {}
        for ranks, node_id, share in placements:
            spec = P.AgentSpec(self.agent_ids.next(), app_id, list(ranks), self.nodes[node_id].capacity)
            by_node.setdefault(node_id, []).append((spec, share))
            with self._lock:
                # reserve before the manager answers so concurrent placements see it
                self.agents[spec.agent_id] = AgentEntry(spec.agent_id, app_id, node_id, "", 0, frozenset(ranks),
                                                        share, alive=True)
        started = []
        for node_id, specs in by_node.items():
            manager = self.nodes[node_id].manager
            order = P.LaunchAgents([s for s, _ in specs], self.address[0], self.address[1], str(self.config.pfs_root))
            try:
                ready = self._pool.call(manager, order, timeout=60.0, expect=P.AgentReady)
            except (OSError, RemoteError, P.ProtocolError) as exc:
                log.warning("launch on %s failed: %s", node_id, exc)
                ready = P.AgentReady(node_id, [], [s.agent_id for s, _ in specs])
            with self._lock:
                for info in ready.agents:
                    e = self.agents[info.agent_id]
                    e.host, e.port = info.host, info.port
                    started.append(e)
                    self.event("agent_launched", app=app_id, agent=info.agent_id, node=node_id,
                               ranks=f"{min(info.ranks)}-{max(info.ranks)}")
                for aid in ready.failed:
                    self.agents.pop(aid, None)
        return started

    def _build_assignments(self, app_id: int, world_size: int, count: int,
                           reuse: List[AgentEntry]) -> List[AgentAssignment]:
        """Assignments for ``world_size`` ranks over ``count`` agents, launching agents as needed."""
        for attempt in range(3):
            with self._lock:
                app = self._app(app_id)
                plan = self._plan_agents(app, world_size, count, reuse)
            if plan is None:
                if attempt == 2 or not self.request_nodes(1, "memory"):
                    raise ControllerError("capacity", "insufficient checkpoint capacity")
                continue
            groups, reused, placements = plan
            started = self._launch(app_id, placements)
            if len(started) != len(placements):
                with self._lock:
                    for e in started:
                        e.alive = False
                        self.agents.pop(e.agent_id, None)
                continue
            with self._lock:
                total = self._total_bytes(app)
                out = []
                for grp, agent in zip(groups, reused + started):
                    agent.ranks = frozenset(grp)
                    agent.share = total * len(grp) / max(world_size, 1)
                    out.append(agent.assignment())
                validate_assignments(out, world_size)
                return out
        raise ControllerError("capacity", "insufficient checkpoint capacity")

    def _current_agents(self, app: AppState) -> List[AgentEntry]:
        return [self.agents[a.agent_id] for a in app.record.assignments if a.agent_id in self.agents]

    # --- registration --------------------------------------------------------

    def register(self, msg: P.Register) -> P.RegisterAck:
        if msg.process_type == ProcessType.JOINING:
            return self._register_joining(msg)
        if msg.world_size < 1:
            raise ControllerError("invalid", "world_size must be >= 1")
        deadline = time.monotonic() + 60.0
        with self._cond:
            app = self._app_by_name(msg.name)
            if msg.rank != 0:
                while not (app is not None and app.launch_id == msg.launch_id and app.ready):
                    left = deadline - time.monotonic()
                    if left <= 0:
                        raise ControllerError("timeout", f"rank 0 of {msg.name!r} never registered")
                    self._cond.wait(left)
                    app = self._app_by_name(msg.name)
                return self._ack(app)
            if app is None:
                rec = ApplicationRecord(self.ids.next(), msg.name, msg.world_size)
                app = AppState(rec, launch_id=msg.launch_id, region_hints=list(msg.regions))
                self.apps[rec.app_id] = app
                self.event("register", app=rec.app_id, name=msg.name, world=msg.world_size)
            else:
                app.launch_id = msg.launch_id
                app.ready = False
                app.active = True
                if msg.regions:
                    app.region_hints = list(msg.regions)
                self.event("reattach", app=app.record.app_id, name=msg.name, world=msg.world_size)
            current = self._current_agents(app)
            reusable = (app.record.world_size == msg.world_size and current
                        and all(a.alive for a in current))
            app_id = app.record.app_id
        if not reusable:
            count = self.policy.agent_count(self._total_bytes(app), msg.world_size)
            try:
                assignments = self._build_assignments(app_id, msg.world_size, count, [])
            except ControllerError:
                with self._lock:
                    if not app.record.versions:
                        self.apps.pop(app_id, None)
                raise
            with self._cond:
                old = self._current_agents(app)
                app.record.world_size = msg.world_size
                app.record.assignments = assignments
                app.generation += 1
                self._retire([a for a in old if a.agent_id not in {x.agent_id for x in assignments}])
        with self._cond:
            app.ready = True
            self._cond.notify_all()
            return self._ack(app)

    def _register_joining(self, msg: P.Register) -> P.RegisterAck:
        deadline = time.monotonic() + 60.0
        with self._cond:
            while True:
                app = self._app_by_name(msg.name)
                if app is not None and app.pending is not None:
                    return self._ack(app, app.pending)
                if app is not None and app.record.world_size == msg.world_size:
                    # adaptation already committed by the initial processes
                    return self._ack(app)
                left = deadline - time.monotonic()
                if app is not None and left < 55.0:
                    break
                if left <= 0:
                    raise ControllerError("unknown app", f"no application {msg.name!r} to join")
                self._cond.wait(min(left, 0.2))
            app_id = app.record.app_id
        pending = self._prepare_adapt(app_id, msg.world_size, push_plans=False)
        with self._lock:
            return self._ack(self._app(app_id), pending)

    # --- commits -------------------------------------------------------------

    def record_commit_report(self, msg: P.CommitReport) -> P.Message:
        metas = [RegionMeta(r.region_id, r.elem_size, r.count, DistributionScheme(r.scheme), r.total_n, r.size, r.crc)
                 for r in msg.regions]
        return self.record_commit(msg.app_id, msg.epoch, msg.version, msg.rank, msg.agent_id, metas,
                                  msg.nbytes, msg.duration)

    def record_commit(self, app_id: int, epoch: int, version: int, rank: int, agent_id: int,
                      metas: List[RegionMeta], nbytes: int = 0, duration: float = 0.0) -> P.Purge:
        retire = []
        with self._cond:
            app = self._app(app_id)
            rec = app.record
            v = rec.find_version(version)
            if v is None:
                if app.pending is not None and epoch == app.pending.epoch:
                    world = app.pending.new_world_size
                else:
                    world = rec.world_size
                v = CheckpointVersion(version, epoch, world)
                rec.versions.append(v)
                rec.versions.sort(key=lambda x: x.version)
            if v.adapt_epoch != epoch or not 0 <= rank < v.world_size:
                raise ControllerError("invalid", f"commit for v{version} rank {rank} epoch {epoch} does not "
                                                 f"match version epoch {v.adapt_epoch}")
            app.max_version = max(app.max_version, version)
            if version >= app.rate_version_min:
                app.rate_reports.setdefault(version, {})[rank] = (nbytes, duration)
            if v.mark(rank, agent_id, metas):
                self.event("complete", app=app_id, version=version, epoch=epoch)
                removed = gc_versions(rec.versions, KEEP_VERSIONS)
                for old in removed:
                    app.rate_reports.pop(old.version, None)
                    self.event("gc", app=app_id, version=old.version)
                retire = self._retire_candidates(app)
                self._cond.notify_all()
            below = self._purge_horizon(rec, epoch)
        for a in retire:
            self._shutdown_agent(a)
        return P.Purge(app_id, epoch, below)

    def _purge_horizon(self, rec: ApplicationRecord, epoch: int) -> int:
        complete = sorted(v.version for v in rec.versions if v.adapt_epoch == epoch and v.complete)
        if len(complete) < KEEP_VERSIONS:
            return 0
        return complete[-KEEP_VERSIONS]

    def version_status(self, app_id: int, version: int) -> P.VersionStatus:
        with self._lock:
            v = self._app(app_id).record.find_version(version)
            return P.VersionStatus(version, bool(v is not None and v.complete))

    def _retrievable(self, v: CheckpointVersion) -> bool:
        for r in range(v.world_size):
            level = v.storage_level.get(r)
            if level is not None and level.on_pfs:
                continue
            aid = v.locations.get(r)
            if aid is None or aid not in self.agents or not self.agents[aid].alive:
                return False
        return True

    def restart_info(self, app_id: int = 0, name: str = "") -> P.RestartInfo:
        with self._lock:
            app = self.apps.get(app_id) if app_id else self._app_by_name(name)
            if app is None:
                return P.RestartInfo(found=False, pfs_root=str(self.config.pfs_root))
            rec = app.record
            best = None
            for v in rec.versions:
                if v.complete and self._retrievable(v) and (best is None or v.version > best.version):
                    best = v
            if best is None:
                return P.RestartInfo(found=False, app_id=rec.app_id, epoch=rec.adapt_epoch,
                                     world_size=rec.world_size, pfs_root=str(self.config.pfs_root))
            locs, holders = [], {}
            for r in range(best.world_size):
                aid = best.locations.get(r)
                alive = aid is not None and aid in self.agents and self.agents[aid].alive
                level = best.storage_level.get(r, StorageLevel.MEMORY)
                locs.append(P.RankLocation(r, aid if alive else 0, int(level)))
                if alive:
                    holders.setdefault(aid, []).append(r)
            return P.RestartInfo(
                found=True,
                app_id=rec.app_id,
                version=best.version,
                epoch=best.adapt_epoch,
                world_size=best.world_size,
                regions=[P.RegionDesc(d.region_id, d.elem_size, int(d.scheme), list(d.count_per_rank))
                         for d in best.region_descriptors()],
                assignments=[self.agents[aid].info(ranks) for aid, ranks in sorted(holders.items())],
                locations=locs,
                checksums=[P.RankChecksum(r, rid, best.regions[(r, rid)].size, crc)
                           for (r, rid), crc in sorted(best.checksums.items())],
                pfs_root=str(self.config.pfs_root),
            )

    # --- probing -------------------------------------------------------------

    def observed_rate(self, app: AppState) -> Optional[float]:
        """Aggregate bytes/sec of the newest complete version measured on the current agent set."""
        for v in sorted(app.record.versions, key=lambda x: -x.version):
            if v.version < app.rate_version_min or not v.complete:
                continue
            reports = app.rate_reports.get(v.version, {})
            if len(reports) < v.world_size:
                continue
            total = sum(b for b, _ in reports.values())
            span = max(d for _, d in reports.values())
            return total / span if span > 0 else float("inf")
        return None

    def handle_probe(self, msg: P.ProbeAgents) -> P.ProbeAgentsAck:
        """Collective probe: every rank calls it; the last arrival decides for all."""
        deadline = time.monotonic() + self.config.probe_wait
        with self._cond:
            app = self._app(msg.app_id)
            if msg.refresh_only:
                while app.generation == msg.generation and time.monotonic() < deadline:
                    self._cond.wait(0.1)
                return self._probe_reply(app, msg.generation)
            rnd = app.probe_round
            app.probe_arrivals.add(msg.rank)
            if len(app.probe_arrivals) < app.record.world_size:
                while app.probe_round == rnd:
                    left = deadline - time.monotonic()
                    if left <= 0:
                        app.probe_arrivals.discard(msg.rank)
                        return self._probe_reply(app, msg.generation)
                    self._cond.wait(min(left, 0.5))
                return self._probe_reply(app, msg.generation)
            app.probe_arrivals = set()
            decision = self._probe_decision(app)
        if decision is not None:
            self._reassign(app, *decision)
        with self._cond:
            app.probe_round += 1
            self._cond.notify_all()
            return self._probe_reply(app, msg.generation)

    def _probe_reply(self, app: AppState, generation: int) -> P.ProbeAgentsAck:
        change = P.NO_CHANGE if generation == app.generation else P.NEW_ASSIGNMENTS
        return P.ProbeAgentsAck(change, app.generation, self._assignment_infos(app.record.assignments))

    def _probe_decision(self, app: AppState) -> Optional[Tuple[int, float]]:
        if app.reconfiguring or app.pending is not None:
            return None
        current = len(app.record.assignments)
        rate = self.observed_rate(app)
        target = self.policy.probe(rate, current, app.record.world_size)
        self.event("probe", app=app.record.app_id, rate="na" if rate is None else f"{rate:.0f}",
                   agents=f"{current}->{target}")
        if target == current:
            return None
        app.reconfiguring = True
        return target, rate

    def _reassign(self, app: AppState, target: int, rate: float) -> None:
        with self._lock:
            reuse = self._current_agents(app)
            world = app.record.world_size
        try:
            assignments = self._build_assignments(app.record.app_id, world, target, reuse)
        except ControllerError as exc:
            self.event("reassign_failed", app=app.record.app_id, reason=exc)
            with self._lock:
                app.reconfiguring = False
            return
        with self._lock:
            self._install_assignments(app, assignments)
            app.reconfiguring = False

    def _install_assignments(self, app: AppState, assignments: List[AgentAssignment]) -> None:
        keep = {a.agent_id for a in assignments}
        dropped = [a for a in self._current_agents(app) if a.agent_id not in keep]
        app.record.assignments = assignments
        app.generation += 1
        app.rate_reports.clear()
        app.rate_version_min = app.max_version + 1
        self._retire(dropped)
        self.event("assignments", app=app.record.app_id, generation=app.generation, agents=len(assignments))

    def _retire(self, agents: List[AgentEntry]) -> None:
        for a in agents:
            a.retired = True
        for a in self._retire_candidates_all():
            threading.Thread(target=self._shutdown_agent, args=(a,), daemon=True).start()

    def _referenced(self, agent_id: int) -> bool:
        for app in self.apps.values():
            for v in app.record.versions:
                if agent_id in v.locations.values():
                    return True
        return False

    def _retire_candidates(self, app: AppState) -> List[AgentEntry]:
        out = []
        for a in self.agents.values():
            if a.app_id == app.record.app_id and a.retired and a.alive and not self._referenced(a.agent_id):
                if app.pending is not None and any(x.agent_id == a.agent_id for x in app.pending.assignments):
                    continue
                a.alive = False
                out.append(a)
        return out

    def _retire_candidates_all(self) -> List[AgentEntry]:
        out = []
        for app in self.apps.values():
            out.extend(self._retire_candidates(app))
        return out

    def _shutdown_agent(self, a: AgentEntry) -> None:
        node = self.nodes.get(a.node_id)
        self.event("agent_retired", app=a.app_id, agent=a.agent_id, node=a.node_id)
        if node is None or node.manager is None:
            return
        try:
            self._pool.call(node.manager, P.Shutdown([a.agent_id]), timeout=30.0)
        except (OSError, RemoteError, P.ProtocolError):
            log.debug("shutdown of agent %d failed", a.agent_id, exc_info=True)

    # --- adaptation ----------------------------------------------------------

    def _prepare_adapt(self, app_id: int, new_world: int, push_plans: bool) -> PendingAdapt:
        with self._lock:
            app = self._app(app_id)
            if app.pending is not None:
                if app.pending.new_world_size == new_world:
                    return app.pending
                raise ControllerError("adapt", f"adaptation to {app.pending.new_world_size} already pending")
            rec = app.record
            current = self._current_agents(app)
            want = max(len(current), self.policy.agent_count(self._total_bytes(app), new_world))
            count = max(1, min(want, self.config.policy.max_agents_per_app, new_world))
            epoch = rec.adapt_epoch + 1
        assignments = self._build_assignments(app_id, new_world, count, current)
        with self._cond:
            if app.pending is not None:
                return app.pending
            pending = PendingAdapt(epoch, new_world, rec.world_size, assignments)
            app.pending = pending
            app.prev_assignments[epoch] = list(rec.assignments)
            self.event("adapt_pending", app=app_id, epoch=epoch, world=f"{rec.world_size}->{new_world}")
            layouts = self._region_layouts(app)
            self._cond.notify_all()
        if push_plans:
            self._push_plans(app, pending, layouts)
        return pending

    def _push_plans(self, app: AppState, pending: PendingAdapt, layouts) -> None:
        sources = self._assignment_infos(app.prev_assignments[pending.epoch])
        for rid, elem_size, total_n, scheme in layouts:
            old = Layout(total_n, pending.prev_world_size, scheme)
            new = Layout(total_n, pending.new_world_size, scheme)
            plan = redistribution_plan(old, new)
            for a in pending.assignments:
                runs = [P.Run(*t) for t in plan.transfers if t.dst_rank in a.ranks]
                msg = P.PlanPush(app.record.app_id, pending.epoch, rid, P.to_layout_spec(old), P.to_layout_spec(new),
                                 runs, sources)
                self._pool.call(a.endpoint, msg, timeout=30.0)
        pending.plans_pushed = True
        self.event("plans_pushed", app=app.record.app_id, epoch=pending.epoch, regions=len(layouts))

    def handle_adapt_notice(self, app_id: int, name: str, new_world: int, epoch: int = 0) -> str:
        with self._lock:
            app = self.apps.get(app_id) if app_id else self._app_by_name(name)
            if app is None:
                raise ControllerError("unknown app", f"application {app_id or name!r} is not registered")
            if new_world == app.record.world_size and app.pending is None:
                return "no-op"
            if epoch and epoch != app.record.adapt_epoch + 1:
                raise ControllerError("adapt", f"notice for epoch {epoch}, next epoch is {app.record.adapt_epoch + 1}")
            app_id = app.record.app_id
        self._prepare_adapt(app_id, new_world, push_plans=True)
        return "prestaged"

    def adapt_begin(self, app_id: int, new_world: int) -> P.RegisterAck:
        pending = self._prepare_adapt(app_id, new_world, push_plans=False)
        with self._lock:
            return self._ack(self._app(app_id), pending)

    def adapt_commit(self, app_id: int, rank: int, epoch: int) -> P.RegisterAck:
        """Barrier over the new world: the epoch switches once every new rank has redistributed."""
        deadline = time.monotonic() + self.config.adapt_wait
        with self._cond:
            app = self._app(app_id)
            rec = app.record
            p = app.pending
            if p is None or p.epoch != epoch:
                if rec.adapt_epoch == epoch:
                    return self._ack(app)
                raise ControllerError("adapt", f"no pending adaptation for epoch {epoch}")
            p.committed.add(rank)
            if len(p.committed) >= p.new_world_size:
                app.pending = None
                rec.world_size = p.new_world_size
                rec.adapt_epoch = p.epoch
                self._install_assignments(app, p.assignments)
                self.event("adapt_commit", app=app_id, epoch=epoch, world=rec.world_size)
                self._cond.notify_all()
                return self._ack(app)
            while rec.adapt_epoch != epoch:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise ControllerError("timeout", f"adaptation to epoch {epoch} did not complete")
                self._cond.wait(min(left, 0.5))
            return self._ack(app)

    def directory(self, app_id: int, epoch: int) -> P.Directory:
        with self._lock:
            app = self._app(app_id)
            if epoch in app.prev_assignments:
                return P.Directory(epoch, self._assignment_infos(app.prev_assignments[epoch]))
            raise ControllerError("missing", f"no adaptation to epoch {epoch}")

    # --- monitoring ----------------------------------------------------------

    def handle_stats(self, msg: P.StatsReport) -> P.Ok:
        s = msg.stats
        dead = []
        with self._cond:
            node = self.nodes.setdefault(s.node_id, NodeEntry(s.node_id))
            node.capacity = s.mem_capacity
            node.manager = (msg.host, msg.port)
            node.stats = NodeStats(s.node_id, s.mem_capacity, s.mem_used, s.bw_used, s.mem_predicted,
                                   s.bw_predicted, s.sample_time)
            for aid in msg.dead_agents:
                a = self.agents.get(aid)
                if a is not None and a.alive:
                    a.alive = False
                    dead.append(a)
                    self.event("agent_dead", agent=aid, node=s.node_id, app=a.app_id)
            self._cond.notify_all()
        for a in dead:
            threading.Thread(target=self._replace_dead_agent, args=(a,), daemon=True).start()
        return P.Ok("stats")

    def _replace_dead_agent(self, dead: AgentEntry) -> None:
        with self._lock:
            app = self.apps.get(dead.app_id)
            if app is None or dead.retired or not any(a.agent_id == dead.agent_id for a in app.record.assignments):
                return
            reuse = [a for a in self._current_agents(app) if a.alive]
            count = len(app.record.assignments)
            world = app.record.world_size
            app.reconfiguring = True
        try:
            assignments = self._build_assignments(dead.app_id, world, count, reuse)
        except ControllerError as exc:
            self.event("replace_failed", app=dead.app_id, agent=dead.agent_id, reason=exc)
            with self._lock:
                app.reconfiguring = False
            return
        with self._lock:
            dead.retired = True
            self._install_assignments(app, assignments)
            app.reconfiguring = False

    # --- resource manager ----------------------------------------------------

    def request_nodes(self, count: int, reason: str) -> bool:
        """Ask the RM for nodes; returns True once a grant is handled. One request per reason at a time."""
        with self._lock:
            if reason in self.outstanding_requests:
                self.event("node_request_suppressed", reason=reason)
                return False
            self.outstanding_requests.add(reason)
        self.event("node_request", count=count, reason=reason)
        try:
            if self.config.rm is None:
                return False
            try:
                reply = self._pool.call(self.config.rm, P.NodeRequest(count, reason), timeout=30.0)
            except (OSError, RemoteError, P.ProtocolError) as exc:
                self.event("node_request_failed", reason=exc)
                return False
            if isinstance(reply, P.NodeGrant) and reply.nodes:
                self.handle_node_grant(reply.nodes)
                return self._await_managers(reply.nodes)
            self.event("node_denied", reason=getattr(reply, "reason", ""))
            return False
        finally:
            with self._lock:
                self.outstanding_requests.discard(reason)

    def _await_managers(self, nodes: Iterable[str]) -> bool:
        deadline = time.monotonic() + self.config.node_wait
        with self._cond:
            while not all(self.nodes[n].manager is not None for n in nodes):
                left = deadline - time.monotonic()
                if left <= 0:
                    return False
                self._cond.wait(left)
        return True

    def handle_node_grant(self, nodes: Iterable[str]) -> None:
        with self._cond:
            for nid in nodes:
                node = self.nodes.setdefault(nid, NodeEntry(nid))
                if not node.owned:
                    node.owned = True
                    node.reclaiming = False
                    self.event("node_granted", node=nid)
            self._cond.notify_all()

    def owned_nodes(self) -> List[str]:
        with self._lock:
            return sorted(n.node_id for n in self.nodes.values() if n.owned)

    def handle_node_reclaim(self, nodes: List[str], deadline: float, wait: bool = False) -> None:
        with self._lock:
            for nid in nodes:
                n = self.nodes.get(nid)
                if n is None or not n.owned:
                    raise ControllerError("not owned", f"node {nid} is not owned by the checkpoint service")
            for nid in nodes:
                self.nodes[nid].reclaiming = True
        self.event("reclaim", nodes=",".join(nodes), deadline=f"{deadline:.1f}")
        t = threading.Thread(target=self._reclaim_program, args=(list(nodes), deadline), daemon=True)
        t.start()
        if wait:
            t.join()

    def handle_migrate_hint(self, node_from: str, node_to: str, wait: bool = False) -> str:
        with self._lock:
            src = self.nodes.get(node_from)
            dst = self.nodes.get(node_to)
            if src is None or dst is None:
                raise ControllerError("unknown node", f"unknown node {node_from if src is None else node_to}")
            if not dst.owned or dst.manager is None:
                raise ControllerError("rejected", f"node {node_to} is not owned")
            movers = [a for a in self.agents.values() if a.node_id == node_from and a.alive]
            if not movers:
                return "no-op"
            need = sum(a.share for a in movers)
            view = NodeView(dst.node_id, dst.capacity, self._projected_used(dst))
            if not self.policy.fits(view, need):
                raise ControllerError("rejected", f"node {node_to} lacks headroom for {need:.0f} bytes")
        self.event("migrate_hint", src=node_from, dst=node_to, agents=len(movers))
        t = threading.Thread(target=self._migrate_agents, args=(movers, time.time() + 3600, node_to), daemon=True)
        t.start()
        if wait:
            t.join()
        return "migrating"

    def _reclaim_program(self, nodes: List[str], deadline: float) -> None:
        degraded = False
        for nid in nodes:
            with self._lock:
                movers = [a for a in self.agents.values() if a.node_id == nid and a.alive]
            degraded |= self._migrate_agents(movers, deadline, None)
            with self._lock:
                node = self.nodes[nid]
                manager = node.manager
            if manager is not None:
                try:
                    self._pool.call(manager, P.Shutdown([a.agent_id for a in movers]), timeout=30.0)
                except (OSError, RemoteError, P.ProtocolError):
                    pass
            with self._cond:
                node.owned = False
                node.reclaiming = False
                for a in movers:
                    a.alive = False
                self._cond.notify_all()
            self.event("node_released", node=nid, degraded=degraded)
            for a in movers:
                if not a.retired:
                    self._replace_dead_agent(a)
        if self.config.rm is not None:
            try:
                self._pool.call(self.config.rm, P.NodeReleased(nodes, degraded), timeout=30.0)
            except (OSError, RemoteError, P.ProtocolError):
                log.warning("could not notify RM of release of %s", nodes)

    def _migrate_agents(self, movers: List[AgentEntry], deadline: float, target_node: Optional[str]) -> bool:
        """Move every agent off its node. Returns True if any data had to fall back to PFS."""
        degraded = False
        for a in movers:
            moved = False
            if time.time() < deadline:
                moved = self._migrate_one(a, target_node)
            if not moved:
                if target_node is not None:
                    continue
                degraded |= time.time() >= deadline
                self._evacuate_to_pfs(a)
        return degraded

    def _migrate_one(self, a: AgentEntry, target_node: Optional[str]) -> bool:
        with self._lock:
            if target_node is None:
                exclude = {a.node_id}
                target_node = self.policy.place(a.share, self._node_views(exclude))
                if target_node is None:
                    self.event("migrate_no_target", agent=a.agent_id)
                    return False
            source_manager = self.nodes[a.node_id].manager
            ranks = sorted(a.ranks)
        started = self._launch(a.app_id, [(ranks, target_node, a.share)])
        if not started:
            return False
        new = started[0]
        order = P.MigrateOrder(a.app_id, ranks, target_node, a.agent_id, new.info())
        try:
            ack = self._pool.call(source_manager, order, timeout=600.0, expect=P.MigrateAck)
        except (OSError, RemoteError, P.ProtocolError) as exc:
            ack = P.MigrateAck(a.app_id, a.agent_id, new.agent_id, ranks, 0, False, str(exc))
        if not ack.ok:
            self.event("migrate_failed", agent=a.agent_id, reason=ack.reason)
            with self._lock:
                new.alive = False
                new.retired = True
            self._shutdown_agent(new)
            return False
        with self._lock:
            self._substitute(a, new)
        self.event("migrated", app=a.app_id, src=a.agent_id, dst=new.agent_id, node=target_node,
                   entries=ack.entries)
        # the source keeps its copies until now so restores never hit a gap
        self._shutdown_agent(a)
        return True

    def _substitute(self, old: AgentEntry, new: AgentEntry) -> None:
        app = self.apps.get(old.app_id)
        if app is None:
            return
        for v in app.record.versions:
            for r, aid in list(v.locations.items()):
                if aid == old.agent_id:
                    v.locations[r] = new.agent_id
        if any(x.agent_id == old.agent_id for x in app.record.assignments):
            new.ranks = old.ranks
            assignments = [new.assignment() if x.agent_id == old.agent_id else x for x in app.record.assignments]
            old.retired = True
            old.alive = False
            self._install_assignments(app, assignments)
        else:
            old.retired = True
            old.alive = False
            new.retired = True

    def _evacuate_to_pfs(self, a: AgentEntry) -> None:
        """Flush everything the agent holds in memory only, then forget the memory copies."""
        with self._lock:
            app = self.apps.get(a.app_id)
            if app is None:
                return
            todo = []
            for v in app.record.versions:
                ranks = sorted(r for r, aid in v.locations.items() if aid == a.agent_id)
                if ranks and v.complete:
                    todo.append((v, ranks))
        for v, ranks in todo:
            if all(v.storage_level.get(r, StorageLevel.MEMORY).on_pfs for r in ranks):
                continue
            order = P.FlushOrder(a.app_id, app.record.name, v.world_size, v.adapt_epoch, v.version, ranks,
                                 a.agent_id, False)
            self._run_flush(a.node_id, order)
        with self._lock:
            for v, ranks in todo:
                for r in ranks:
                    if v.storage_level.get(r, StorageLevel.MEMORY).on_pfs:
                        v.locations[r] = None
                        v.storage_level[r] = StorageLevel.PFS
            self.event("evacuated", app=a.app_id, agent=a.agent_id, versions=len(todo))

    # --- PFS flushes ---------------------------------------------------------

    def schedule_flush(self, now: float) -> List[Tuple[str, P.FlushOrder]]:
        """Pick flush orders: aged or under-pressure COMPLETE versions, one in flight per node."""
        cfg = self.config.policy
        orders = []
        with self._lock:
            busy = {n.node_id for n in self.nodes.values() if n.flush_inflight is not None}
            candidates = []
            for app in self.apps.values():
                for v in app.record.versions:
                    if v.complete:
                        candidates.append((v.completed_at or v.timestamp, app, v))
            candidates.sort(key=lambda c: (c[0], c[2].version))
            for done_at, app, v in candidates:
                groups: Dict[int, List[int]] = {}
                for r, aid in v.locations.items():
                    if aid is not None and v.storage_level.get(r) is StorageLevel.MEMORY:
                        groups.setdefault(aid, []).append(r)
                for aid, ranks in sorted(groups.items()):
                    agent = self.agents.get(aid)
                    if agent is None or not agent.alive:
                        continue
                    node = self.nodes.get(agent.node_id)
                    if node is None or node.node_id in busy or node.manager is None:
                        continue
                    pressure = (node.stats is not None and node.capacity > 0
                                and node.stats.mem_used > cfg.flush_pressure * node.capacity)
                    if now - done_at > cfg.flush_age or pressure:
                        node.flush_inflight = (app.record.app_id, v.version, aid)
                        node.flush_log.append((time.monotonic(), float("nan")))
                        busy.add(node.node_id)
                        orders.append((node.node_id, P.FlushOrder(
                            app.record.app_id, app.record.name, v.world_size, v.adapt_epoch, v.version,
                            sorted(ranks), aid, bool(pressure))))
        return orders

    def run_flushes(self, now: float) -> int:
        orders = self.schedule_flush(now)
        for node_id, order in orders:
            threading.Thread(target=self._send_flush, args=(node_id, order), daemon=True).start()
        return len(orders)

    def _run_flush(self, node_id: str, order: P.FlushOrder) -> P.FlushAck:
        """Flush outside the scheduler, still honouring one flush in flight per node."""
        with self._cond:
            node = self.nodes[node_id]
            while node.flush_inflight is not None:
                self._cond.wait(1.0)
            node.flush_inflight = (order.app_id, order.version, order.agent_id)
            node.flush_log.append((time.monotonic(), float("nan")))
        return self._send_flush(node_id, order)

    def _send_flush(self, node_id: str, order: P.FlushOrder) -> P.FlushAck:
        manager = self.nodes[node_id].manager
        try:
            ack = self._pool.call(manager, order, timeout=600.0, expect=P.FlushAck)
        except (OSError, RemoteError, P.ProtocolError) as exc:
            ack = P.FlushAck(order.app_id, order.epoch, order.version, order.agent_id, list(order.ranks),
                             False, False, str(exc))
        self.handle_flush_ack(node_id, ack)
        return ack

    def handle_flush_ack(self, node_id: str, ack: P.FlushAck) -> None:
        with self._cond:
            node = self.nodes[node_id]
            node.flush_inflight = None
            if node.flush_log:
                start, _ = node.flush_log[-1]
                node.flush_log[-1] = (start, time.monotonic())
            app = self.apps.get(ack.app_id)
            v = app.record.find_version(ack.version) if app else None
            if ack.ok and v is not None:
                for r in ack.ranks:
                    v.storage_level[r] = StorageLevel.PFS if ack.evicted else StorageLevel.BOTH
                self.event("flushed", app=ack.app_id, version=ack.version, node=node_id,
                           ranks=len(ack.ranks), evicted=ack.evicted)
            elif not ack.ok:
                self.event("flush_failed", app=ack.app_id, version=ack.version, node=node_id, reason=ack.reason)
            self._cond.notify_all()

    # --- introspection -------------------------------------------------------

    def app_state(self, name_or_id) -> AppState:
        with self._lock:
            app = self.apps.get(name_or_id) if isinstance(name_or_id, int) else self._app_by_name(name_or_id)
            if app is None:
                raise KeyError(name_or_id)
            return app

    def wait_for(self, predicate, timeout: float = 30.0) -> bool:
        deadline = time.monotonic() + timeout
        with self._cond:
            while not predicate():
                left = deadline - time.monotonic()
                if left <= 0:
                    return False
                self._cond.wait(min(left, 0.1))
        return True
