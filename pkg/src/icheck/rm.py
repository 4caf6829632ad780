"""Scriptable stand-in for the malleable resource manager.

It owns the node inventory, grants and reclaims checkpoint-service nodes,
sends migration hints and adaptation notices, and forwards fault-injection
events to whoever runs the application.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

from . import protocol as P
from .transport import Address, ConnectionPool, RemoteError, Server

log = logging.getLogger(__name__)

ACTIONS = ("GRANT", "RECLAIM", "MIGRATE_HINT", "ADAPT", "KILL_APP", "KILL_AGENT", "THROTTLE")
RM = "rm"
ICHECK = "icheck"


class ScriptError(ValueError):
    """A script event is malformed or refers to something unknown."""


@dataclass
class RmEvent:
    action: str
    at: Optional[float] = None
    at_iteration: Optional[int] = None
    nodes: List[str] = field(default_factory=list)
    deadline: float = 30.0
    node_from: str = ""
    node_to: str = ""
    app: str = ""
    new_world_size: int = 0
    agent: int = 0
    rate: Optional[float] = None

    @classmethod
    def from_dict(cls, d: dict, where: str = "event") -> "RmEvent":
        if not isinstance(d, dict):
            raise ScriptError(f"{where}: expected an object")
        action = str(d.get("action", "")).upper()
        if action not in ACTIONS:
            raise ScriptError(f"{where}.action: unknown action {d.get('action')!r}")
        known = {"action", "at", "at_iteration", "nodes", "deadline", "from", "to", "app", "new_world_size",
                 "agent", "rate"}
        extra = set(d) - known
        if extra:
            raise ScriptError(f"{where}: unknown fields {sorted(extra)}")
        if ("at" in d) == ("at_iteration" in d):
            raise ScriptError(f"{where}: exactly one of 'at' or 'at_iteration' is required")
        ev = cls(action=action, at=d.get("at"), at_iteration=d.get("at_iteration"), nodes=list(d.get("nodes", [])),
                 deadline=float(d.get("deadline", 30.0)), node_from=d.get("from", ""), node_to=d.get("to", ""),
                 app=d.get("app", ""), new_world_size=int(d.get("new_world_size", 0)), agent=int(d.get("agent", 0)),
                 rate=d.get("rate"))
        if ev.at is not None and ev.at < 0:
            raise ScriptError(f"{where}.at: must be >= 0")
        if ev.at_iteration is not None and ev.at_iteration < 1:
            raise ScriptError(f"{where}.at_iteration: must be >= 1")
        if action in ("GRANT", "RECLAIM") and not ev.nodes:
            raise ScriptError(f"{where}.nodes: required for {action}")
        if action == "MIGRATE_HINT" and not (ev.node_from and ev.node_to):
            raise ScriptError(f"{where}: MIGRATE_HINT needs 'from' and 'to'")
        if action == "ADAPT" and ev.new_world_size < 1:
            raise ScriptError(f"{where}.new_world_size: must be >= 1")
        if action in ("ADAPT", "KILL_APP") and not ev.app:
            raise ScriptError(f"{where}.app: required for {action}")
        return ev


def validate_script(events: Sequence[dict], inventory: Iterable[str], apps: Iterable[str]) -> List[RmEvent]:
    """Parse and cross-check a script; raises :class:`ScriptError` naming the first problem."""
    inventory = set(inventory)
    apps = set(apps)
    parsed = []
    last_at = 0.0
    for i, d in enumerate(events):
        where = f"rm_script[{i}]"
        ev = RmEvent.from_dict(d, where)
        if ev.at is not None:
            if ev.at < last_at:
                raise ScriptError(f"{where}.at: times must be non-decreasing ({ev.at} < {last_at})")
            last_at = ev.at
        for n in ev.nodes + [x for x in (ev.node_from, ev.node_to) if x]:
            if n not in inventory:
                raise ScriptError(f"{where}: unknown node {n!r}")
        if ev.app and ev.app not in apps:
            raise ScriptError(f"{where}.app: unknown application {ev.app!r}")
        parsed.append(ev)
    return parsed


class ResourceManagerStub:
    def __init__(self, inventory: Dict[str, int], controller: Optional[Address] = None, host: str = "127.0.0.1",
                 port: int = 0):
        self.inventory = dict(inventory)
        self.port = port
        self.owner: Dict[str, str] = {n: RM for n in inventory}
        self.controller = controller
        self.host = host
        self.log: List[tuple] = []
        self.fault_handler: Optional[Callable[[RmEvent], None]] = None
        self.adapt_listeners: List[Callable[[RmEvent], None]] = []
        self._lock = threading.Lock()
        self._pool = ConnectionPool()
        self._t0 = time.monotonic()
        self.server: Optional[Server] = None

    def start(self) -> "ResourceManagerStub":
        self.server = Server(lambda conn: self.handle, host=self.host, port=self.port, name="rm").start()
        return self

    @property
    def address(self) -> Address:
        return self.server.address

    def stop(self) -> None:
        if self.server is not None:
            self.server.stop()
        self._pool.close()

    def _record(self, what: str, **kv) -> None:
        with self._lock:
            self.log.append((round(time.monotonic() - self._t0, 3), what, kv))
        log.info("rm event=%s %s", what, " ".join(f"{k}={v}" for k, v in kv.items()))

    def spare(self) -> List[str]:
        with self._lock:
            return sorted(n for n, o in self.owner.items() if o == RM)

    def _send(self, msg: P.Message) -> P.Message:
        if self.controller is None:
            raise ScriptError("resource manager has no controller address")
        return self._pool.call(self.controller, msg, timeout=600.0)

    # --- inbound -------------------------------------------------------------

    def handle(self, msg: P.Message):
        if isinstance(msg, P.NodeRequest):
            return self.handle_node_request(msg)
        if isinstance(msg, P.NodeReleased):
            with self._lock:
                for n in msg.nodes:
                    if self.owner.get(n) == ICHECK:
                        self.owner[n] = RM
            self._record("released", nodes=",".join(msg.nodes), degraded=msg.degraded)
            return P.Ok("released")
        return P.Error("protocol", f"resource manager does not handle {msg.name}")

    def handle_node_request(self, req: P.NodeRequest) -> P.Message:
        """First-come grant over spare nodes, partial when fewer are free."""
        with self._lock:
            free = sorted(n for n, o in self.owner.items() if o == RM)
            if not free or req.count < 1:
                grant = []
            else:
                grant = free[: req.count]
                for n in grant:
                    self.owner[n] = ICHECK
        if not grant:
            self._record("deny", count=req.count, reason=req.reason)
            return P.NodeDeny(f"no spare nodes for {req.reason}")
        self._record("grant", nodes=",".join(grant), reason=req.reason)
        return P.NodeGrant(grant, len(grant) < req.count)

    # --- outbound ------------------------------------------------------------

    def grant(self, nodes: Sequence[str]) -> None:
        with self._lock:
            for n in nodes:
                if n not in self.owner:
                    raise ScriptError(f"unknown node {n!r}")
                if self.owner[n] not in (RM, ICHECK):
                    raise ScriptError(f"node {n!r} is owned by {self.owner[n]}")
                self.owner[n] = ICHECK
        self._send(P.NodeGrant(list(nodes), False))
        self._record("grant", nodes=",".join(nodes))

    def reclaim(self, nodes: Sequence[str], deadline: float = 30.0) -> P.Message:
        reply = self._send(P.NodeReclaim(list(nodes), time.time() + deadline))
        self._record("reclaim", nodes=",".join(nodes), deadline=deadline)
        return reply

    def migrate_hint(self, node_from: str, node_to: str) -> P.Message:
        reply = self._send(P.MigrateHint(node_from, node_to))
        self._record("migrate_hint", src=node_from, dst=node_to)
        return reply

    def adapt(self, app: str, new_world_size: int, epoch: int = 0, event: Optional[RmEvent] = None) -> None:
        """Tell the controller first, then the application."""
        self._send(P.AppAdaptNotice(0, app, new_world_size, epoch))
        self._record("adapt_notice", app=app, world=new_world_size)
        ev = event or RmEvent("ADAPT", app=app, new_world_size=new_world_size)
        for listener in list(self.adapt_listeners):
            listener(ev)

    def fire(self, ev: RmEvent) -> None:
        if ev.action == "GRANT":
            self.grant(ev.nodes)
        elif ev.action == "RECLAIM":
            self.reclaim(ev.nodes, ev.deadline)
        elif ev.action == "MIGRATE_HINT":
            self.migrate_hint(ev.node_from, ev.node_to)
        elif ev.action == "ADAPT":
            self.adapt(ev.app, ev.new_world_size, event=ev)
        else:
            self._record(ev.action.lower(), app=ev.app, agent=ev.agent, rate=ev.rate)
            if self.fault_handler is None:
                raise ScriptError(f"{ev.action} needs a fault handler")
            self.fault_handler(ev)

    def run_script(self, events: Sequence[RmEvent], stop: Optional[threading.Event] = None) -> List[tuple]:
        """Fire the time-based events at their offsets from now; returns the event log."""
        start = time.monotonic()
        for ev in events:
            if ev.at is None:
                continue
            delay = start + ev.at - time.monotonic()
            if delay > 0 and stop is not None and stop.wait(delay):
                break
            if delay > 0 and stop is None:
                time.sleep(delay)
            try:
                self.fire(ev)
            except (OSError, RemoteError, ScriptError) as exc:
                self._record("error", action=ev.action, reason=exc)
        return list(self.log)


def load_script(path) -> List[dict]:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ScriptError(f"{path}: script must be a JSON array of events")
    return data
