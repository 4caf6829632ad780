"""All services of a checkpoint deployment in one process, on loopback."""

from __future__ import annotations

import logging
import tempfile
import time
from pathlib import Path
from typing import Dict, List, Optional

from . import protocol as P
from .client import ClientConfig
from .controller import Controller, ControllerConfig
from .manager import Manager
from .policy import PolicyConfig
from .rm import ResourceManagerStub

log = logging.getLogger(__name__)

GiB = 1024 ** 3


class LocalCluster:
    """Controller, one manager per node, and the RM stub.

    ``nodes`` are granted to the checkpoint service at start; ``spares`` stay
    with the resource manager until requested or granted by a script.
    """

    def __init__(
        self,
        nodes: Optional[Dict[str, int]] = None,
        spares: Optional[Dict[str, int]] = None,
        policy: Optional[PolicyConfig] = None,
        pfs_root=None,
        single_process: bool = True,
        report_period: float = 0.2,
        tick: float = 0.2,
        node_wait: float = 10.0,
    ):
        self.node_caps = dict(nodes or {"n1": 4 * GiB})
        self.spare_caps = dict(spares or {})
        self._tmp = None
        if pfs_root is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="icheck-pfs-")
            pfs_root = self._tmp.name
        self.pfs_root = str(Path(pfs_root).resolve())
        self.controller = Controller(ControllerConfig(policy=policy or PolicyConfig(), pfs_root=self.pfs_root,
                                                      tick=tick, node_wait=node_wait))
        self.rm = ResourceManagerStub({**self.node_caps, **self.spare_caps})
        self.single_process = single_process
        self.report_period = report_period
        self.managers: Dict[str, Manager] = {}

    def start(self) -> "LocalCluster":
        self.rm.start()
        self.controller.config.rm = self.rm.address
        self.controller.start()
        self.rm.controller = self.controller.address
        for nid, cap in {**self.node_caps, **self.spare_caps}.items():
            self.managers[nid] = Manager(nid, cap, self.controller.address, single_process=self.single_process,
                                         report_period=self.report_period).start()
        if self.node_caps:
            self.rm.grant(sorted(self.node_caps))
        ok = self.controller.wait_for(
            lambda: all(self.controller.nodes.get(n) is not None and self.controller.nodes[n].manager is not None
                        for n in self.managers), timeout=10.0)
        if not ok:
            raise RuntimeError("managers did not report to the controller")
        return self

    def stop(self) -> None:
        for m in self.managers.values():
            m.stop()
        self.controller.stop()
        self.rm.stop()
        if self._tmp is not None:
            self._tmp.cleanup()

    def __enter__(self) -> "LocalCluster":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def client_config(self, **kw) -> ClientConfig:
        return ClientConfig(controller=self.controller.address, **kw)

    # --- introspection and fault injection -----------------------------------

    def agent(self, agent_id: int):
        """The in-process agent object (single-process mode only)."""
        for m in self.managers.values():
            h = m.agents.get(agent_id)
            if h is not None and h.agent is not None:
                return h.agent
        raise KeyError(agent_id)

    def live_agents(self, app_id: Optional[int] = None) -> List:
        out = []
        for m in self.managers.values():
            for h in list(m.agents.values()):
                if h.alive and h.agent is not None and (app_id is None or h.app_id == app_id):
                    out.append(h.agent)
        return out

    def agent_stats(self, agent_id: int) -> P.AgentStats:
        for m in self.managers.values():
            h = m.agents.get(agent_id)
            if h is not None:
                return m._pool.call(h.address, P.AgentStatsQuery(), timeout=10.0, expect=P.AgentStats)
        raise KeyError(agent_id)

    def kill_agent(self, agent_id: int) -> bool:
        for m in self.managers.values():
            if agent_id in m.agents:
                return m.kill_agent(agent_id)
        return False

    def wait_idle_flushes(self, timeout: float = 30.0) -> bool:
        return self.controller.wait_for(
            lambda: all(n.flush_inflight is None for n in self.controller.nodes.values()), timeout)

    def sleep_reports(self, periods: float = 2.0) -> None:
        time.sleep(self.report_period * periods)
