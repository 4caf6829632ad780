"""Per-node daemon: launches agents, samples and predicts node usage, relays orders."""

from __future__ import annotations

import logging
import multiprocessing as mp
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, List, Optional

from . import protocol as P
from .agent import Agent, run_agent_process
from .model import NodeStats
from .transport import Address, ConnectionClosed, ConnectionPool, RemoteError, Server

log = logging.getLogger(__name__)


def predict(prev_pred: Optional[float], sample: float, alpha: float = 0.5) -> float:
    """Exponentially weighted moving average step; the first sample seeds the prediction."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if prev_pred is None:
        return float(sample)
    return alpha * sample + (1.0 - alpha) * prev_pred


class EwmaPredictor:
    def __init__(self, alpha: float = 0.5):
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {alpha}")
        self.alpha = alpha
        self.value: Optional[float] = None

    def update(self, sample: float) -> float:
        self.value = predict(self.value, sample, self.alpha)
        return self.value


@dataclass
class AgentHandle:
    agent_id: int
    app_id: int
    address: Address
    agent: Optional[Agent] = None  # single-process mode
    process: Optional[mp.Process] = None
    pipe: object = None
    alive: bool = True
    staged: int = 0
    moved: int = 0

    def stop(self, kill: bool = False) -> None:
        if self.agent is not None:
            self.agent.stop(abort=kill)
        if self.process is not None:
            if kill:
                self.process.kill()
            else:
                try:
                    self.pipe.send("stop")
                except (OSError, BrokenPipeError):
                    pass
                self.process.join(5)
                if self.process.is_alive():
                    self.process.kill()
            self.process.join(5)
        self.alive = False


class Manager:
    def __init__(
        self,
        node_id: str,
        mem_capacity: int,
        controller: Optional[Address] = None,
        single_process: bool = True,
        ewma_alpha: float = 0.5,
        report_period: float = 1.0,
        host: str = "127.0.0.1",
        window: int = 16,
    ):
        self.node_id = node_id
        self.mem_capacity = mem_capacity
        self.controller = controller
        self.single_process = single_process
        self.report_period = report_period
        self.host = host
        self.agents: Dict[int, AgentHandle] = {}
        self.stats_window: Deque[NodeStats] = deque(maxlen=window)
        self._mem_pred = EwmaPredictor(ewma_alpha)
        self._bw_pred = EwmaPredictor(ewma_alpha)
        self._last_sample: Optional[float] = None
        self._lock = threading.RLock()
        self._sample_lock = threading.Lock()  # one sample at a time keeps deltas and predictors consistent
        self._pool = ConnectionPool()
        self._stop = threading.Event()
        self.server: Optional[Server] = None
        self.reports_sent = 0

    # --- lifecycle -----------------------------------------------------------

    def start(self) -> "Manager":
        self.server = Server(lambda conn: self.handle, host=self.host, name=f"manager-{self.node_id}").start()
        if self.controller is not None:
            self.report()
            threading.Thread(target=self._report_loop, name=f"stats-{self.node_id}", daemon=True).start()
        return self

    @property
    def address(self) -> Address:
        return self.server.address

    def stop(self) -> None:
        self._stop.set()
        with self._lock:
            handles = list(self.agents.values())
        for h in handles:
            if h.alive:
                h.stop()
        if self.server is not None:
            self.server.stop()
        self._pool.close()

    def _report_loop(self) -> None:
        while not self._stop.wait(self.report_period):
            try:
                self.report()
            except Exception:
                log.debug("stats report from %s failed", self.node_id, exc_info=True)

    # --- agents --------------------------------------------------------------

    def launch_agents(self, order: P.LaunchAgents) -> P.AgentReady:
        ready: List[P.AgentInfo] = []
        failed: List[int] = []
        controller = (order.controller_host, order.controller_port) if order.controller_port else self.controller
        for spec in order.agents:
            with self._lock:
                if spec.agent_id in self.agents:
                    failed.append(spec.agent_id)
                    continue
            kwargs = dict(agent_id=spec.agent_id, node_id=self.node_id, app_id=spec.app_id,
                          ranks=list(spec.ranks), budget=spec.budget or self.mem_capacity,
                          controller=controller, pfs_root=order.pfs_root or None, host=self.host)
            try:
                handle = self._spawn(kwargs)
            except Exception:
                log.exception("agent %d failed to start on %s", spec.agent_id, self.node_id)
                failed.append(spec.agent_id)
                continue
            with self._lock:
                self.agents[spec.agent_id] = handle
            ready.append(P.AgentInfo(spec.agent_id, self.node_id, handle.address[0], handle.address[1],
                                     list(spec.ranks)))
        return P.AgentReady(self.node_id, ready, failed)

    def _spawn(self, kwargs: dict) -> AgentHandle:
        if self.single_process:
            agent = Agent(**kwargs).start()
            return AgentHandle(kwargs["agent_id"], kwargs["app_id"], agent.address, agent=agent)
        ctx = mp.get_context("spawn")
        parent, child = ctx.Pipe()
        proc = ctx.Process(target=run_agent_process, args=(kwargs, child), daemon=True)
        proc.start()
        if not parent.poll(30):
            proc.kill()
            raise RuntimeError("agent process did not report its address")
        address = tuple(parent.recv())
        return AgentHandle(kwargs["agent_id"], kwargs["app_id"], address, process=proc, pipe=parent)

    def shutdown_agents(self, agent_ids: List[int]) -> None:
        with self._lock:
            targets = [self.agents[a] for a in (agent_ids or list(self.agents)) if a in self.agents]
            for h in targets:
                self.agents.pop(h.agent_id, None)
        for h in targets:
            h.stop()

    def kill_agent(self, agent_id: int) -> bool:
        with self._lock:
            h = self.agents.get(agent_id)
        if h is None:
            return False
        h.stop(kill=True)
        return True

    def _agent_call(self, agent_id: int, msg: P.Message, timeout: float = 600.0) -> P.Message:
        with self._lock:
            h = self.agents.get(agent_id)
        if h is None or not h.alive:
            raise RemoteError("missing", f"agent {agent_id} not running on {self.node_id}")
        return self._pool.call(h.address, msg, timeout=timeout)

    # --- monitoring ----------------------------------------------------------

    def sample_stats(self, now: Optional[float] = None) -> NodeStats:
        with self._sample_lock:
            return self._sample(now)

    def _sample(self, now: Optional[float]) -> NodeStats:
        now = time.monotonic() if now is None else now
        staged = 0
        moved_delta = 0
        with self._lock:
            handles = list(self.agents.values())
        for h in handles:
            if not h.alive:
                continue
            try:
                st = self._pool.call(h.address, P.AgentStatsQuery(), timeout=5.0, expect=P.AgentStats)
            except (OSError, ConnectionClosed, RemoteError, P.ProtocolError):
                log.warning("agent %d on %s is not responding", h.agent_id, self.node_id)
                h.alive = False
                continue
            staged += st.bytes_staged
            moved_delta += max(0, st.bytes_moved - h.moved)
            h.moved = st.bytes_moved
            h.staged = st.bytes_staged
        period = (now - self._last_sample) if self._last_sample is not None else self.report_period
        self._last_sample = now
        bw = moved_delta / period if period > 0 else 0.0
        stats = NodeStats(
            node_id=self.node_id,
            mem_capacity=self.mem_capacity,
            mem_used=staged,
            bw_used=bw,
            mem_predicted=self._mem_pred.update(staged),
            bw_predicted=self._bw_pred.update(bw),
            sample_time=time.time(),
        )
        self.stats_window.append(stats)
        return stats

    def report(self) -> None:
        st = self.sample_stats()
        with self._lock:
            live = [a for a, h in self.agents.items() if h.alive]
            dead = [a for a, h in self.agents.items() if not h.alive]
        msg = P.StatsReport(
            P.NodeStatsRec(st.node_id, st.mem_capacity, st.mem_used, st.bw_used, st.mem_predicted,
                           st.bw_predicted, st.sample_time),
            self.address[0], self.address[1], live, dead)
        self._pool.call(self.controller, msg, timeout=10.0)
        self.reports_sent += 1

    # --- protocol ------------------------------------------------------------

    def handle(self, msg: P.Message):
        if isinstance(msg, P.LaunchAgents):
            return self.launch_agents(msg)
        if isinstance(msg, P.FlushOrder):
            return self._agent_call(msg.agent_id, msg)
        if isinstance(msg, P.MigrateOrder):
            return self._agent_call(msg.source_agent, msg)
        if isinstance(msg, P.Shutdown):
            self.shutdown_agents(list(msg.agent_ids))
            return P.Ok("shutdown")
        if isinstance(msg, P.KillAgent):
            return P.Ok("killed") if self.kill_agent(msg.agent_id) else P.Error("missing", "no such agent")
        if isinstance(msg, P.AgentStatsQuery):
            st = self.sample_stats()
            return P.StatsReport(P.NodeStatsRec(st.node_id, st.mem_capacity, st.mem_used, st.bw_used,
                                                st.mem_predicted, st.bw_predicted, st.sample_time),
                                 self.address[0], self.address[1], [], [])
        return P.Error("protocol", f"manager does not handle {msg.name}")
