"""Scenario runner and synthetic malleable application.

Every element of every region is a pure function of (seed, iteration, global
index), so any byte seen after a restart or a redistribution can be checked
against a freshly generated copy.
"""

from __future__ import annotations

import csv
import json
import logging
import multiprocessing as mp
import os
import queue
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import protocol as P
from .client import ClientConfig, CommitStats, Mode, SessionCrashed, export_csv, icheck_init
from .cluster import LocalCluster
from .layout import Layout, global_indices, owned_count
from .model import DistributionScheme, ProcessType
from .policy import PolicyConfig
from .rm import RmEvent, ScriptError, load_script, validate_script

log = logging.getLogger(__name__)

WORD = np.dtype("<u8")


# --- deterministic data --------------------------------------------------------


def generate(seed: int, iteration: int, indices: np.ndarray, elem_size: int = 8) -> np.ndarray:
    """Element values for ``indices`` at ``iteration``: seed, iteration and index packed in one word."""
    words = elem_size // WORD.itemsize
    base = ((np.uint64(seed & 0xFFFF) << np.uint64(48)) | (np.uint64(iteration & 0xFFFF) << np.uint64(32))
            | (np.asarray(indices, dtype=np.uint64) & np.uint64(0xFFFFFFFF)))
    return np.repeat(base, words).astype(WORD)


def decode_iteration(buf: np.ndarray) -> int:
    return int((int(buf[0]) >> 32) & 0xFFFF)


def first_divergence(got: np.ndarray, want: np.ndarray) -> Optional[int]:
    """Byte offset of the first differing word, or None."""
    if got.shape != want.shape:
        return 0
    diff = np.flatnonzero(got != want)
    return None if diff.size == 0 else int(diff[0]) * WORD.itemsize


# --- scenario ------------------------------------------------------------------


class ScenarioError(ValueError):
    def __init__(self, errors: List[str]):
        super().__init__("\n".join(errors))
        self.errors = errors


@dataclass
class RegionSpec:
    id: str
    elements: int
    elem_size: int = 8
    scheme: str = "BLOCK"


@dataclass
class AppSpec:
    name: str
    world_size: int
    regions: List[RegionSpec]
    iterations: int
    checkpoint_interval: int
    probe_interval: int
    seed: int = 1
    compute_time: float = 0.0


@dataclass
class ClusterSpec:
    nodes: Dict[str, int]
    spares: Dict[str, int] = field(default_factory=dict)
    single_process: bool = True


@dataclass
class Scenario:
    name: str
    app: AppSpec
    cluster: ClusterSpec
    rm_script: List[RmEvent] = field(default_factory=list)
    throttle: Optional[float] = None
    mode: str = "ASYNC"
    rank_mode: str = "process"
    policy: Dict[str, Any] = field(default_factory=dict)


def _line_of(text: str, key: str) -> int:
    for i, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return i
    return 0


def _req(d: dict, key: str, path: str, errors: List[str], kind=int, minimum=None):
    if key not in d:
        errors.append(f"{path}.{key}: required")
        return None
    val = d[key]
    try:
        val = kind(val)
    except (TypeError, ValueError):
        errors.append(f"{path}.{key}: expected {kind.__name__}")
        return None
    if minimum is not None and val < minimum:
        errors.append(f"{path}.{key}: must be >= {minimum}")
    return val


def parse_scenario(raw: dict, base_dir: Optional[Path] = None) -> Scenario:
    """Build a :class:`Scenario` from decoded JSON, collecting every field error."""
    errors: List[str] = []
    if not isinstance(raw, dict):
        raise ScenarioError(["scenario: expected a JSON object"])
    known = {"name", "app", "cluster", "rm_script", "throttle", "mode", "rank_mode", "policy"}
    for k in set(raw) - known:
        errors.append(f"{k}: unknown field")
    a = raw.get("app")
    app = None
    if not isinstance(a, dict):
        errors.append("app: required object")
    else:
        world = _req(a, "world_size", "app", errors, int, 1)
        iters = _req(a, "iterations", "app", errors, int, 0)
        ckpt = _req(a, "checkpoint_interval", "app", errors, int, 1)
        probe = _req(a, "probe_interval", "app", errors, int, 1)
        regions = []
        for i, r in enumerate(a.get("regions") or []):
            path = f"app.regions[{i}]"
            if not isinstance(r, dict) or "id" not in r:
                errors.append(f"{path}.id: required")
                continue
            n = _req(r, "elements", path, errors, int, 0)
            es = int(r.get("elem_size", 8))
            if es < 8 or es % 8:
                errors.append(f"{path}.elem_size: must be a positive multiple of 8")
            scheme = str(r.get("scheme", "BLOCK")).upper()
            if scheme not in DistributionScheme.__members__:
                errors.append(f"{path}.scheme: must be BLOCK or CYCLIC")
            regions.append(RegionSpec(str(r["id"]), n or 0, es, scheme))
        if not regions:
            errors.append("app.regions: at least one region required")
        elif world and regions[0].elements < world:
            errors.append("app.regions[0].elements: every rank must own at least one element")
        app = AppSpec(str(a.get("name", "app")), world or 1, regions, iters or 0, ckpt or 1, probe or 1,
                      int(a.get("seed", 1)), float(a.get("compute_time", 0.0)))
    c = raw.get("cluster")
    cluster = None
    if not isinstance(c, dict) or not c.get("nodes"):
        errors.append("cluster.nodes: at least one node required")
    else:
        cluster = ClusterSpec({str(k): int(v) for k, v in c["nodes"].items()},
                              {str(k): int(v) for k, v in (c.get("spares") or {}).items()},
                              bool(c.get("single_process", True)))
        dup = set(cluster.nodes) & set(cluster.spares)
        if dup:
            errors.append(f"cluster.spares: nodes {sorted(dup)} also listed in cluster.nodes")
    mode = str(raw.get("mode", "ASYNC")).upper()
    if mode not in ("ASYNC", "SYNC"):
        errors.append("mode: must be ASYNC or SYNC")
    rank_mode = str(raw.get("rank_mode", "process"))
    if rank_mode not in ("process", "thread"):
        errors.append("rank_mode: must be process or thread")
    try:
        PolicyConfig.from_dict(raw.get("policy") or {})
    except (ValueError, TypeError) as exc:
        errors.append(f"policy: {exc}")
    script = raw.get("rm_script") or []
    if isinstance(script, str):
        path = Path(script) if base_dir is None else base_dir / script
        try:
            script = load_script(path)
        except (OSError, ValueError) as exc:
            errors.append(f"rm_script: {exc}")
            script = []
    events: List[RmEvent] = []
    if app and cluster:
        try:
            events = validate_script(script, list(cluster.nodes) + list(cluster.spares), [app.name])
        except ScriptError as exc:
            errors.append(str(exc))
        for i, ev in enumerate(events):
            if ev.action in ("ADAPT", "KILL_APP") and ev.at_iteration is None:
                errors.append(f"rm_script[{i}].at_iteration: {ev.action} events are iteration-triggered")
            if ev.action == "ADAPT" and app.regions and app.regions[0].elements < ev.new_world_size:
                errors.append(f"rm_script[{i}].new_world_size: larger than app.regions[0].elements")
    if errors:
        raise ScenarioError(errors)
    return Scenario(str(raw.get("name", "scenario")), app, cluster, events,
                    raw.get("throttle"), mode, rank_mode, dict(raw.get("policy") or {}))


def validate_scenario(path) -> Scenario:
    """Load and check a scenario file; errors carry the line of the offending field."""
    path = Path(path)
    text = path.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"line {exc.lineno}: {exc.msg}"]) from exc
    try:
        return parse_scenario(raw, path.parent)
    except ScenarioError as exc:
        located = []
        for e in exc.errors:
            field_path = e.split(":", 1)[0]
            key = re.split(r"[.\[\]]", field_path.strip())
            key = [k for k in key if k and not k.isdigit()]
            line = _line_of(text, key[-1]) if key else 0
            located.append(f"line {line}: {e}" if line else e)
        raise ScenarioError(located) from None


# --- synthetic rank ------------------------------------------------------------


@dataclass
class RankSpec:
    rank: int
    world_size: int
    process_type: int
    controller: tuple
    launch_id: int
    restart: bool
    app: dict
    mode: str
    throttle: Optional[float]
    kill_at: Optional[int]
    adapts: List[tuple]  # (iteration, new_world_size, prev_world_size)
    join_iteration: int = 0
    prev_world: int = 0
    out_dir: str = ""
    incarnation: int = 0


class _Channel:
    """Rank -> runner messages plus per-adapt gates."""

    def __init__(self, q, gates: Dict[int, Any], throttle):
        self.q = q
        self.gates = gates
        self.throttle = throttle

    def send(self, *msg) -> None:
        self.q.put(msg)


def _layout_arrays(app: AppSpec, rank: int, world: int) -> Dict[str, np.ndarray]:
    out = {}
    for r in app.regions:
        layout = Layout(r.elements, world, DistributionScheme[r.scheme])
        out[r.id] = global_indices(layout, rank)
    return out


def _fill(app: AppSpec, bufs: Dict[str, np.ndarray], idx: Dict[str, np.ndarray], t: int) -> None:
    for r in app.regions:
        bufs[r.id][:] = generate(app.seed, t, idx[r.id], r.elem_size)


def _verify(app: AppSpec, bufs, idx, t: int, rank: int, where: str) -> Optional[dict]:
    for r in app.regions:
        off = first_divergence(bufs[r.id], generate(app.seed, t, idx[r.id], r.elem_size))
        if off is not None:
            return {"rank": rank, "region": r.id, "byte_offset": off, "iteration": t, "where": where}
    return None


def run_rank(spec: RankSpec, chan: _Channel) -> dict:
    app = AppSpec(**{**spec.app, "regions": [RegionSpec(**r) for r in spec.app["regions"]]})
    result = {"rank": spec.rank, "incarnation": spec.incarnation, "status": "ok", "verified": 0,
              "failure": None, "restored_iteration": None, "commits": 0}
    cfg = ClientConfig(controller=tuple(spec.controller), sync=spec.mode == "SYNC", throttle=spec.throttle,
                       launch_id=spec.launch_id)
    world = spec.world_size
    hints = []
    for r in app.regions:
        lay = Layout(r.elements, world, DistributionScheme[r.scheme])
        hints.append(P.RegionDesc(r.id, r.elem_size, int(lay.scheme), [owned_count(lay, q) for q in range(world)]))
    ptype = ProcessType(spec.process_type)
    s = icheck_init(app.name, spec.rank, world, ptype, cfg, regions=hints)
    idx = _layout_arrays(app, spec.rank, world)
    bufs = {r.id: np.zeros(len(idx[r.id]) * (r.elem_size // 8), dtype=WORD) for r in app.regions}
    t_start = 1
    current_rate = spec.throttle

    def fail(info):
        result["status"] = "fail"
        result["failure"] = info
        return result

    if ptype is ProcessType.JOINING:
        old_idx = None
        for r in app.regions:
            n = len(idx[r.id])
            s.add_adapt(r.id, bufs[r.id], n, r.elem_size, r.scheme, total_n=r.elements)
        for r in app.regions:
            s.redistribute(r.id, bufs[r.id], len(idx[r.id]), r.scheme)
        bad = _verify(app, bufs, idx, spec.join_iteration - 1, spec.rank, "join")
        if bad:
            return fail(bad)
        result["verified"] += 1
        s.commit_adapt()
        t_start = spec.join_iteration
    else:
        _fill(app, bufs, idx, 0)
        for r in app.regions:
            s.add_adapt(r.id, bufs[r.id], len(idx[r.id]), r.elem_size, r.scheme, total_n=r.elements)
        if spec.restart and s.restart():
            t = decode_iteration(bufs[app.regions[0].id])
            bad = _verify(app, bufs, idx, t, spec.rank, "restart")
            if bad:
                return fail(bad)
            result["verified"] += 1
            result["restored_iteration"] = t
            t_start = t + 1
        elif spec.restart:
            _fill(app, bufs, idx, 0)
    adapts = {a: (new, prev) for a, new, prev in spec.adapts}
    for t in range(t_start, app.iterations + 1):
        rate = chan.throttle.value if chan.throttle is not None else None
        if rate is not None and rate >= 0 and (rate or None) != current_rate:
            current_rate = rate or None
            s.throttle.set_rate(current_rate)
        if spec.kill_at is not None and t == spec.kill_at:
            chan.send("killed", spec.rank, t)
            if os.environ.get("ICHECK_RANK_PROCESS"):
                chan.q.close()
                chan.q.join_thread()
                os._exit(137)
            s.crash()
            result["status"] = "killed"
            return result
        if t in adapts:
            new_world, prev_world = adapts[t]
            chan.send("gate", t, spec.rank)
            if not chan.gates[t].wait(120):
                return fail({"rank": spec.rank, "where": f"adapt gate at iteration {t} never opened"})
            s.begin_adapt(new_world)
            new_idx = _layout_arrays(app, spec.rank, new_world) if spec.rank < new_world else \
                {r.id: np.zeros(0, dtype=np.int64) for r in app.regions}
            new_bufs = {r.id: np.zeros(len(new_idx[r.id]) * (r.elem_size // 8), dtype=WORD) for r in app.regions}
            for r in app.regions:
                s.redistribute(r.id, new_bufs[r.id], len(new_idx[r.id]), r.scheme)
            bufs, idx = new_bufs, new_idx
            if spec.rank >= new_world:
                s.commit_adapt()
                s.finalize()
                result["status"] = "left"
                chan.send("left", spec.rank, t)
                return result
            bad = _verify(app, bufs, idx, t - 1, spec.rank, f"adapt@{t}")
            if bad:
                return fail(bad)
            result["verified"] += 1
            s.commit_adapt()
        _fill(app, bufs, idx, t)
        if app.compute_time:
            time.sleep(app.compute_time)
        if t % app.checkpoint_interval == 0:
            s.commit()
            result["commits"] += 1
        if t % app.probe_interval == 0:
            s.probe_agents()
        chan.send("iter", spec.rank, t)
    bad = _verify(app, bufs, idx, app.iterations, spec.rank, "final") if app.iterations else None
    if bad:
        return fail(bad)
    stats = s.finalize()
    if spec.out_dir:
        path = Path(spec.out_dir) / "metrics" / f"rank{spec.rank}_inc{spec.incarnation}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        export_csv(stats, path)
    result["verified"] += 1
    return result


def _rank_guarded(spec: RankSpec, chan: _Channel) -> None:
    try:
        res = run_rank(spec, chan)
    except SessionCrashed:
        res = {"rank": spec.rank, "incarnation": spec.incarnation, "status": "killed"}
    except Exception as exc:
        log.exception("rank %d failed", spec.rank)
        res = {"rank": spec.rank, "incarnation": spec.incarnation, "status": "fail",
               "failure": {"rank": spec.rank, "where": "exception", "error": f"{type(exc).__name__}: {exc}"}}
    chan.send("done", spec.rank, res)


def _rank_process_entry(spec: RankSpec, q, gates, throttle) -> None:
    os.environ["ICHECK_RANK_PROCESS"] = "1"
    logging.basicConfig(level=logging.WARNING)
    _rank_guarded(spec, _Channel(q, gates, throttle))


# --- runner ----------------------------------------------------------------------


@dataclass
class Verdict:
    passed: bool
    failures: List[dict]
    restarts: int
    results: List[dict]
    events: List[list]
    duration: float

    def to_json(self) -> dict:
        return asdict(self)


class _ThreadValue:
    def __init__(self, v):
        self.value = v


def run_scenario(scenario, out_dir, rank_mode: Optional[str] = None, cluster: Optional[LocalCluster] = None
                 ) -> Verdict:
    """Run a scenario end to end and write metrics CSVs and ``verdict.json`` under ``out_dir``."""
    sc = scenario if isinstance(scenario, Scenario) else parse_scenario(scenario)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rank_mode = rank_mode or sc.rank_mode
    own_cluster = cluster is None
    if own_cluster:
        cluster = LocalCluster(sc.cluster.nodes, sc.cluster.spares, PolicyConfig.from_dict(sc.policy),
                               pfs_root=out / "pfs", single_process=sc.cluster.single_process).start()
    t0 = time.monotonic()
    try:
        verdict = _Runner(sc, cluster, out, rank_mode).run()
    finally:
        if own_cluster:
            cluster.stop()
    verdict.duration = time.monotonic() - t0
    with open(out / "verdict.json", "w") as fh:
        json.dump(verdict.to_json(), fh, indent=1, default=str)
    return verdict


class _Runner:
    STALL = 300.0

    def __init__(self, sc: Scenario, cluster: LocalCluster, out: Path, rank_mode: str):
        self.sc = sc
        self.cluster = cluster
        self.out = out
        self.rank_mode = rank_mode
        self.ctx = mp.get_context("spawn") if rank_mode == "process" else None
        self.q = self.ctx.Queue() if self.ctx else queue.Queue()
        self.throttle = self.ctx.Value("d", -1.0) if self.ctx else _ThreadValue(-1.0)
        self.world = sc.app.world_size
        self.adapts = []  # (iteration, new, prev), computed against the running world size
        w = self.world
        for ev in sorted((e for e in sc.rm_script if e.action == "ADAPT"), key=lambda e: e.at_iteration):
            self.adapts.append((ev.at_iteration, ev.new_world_size, w))
            w = ev.new_world_size
        self.kills = sorted(e.at_iteration for e in sc.rm_script if e.action == "KILL_APP")
        self.iter_events = [e for e in sc.rm_script if e.at_iteration is not None
                            and e.action not in ("ADAPT", "KILL_APP")]
        self.fired = set()
        self.gates = {a: (self.ctx.Event() if self.ctx else threading.Event()) for a, _, _ in self.adapts}
        self.done_adapts = set()
        self.failures: List[dict] = []
        self.results: List[dict] = []
        self.handles: Dict[tuple, Any] = {}
        self.launch = int(time.time() * 1000) & 0xFFFFFFFF
        self.cluster.rm.fault_handler = self._fault
        if sc.throttle:
            self.throttle.value = float(sc.throttle)

    def _fault(self, ev: RmEvent) -> None:
        if ev.action == "THROTTLE":
            self.throttle.value = float(ev.rate or 0.0)
        elif ev.action == "KILL_AGENT":
            agent = ev.agent
            if not agent:
                app = self.cluster.controller.app_state(self.sc.app.name)
                agent = app.record.assignments[0].agent_id
            self.cluster.kill_agent(agent)
        elif ev.action == "KILL_APP":
            raise ScriptError("KILL_APP is iteration-triggered in scenarios")

    def _spawn(self, spec: RankSpec) -> None:
        chan_gates = self.gates
        if self.ctx:
            p = self.ctx.Process(target=_rank_process_entry, args=(spec, self.q, chan_gates, self.throttle),
                                 daemon=True)
            p.start()
            self.handles[(spec.incarnation, spec.rank)] = p
        else:
            chan = _Channel(self.q, chan_gates, self.throttle)
            t = threading.Thread(target=_rank_guarded, args=(spec, chan), daemon=True,
                                 name=f"rank{spec.rank}-inc{spec.incarnation}")
            t.start()
            self.handles[(spec.incarnation, spec.rank)] = t

    def _spec(self, rank, world, ptype, incarnation, restart, kill_at, adapts, join_iteration=0):
        return RankSpec(rank, world, int(ptype), tuple(self.cluster.controller.address), self.launch, restart,
                        asdict(self.sc.app), self.sc.mode, self.sc.throttle, kill_at, adapts, join_iteration,
                        out_dir=str(self.out), incarnation=incarnation)

    def run(self) -> Verdict:
        script_stop = threading.Event()
        timed = [e for e in self.sc.rm_script if e.at is not None]
        if timed:
            threading.Thread(target=self.cluster.rm.run_script, args=(timed, script_stop), daemon=True).start()
        incarnation = 0
        restarts = 0
        try:
            while True:
                kill_at = self.kills[0] if self.kills else None
                if self.kills:
                    self.kills.pop(0)
                adapts = [a for a in self.adapts if a[0] not in self.done_adapts]
                self.launch += 1
                for r in range(self.world):
                    self._spawn(self._spec(r, self.world, ProcessType.INITIAL, incarnation, incarnation > 0,
                                           kill_at, adapts))
                self.kill_at = kill_at
                killed = self._supervise(incarnation, kill_at)
                if not killed or self.failures:
                    break
                incarnation += 1
                restarts += 1
        finally:
            script_stop.set()
            for h in self.handles.values():
                if isinstance(h, mp.process.BaseProcess) and h.is_alive():
                    h.kill()
        events = [[round(t, 3), name, {k: str(v) for k, v in kv.items()}]
                  for t, name, kv in list(self.cluster.controller.events)]
        return Verdict(not self.failures, self.failures, restarts, self.results, events, 0.0)

    def _supervise(self, incarnation: int, kill_at: Optional[int]) -> bool:
        alive = {r for (inc, r) in self.handles if inc == incarnation}
        killed = False
        last = time.monotonic()
        exited = set()
        while alive:
            try:
                msg = self.q.get(timeout=1.0)
                last = time.monotonic()
            except queue.Empty:
                for r in sorted(alive):
                    h = self.handles.get((incarnation, r))
                    if isinstance(h, mp.process.BaseProcess) and h.exitcode is not None:
                        # its last message may still be in flight; decide on the next poll
                        if r not in exited:
                            exited.add(r)
                            continue
                        alive.discard(r)
                        self.failures.append({"rank": r, "where": "runner",
                                              "error": f"rank process exited with code {h.exitcode}"})
                if time.monotonic() - last > self.STALL:
                    self.failures.append({"where": "runner", "error": f"ranks {sorted(alive)} stalled"})
                    return False
                continue
            kind = msg[0]
            if kind == "iter":
                _, rank, t = msg
                if rank == 0:
                    self._iteration_events(t)
            elif kind == "gate":
                _, t, rank = msg
                alive |= self._open_gate(t, incarnation)
            elif kind == "killed":
                killed = True
            elif kind == "done":
                _, rank, res = msg
                alive.discard(rank)
                self.results.append(res)
                if res.get("status") == "fail":
                    self.failures.append(res.get("failure") or {"rank": rank})
                if res.get("status") == "killed":
                    killed = True
            if kind in ("killed",) and self.rank_mode == "process":
                _, rank, _ = msg
                p = self.handles.get((incarnation, rank))
                if p is not None:
                    p.join(10)
                    alive.discard(rank)
                    self.results.append({"rank": rank, "incarnation": incarnation, "status": "killed"})
        return killed

    def _iteration_events(self, t: int) -> None:
        for ev in self.iter_events:
            key = id(ev)
            if ev.at_iteration == t and key not in self.fired:
                self.fired.add(key)
                try:
                    self.cluster.rm.fire(ev)
                except Exception as exc:
                    log.warning("scripted %s failed: %s", ev.action, exc)
                    self.cluster.rm._record("error", action=ev.action, reason=exc)

    def _open_gate(self, t: int, incarnation: int) -> set:
        """Fire the adaptation notice once, start joiners, release the ranks; returns the joiner ranks."""
        if t in self.done_adapts:
            return set()
        self.done_adapts.add(t)
        _, new, prev = next(a for a in self.adapts if a[0] == t)
        self.cluster.rm.adapt(self.sc.app.name, new)
        joiners = set(range(prev, new))
        for r in sorted(joiners):
            self._spawn(self._spec(r, new, ProcessType.JOINING, incarnation, False, self.kill_at,
                                   [a for a in self.adapts if a[0] > t], join_iteration=t))
        self.world = new
        self.gates[t].set()
        return joiners


# --- summaries -------------------------------------------------------------------


def _read_stats(paths: Sequence[Path]) -> List[dict]:
    rows = []
    for p in paths:
        with open(p, newline="") as fh:
            for row in csv.DictReader(fh):
                rows.append(row)
    return rows


def summarize(*dirs) -> dict:
    """Per-mode mean and 95th percentile of commit timings (microseconds).

    With both ASYNC and SYNC rows present the report adds the paired ratio of
    mean blocked time.
    """
    files = []
    for d in dirs:
        d = Path(d)
        files.extend(sorted(d.rglob("*.csv")) if d.is_dir() else [d])
    rows = _read_stats(files)
    if not rows:
        raise ValueError("no commit statistics found")
    report: Dict[str, Any] = {"commits": len(rows), "modes": {}}
    for mode in sorted({r["mode"] for r in rows}):
        sel = [r for r in rows if r["mode"] == mode]
        entry = {"commits": len(sel)}
        for col in ("t_blocked_us", "t_copy_us", "t_transfer_us"):
            vals = np.array([float(r[col]) for r in sel])
            entry[col] = {"mean": float(vals.mean()), "p95": float(np.percentile(vals, 95))}
        report["modes"][mode] = entry
    if {"ASYNC", "SYNC"} <= set(report["modes"]):
        a = report["modes"]["ASYNC"]["t_blocked_us"]["mean"]
        s = report["modes"]["SYNC"]["t_blocked_us"]["mean"]
        report["async_over_sync_blocked"] = a / s if s else float("inf")
    return report


def format_summary(report: dict) -> str:
    lines = [f"commits: {report['commits']}"]
    for mode, e in report["modes"].items():
        parts = [f"{col[:-3]} mean={v['mean']:.0f}us p95={v['p95']:.0f}us"
                 for col, v in e.items() if col != "commits"]
        lines.append(f"{mode} ({e['commits']}): " + "; ".join(parts))
    if "async_over_sync_blocked" in report:
        lines.append(f"async/sync mean blocked ratio: {report['async_over_sync_blocked']:.3f}")
    return "\n".join(lines)
