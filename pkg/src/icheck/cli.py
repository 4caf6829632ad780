"""Command-line entry points: scenario runner, summaries, and the three services."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from typing import List, Optional, Sequence

from .transport import Address

log = logging.getLogger("icheck.cli")

_SUFFIX = {"k": 1024, "m": 1024 ** 2, "g": 1024 ** 3, "t": 1024 ** 4}


def parse_bytes(text: str) -> int:
    """``4096``, ``512M`` or ``4G`` to bytes."""
    t = text.strip().lower()
    for unit in ("ib", "b"):
        if t.endswith(unit) and len(t) > len(unit):
            t = t[: -len(unit)]
            break
    if t and t[-1] in _SUFFIX:
        return int(float(t[:-1]) * _SUFFIX[t[-1]])
    return int(t)


def parse_addr(text: str) -> Address:
    host, _, port = text.rpartition(":")
    if not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return (host or "127.0.0.1", int(port))


def parse_nodes(text: str, default_capacity: int = 4 * 1024 ** 3) -> dict:
    """``n1,n2`` or ``n1=4G,n2=2G`` to {node: capacity}."""
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        name, _, cap = item.partition("=")
        out[name] = parse_bytes(cap) if cap else default_capacity
    return out


def _wait_forever(stop: threading.Event) -> None:
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    while not stop.wait(0.5):
        pass


# --- subcommands ---------------------------------------------------------------


def cmd_run(args) -> int:
    from .harness import ScenarioError, run_scenario, validate_scenario

    try:
        sc = validate_scenario(args.scenario)
    except ScenarioError as exc:
        for e in exc.errors:
            print(f"{args.scenario}: {e}", file=sys.stderr)
        return 2
    if args.rank_mode:
        sc.rank_mode = args.rank_mode
    if args.mode:
        sc.mode = args.mode.upper()
    verdict = run_scenario(sc, args.out)
    print(f"{sc.name}: {'PASS' if verdict.passed else 'FAIL'} restarts={verdict.restarts} "
          f"duration={verdict.duration:.2f}s")
    for f in verdict.failures:
        print("  first divergence: " + ", ".join(f"{k}={v}" for k, v in f.items()))
    return 0 if verdict.passed else 1


def cmd_summarize(args) -> int:
    from .harness import format_summary, summarize

    try:
        report = summarize(*args.dirs)
    except (ValueError, OSError) as exc:
        print(f"summarize: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(report, indent=1) if args.json else format_summary(report))
    return 0


def cmd_validate(args) -> int:
    from .harness import ScenarioError, validate_scenario

    try:
        sc = validate_scenario(args.file)
    except ScenarioError as exc:
        for e in exc.errors:
            print(f"{args.file}: {e}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"{args.file}: {exc}", file=sys.stderr)
        return 1
    print(f"{args.file}: ok ({sc.name}, {sc.app.world_size} ranks, {len(sc.rm_script)} events)")
    return 0


def cmd_controller(args) -> int:
    from .controller import Controller, ControllerConfig

    cfg = ControllerConfig.load(args.config) if args.config else ControllerConfig()
    if args.listen:
        cfg.host, cfg.port = args.listen
    if args.pfs_root:
        cfg.pfs_root = args.pfs_root
    if args.rm:
        cfg.rm = args.rm
    ctl = Controller(cfg).start()
    print(f"controller listening on {ctl.address[0]}:{ctl.address[1]}", flush=True)
    try:
        _wait_forever(threading.Event())
    finally:
        ctl.stop()
    return 0


def cmd_manager(args) -> int:
    from .manager import Manager

    m = Manager(args.node_id, args.mem_capacity, args.controller, single_process=args.single_process,
                report_period=args.report_period, host=args.host).start()
    print(f"manager {args.node_id} listening on {m.address[0]}:{m.address[1]}", flush=True)
    try:
        _wait_forever(threading.Event())
    finally:
        m.stop()
    return 0


def cmd_rm(args) -> int:
    from .rm import ResourceManagerStub, ScriptError, load_script, validate_script

    inventory = parse_nodes(args.nodes)
    events = []
    if args.script:
        try:
            events = validate_script(load_script(args.script), inventory, args.app or [])
        except (ScriptError, OSError, ValueError) as exc:
            print(f"{args.script}: {exc}", file=sys.stderr)
            return 2
    host, port = args.listen or ("127.0.0.1", 0)
    rm = ResourceManagerStub(inventory, args.controller, host=host, port=port).start()
    print(f"rm listening on {rm.address[0]}:{rm.address[1]}", flush=True)
    stop = threading.Event()
    try:
        rm.run_script([e for e in events if e.at is not None], stop)
        for t, what, kv in rm.log:
            print(f"{t:8.3f} {what} " + " ".join(f"{k}={v}" for k, v in kv.items()), flush=True)
        if not args.exit:
            _wait_forever(stop)
    finally:
        rm.stop()
    return 0


# --- parser ----------------------------------------------------------------------


def _add_service_parsers(sub) -> None:
    p = sub.add_parser("controller", help="run the global controller")
    p.add_argument("--config", help="JSON config (policy, listen, pfs_root, rm)")
    p.add_argument("--listen", type=parse_addr, help="host:port to listen on")
    p.add_argument("--pfs-root", help="directory standing in for the parallel file system")
    p.add_argument("--rm", type=parse_addr, help="resource manager host:port")
    p.set_defaults(func=cmd_controller)

    p = sub.add_parser("manager", help="run a node manager")
    _manager_args(p)
    p.set_defaults(func=cmd_manager)

    p = sub.add_parser("rm", help="run the resource-manager stub")
    _rm_args(p)
    p.set_defaults(func=cmd_rm)


def _manager_args(p) -> None:
    p.add_argument("--node-id", required=True)
    p.add_argument("--controller", type=parse_addr, required=True)
    p.add_argument("--mem-capacity", type=parse_bytes, required=True, help="bytes, K/M/G suffixes allowed")
    p.add_argument("--single-process", action="store_true", help="run agents as threads of the manager")
    p.add_argument("--report-period", type=float, default=1.0)
    p.add_argument("--host", default="127.0.0.1")


def _rm_args(p) -> None:
    p.add_argument("--script", help="JSON array of timed events")
    p.add_argument("--controller", type=parse_addr, required=True)
    p.add_argument("--nodes", required=True, help="inventory, e.g. n1,n2 or n1=4G,n2=4G")
    p.add_argument("--listen", type=parse_addr, help="host:port to listen on")
    p.add_argument("--app", action="append", help="application name the script may reference")
    p.add_argument("--exit", action="store_true", help="exit once the script has run")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="icheck", description="In-memory checkpointing for malleable jobs")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario and verify it against the data generator")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rank-mode", choices=("process", "thread"))
    p.add_argument("--mode", choices=("ASYNC", "SYNC", "async", "sync"))
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("summarize", help="commit overhead report from metrics CSVs")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("validate", help="check a scenario file")
    p.add_argument("file")
    p.set_defaults(func=cmd_validate)

    _add_service_parsers(sub)
    return ap


def _setup_logging(verbose: int) -> None:
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    return args.func(args)


def manager_main(argv: Optional[List[str]] = None) -> int:
    return main(["manager", *(sys.argv[1:] if argv is None else argv)])


def rm_main(argv: Optional[List[str]] = None) -> int:
    return main(["rm", *(sys.argv[1:] if argv is None else argv)])


def controller_main(argv: Optional[List[str]] = None) -> int:
    return main(["controller", *(sys.argv[1:] if argv is None else argv)])


if __name__ == "__main__":
    sys.exit(main())
