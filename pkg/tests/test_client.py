import threading
import time

import numpy as np
import pytest

from icheck.client import ClientConfig, CommitError, Mode, SessionCrashed, export_csv, icheck_init
from icheck.cluster import LocalCluster
from icheck.model import ICheckError, InvalidArgument, ProcessType

MiB = 1024 * 1024


def _ranks(cluster, name, world, fn, **cfg):
    """Run ``fn(session, rank)`` on every rank in its own thread."""
    errors, out = [], {}

    def body(r):
        try:
            s = icheck_init(name, r, world, config=cluster.client_config(**cfg))
            out[r] = fn(s, r)
        except BaseException as exc:  # surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=body, args=(r,)) for r in range(world)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(120)
    if errors:
        raise errors[0]
    return out


def test_commit_and_restart_round_trip(cluster):
    def body(s, r):
        buf = np.arange(1000, dtype=np.float64) + r
        s.add_adapt("u", buf, 500, 16, total_n=1000)
        s.commit()
        s.commit()
        s._drain()
        want = buf.copy()
        buf[:] = -1
        assert s.restart()
        assert np.array_equal(buf, want)
        return s.finalize()

    stats = _ranks(cluster, "rt", 2, body)
    assert all(len(v) == 2 and all(x.ok for x in v) for v in stats.values())
    assert cluster.controller.app_state("rt").record.latest_complete().version == 2


def test_duplicate_init_in_one_process(cluster):
    s = icheck_init("dup", 0, 1, config=cluster.client_config())
    try:
        with pytest.raises(ICheckError, match="already initialized"):
            icheck_init("dup", 0, 1, config=cluster.client_config())
    finally:
        s.finalize()


def test_add_adapt_argument_errors(cluster):
    s = icheck_init("args", 0, 1, config=cluster.client_config())
    try:
        buf = bytearray(64)
        with pytest.raises(ICheckError, match="no regions"):
            s.commit()
        s.add_adapt("a", buf, 64, 1)
        with pytest.raises(InvalidArgument, match="already added"):
            s.add_adapt("a", buf, 64, 1)
        with pytest.raises(InvalidArgument):
            s.add_adapt("b", buf, 64, 0)
        with pytest.raises(InvalidArgument, match="expected"):
            s.add_adapt("c", buf, 32, 1)
        with pytest.raises(InvalidArgument, match="owns"):
            s.add_adapt("d", buf, 64, 1, total_n=100)
        with pytest.raises(ICheckError, match="outside"):
            s.redistribute("a", buf, 64)
    finally:
        s.finalize()
    with pytest.raises(ICheckError, match="not initialized"):
        s.commit()


def test_world_size_mismatch_is_rejected(cluster):
    s = icheck_init("ws", 0, 2, config=cluster.client_config())
    try:
        with pytest.raises(ICheckError):
            icheck_init("ws", 1, 3, config=cluster.client_config())
    finally:
        s.crash()


def test_async_commit_returns_before_transfer(cluster):
    s = icheck_init("async", 0, 1, config=cluster.client_config(throttle=16 * MiB))
    try:
        buf = bytearray(8 * MiB)
        s.add_adapt("a", buf, len(buf), 1)
        st = s.commit()
        assert st.mode is Mode.ASYNC and st.t_blocked < 0.25
        s._drain()
        assert st.ok and st.t_transfer >= 0.4
        # the staging copy is private: mutating the buffer now does not change v1
        buf[:] = b"\x01" * len(buf)
        s.commit()
        second = s.commit()  # waits for the first in-flight transfer
        assert second.t_blocked >= 0.2
        s.finalize()
    finally:
        s.crash()


def test_sync_commit_blocks_for_transfer(cluster):
    s = icheck_init("sync", 0, 1, config=cluster.client_config(sync=True))
    buf = bytearray(4 * MiB)
    s.add_adapt("a", buf, len(buf), 1)
    st = s.commit()
    assert st.mode is Mode.SYNC and st.ok
    assert st.t_blocked >= st.t_transfer >= 0
    s.finalize()


def test_failed_commit_is_reported_on_the_next_call(tmp_path):
    with LocalCluster({"n1": 4 * MiB}, pfs_root=tmp_path / "pfs") as c:
        s = icheck_init("small", 0, 1, config=c.client_config())
        buf = bytearray(8 * MiB)
        s.add_adapt("a", buf, len(buf), 1)
        first = s.commit()
        s._drain()
        assert first.ok is False
        with pytest.raises(CommitError, match="version 1"):
            s.commit()
        s.crash()


def test_crash_mid_commit_keeps_previous_version(cluster):
    s = icheck_init("mid", 0, 1, config=cluster.client_config(sync=True))
    buf = bytearray(b"a" * MiB)
    s.add_adapt("a", buf, len(buf), 1)
    s.commit()
    buf[:] = b"b" * MiB
    s.inject_crash(after_bytes=MiB // 2)
    s.commit()
    assert s.crashed
    with pytest.raises(SessionCrashed):
        s.commit()
    s2 = icheck_init("mid", 0, 1, config=cluster.client_config())
    buf2 = bytearray(MiB)
    s2.add_adapt("a", buf2, len(buf2), 1)
    assert s2.restart()
    assert bytes(buf2) == b"a" * MiB
    s2.finalize()


def test_stats_csv(tmp_path, cluster):
    s = icheck_init("csv", 0, 1, config=cluster.client_config())
    s.add_adapt("a", bytearray(1024), 1024, 1)
    s.commit()
    stats = s.finalize()
    path = tmp_path / "m.csv"
    export_csv(stats, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "commit,version,t_copy_us,t_blocked_us,t_transfer_us,mode"
    assert lines[1].startswith("0,1,") and lines[1].endswith(",ASYNC")


def test_config_from_env():
    cfg = ClientConfig.from_env({"ICHECK_CONTROLLER": "10.0.0.1:9", "ICHECK_SYNC": "1", "ICHECK_RETRIES": "3"})
    assert cfg.controller == ("10.0.0.1", 9) and cfg.sync and cfg.retries == 3


def test_adapt_grow(cluster):
    n = 37
    barrier = threading.Barrier(3)
    joined = {}

    def initial(s, r):
        lo, hi = [(0, 19), (19, 37)][r]
        s.add_adapt("x", np.arange(lo, hi, dtype=np.int64), hi - lo, 8, total_n=n)
        s.commit()
        s._drain()
        barrier.wait()
        s.begin_adapt(3)
        new = np.empty([13, 12][r], dtype=np.int64)
        s.redistribute("x", new, len(new))
        s.commit_adapt()
        s.commit()
        s.finalize()
        return new

    def joiner():
        barrier.wait()
        cluster.controller.handle_adapt_notice(0, "grow", 3)
        s = icheck_init("grow", 2, 3, process_type=ProcessType.JOINING, config=cluster.client_config())
        new = np.empty(12, dtype=np.int64)
        s.add_adapt("x", new, 12, 8, total_n=n)
        s.redistribute("x", new, 12)
        s.commit_adapt()
        s.commit()
        s.finalize()
        joined[2] = new

    t = threading.Thread(target=joiner)
    t.start()
    out = _ranks(cluster, "grow", 2, initial)
    t.join(120)
    assert np.array_equal(np.concatenate([out[0], out[1], joined[2]]), np.arange(n))
    rec = cluster.controller.app_state("grow").record
    assert rec.world_size == 3 and rec.adapt_epoch == 1
