import numpy as np
import pytest

from icheck import protocol as P
from icheck.agent import SNAPSHOT, Agent, StagingStore
from icheck.layout import Layout, global_indices, owned_count
from icheck.model import CorruptState, DistributionScheme, RegionMeta, StorageLevel, crc32
from icheck.transport import Connection, RemoteError

MiB = 1024 * 1024


@pytest.fixture
def agent(tmp_path):
    a = Agent(1, "n1", app_id=1, pfs_root=str(tmp_path / "pfs")).start()
    yield a
    a.stop()


def _sum(rid, data, elem_size=1, total_n=None):
    n = len(data) // elem_size
    return P.RegionSum(rid, elem_size, n, 0, total_n if total_n is not None else n, len(data), crc32(data))


def register(conn, rank, regions, epoch=0):
    decls = [P.RegionDecl(rid, es, len(d) // es, 0, len(d) // es) for rid, d, es in regions]
    assert isinstance(conn.call(P.MemRegister(1, rank, epoch, decls)), P.Ok)


def commit(conn, version, rank, regions, chunk=None, corrupt=False, epoch=0):
    sums = [_sum(rid, d, es) for rid, d, es in regions]
    conn.send(P.CommitBegin(1, epoch, version, rank, sums))
    for rid, d, _ in regions:
        step = chunk or max(len(d), 1)
        for off in range(0, max(len(d), 1), step):
            piece = d[off : off + step]
            if corrupt and off == 0 and piece:
                piece = bytes([piece[0] ^ 1]) + piece[1:]
            conn.send(P.CommitData(rid, off, piece))
    conn.send(P.CommitEnd(1, version, rank))
    return conn.recv(timeout=30)


def restore(conn, version, rank, rid, epoch=0):
    conn.send(P.RestoreReq(1, epoch, version, rank, rid))
    out = bytearray()
    while True:
        m = conn.recv(timeout=30)
        if isinstance(m, P.Error):
            raise RemoteError(m.kind, m.reason)
        out += m.data
        if m.last:
            return bytes(out)


def test_commit_in_chunks_and_restore(agent):
    data = np.random.default_rng(1).integers(0, 256, 8 * MiB, dtype=np.uint8).tobytes()
    with Connection.connect(agent.address) as c:
        register(c, 0, [("data", data, 8)])
        ack = commit(c, 1, 0, [("data", data, 8)], chunk=4 * MiB)
        assert ack.status == P.ACK_OK
        assert restore(c, 1, 0, "data") == data
    assert agent.store.bytes_staged == len(data)
    agent.store.check_accounting()


def test_corrupted_chunk_is_refused(agent):
    data = bytes(range(256)) * 10
    with Connection.connect(agent.address) as c:
        register(c, 0, [("data", data, 1)])
        ack = commit(c, 1, 0, [("data", data, 1)], corrupt=True)
        assert ack.status == P.ACK_INTEGRITY
    assert len(agent.store) == 0


def test_unregistered_region(agent):
    with Connection.connect(agent.address) as c:
        ack = commit(c, 1, 0, [("nope", b"abc", 1)])
        assert ack.status == P.ACK_UNREGISTERED and "not registered" in ack.reason
        register(c, 0, [("a", b"abcd", 1)])
        ack = commit(c, 1, 0, [("a", b"abcdef", 1)])
        assert ack.status == P.ACK_UNREGISTERED


def test_capacity_budget(tmp_path):
    a = Agent(2, "n1", 1, budget=100).start()
    try:
        with Connection.connect(a.address) as c:
            register(c, 0, [("a", bytes(80), 1)])
            assert commit(c, 1, 0, [("a", bytes(80), 1)]).status == P.ACK_OK
            assert commit(c, 2, 0, [("a", bytes(80), 1)]).status == P.ACK_CAPACITY
    finally:
        a.stop()


def test_restore_missing(agent):
    with Connection.connect(agent.address) as c:
        with pytest.raises(RemoteError) as ei:
            restore(c, 7, 0, "data")
        assert ei.value.kind == "missing"
        with pytest.raises(RemoteError):
            restore(c, SNAPSHOT, 0, "data")


def test_flush_then_evict_then_restore_from_pfs(agent, tmp_path):
    data = b"0123456789" * 100
    with Connection.connect(agent.address) as c:
        register(c, 0, [("d", data, 2)])
        commit(c, 3, 0, [("d", data, 2)])
        ack = c.call(P.FlushOrder(1, "app", 1, 0, 3, [0], 1, False))
        assert ack.ok and not ack.evicted
        assert agent.store.get((1, 0, 3, 0, "d")).level is StorageLevel.BOTH
        again = c.call(P.FlushOrder(1, "app", 1, 0, 3, [0], 1, True))
        assert again.ok and again.evicted
        assert agent.store.bytes_staged == 0
        assert restore(c, 3, 0, "d") == data
    assert (tmp_path / "pfs" / "1" / "epoch0" / "v3" / "manifest.json").exists()
    assert (tmp_path / "pfs" / "1" / "epoch0" / "v3" / "rank0" / "d.bin").read_bytes() == data


def test_flush_io_failure_keeps_memory(agent):
    data = b"x" * 64

    def boom():
        raise OSError("disk full")

    agent.pfs_fault = boom
    with Connection.connect(agent.address) as c:
        register(c, 0, [("d", data, 1)])
        commit(c, 1, 0, [("d", data, 1)])
        ack = c.call(P.FlushOrder(1, "app", 1, 0, 1, [0], 1, True))
    assert not ack.ok and "I/O" in ack.reason
    assert agent.store.get((1, 0, 1, 0, "d")).level is StorageLevel.MEMORY


def test_store_refuses_unsafe_eviction():
    st = StagingStore()
    meta = RegionMeta("a", 1, 3, DistributionScheme.BLOCK, 3, 3, crc32(b"abc"))
    st.put((1, 0, 1, 0, "a"), b"abc", meta)
    with pytest.raises(CorruptState):
        st.set_level((1, 0, 1, 0, "a"), StorageLevel.PFS)
    st.check_accounting()


def test_migrate_copy_then_refuse_commits(tmp_path):
    src = Agent(1, "n1", 1).start()
    dst = Agent(2, "n2", 1).start()
    try:
        data = bytes(range(200))
        with Connection.connect(src.address) as c:
            register(c, 0, [("d", data, 1)])
            commit(c, 1, 0, [("d", data, 1)])
            src.corrupt_next_migration = True
            ack = c.call(P.MigrateOrder(1, [0], "n2", 1, dst.info()))
            assert ack.ok and ack.entries == 1
            assert src.counters.migrations_retried == 1
            # copy-then-delete: the source keeps its copy until shutdown
            assert src.store.get((1, 0, 1, 0, "d")) is not None
            late = commit(c, 2, 0, [("d", data, 1)])
            assert late.status == P.ACK_FAILED and late.reason.startswith("moved")
        with Connection.connect(dst.address) as c:
            assert restore(c, 1, 0, "d") == data
    finally:
        src.stop()
        dst.stop()
    assert len(src.store) == 0


def test_migrate_to_unreachable_target():
    src = Agent(1, "n1", 1).start()
    try:
        with Connection.connect(src.address) as c:
            register(c, 0, [("d", b"abc", 1)])
            commit(c, 1, 0, [("d", b"abc", 1)])
            bad = P.AgentInfo(9, "n9", "127.0.0.1", 1, [])
            ack = c.call(P.MigrateOrder(1, [0], "n9", 1, bad))
            assert not ack.ok and ack.reason.startswith("migration failed")
            # failed migration leaves the rank writable
            assert commit(c, 2, 0, [("d", b"abc", 1)]).status == P.ACK_OK
    finally:
        src.stop()


def _snapshot(conn, epoch, rank, rid, data, elem_size, total_n):
    conn.send(P.SnapshotPush(1, epoch, rank, [_sum(rid, data, elem_size, total_n)]))
    conn.send(P.CommitData(rid, 0, data))
    conn.send(P.CommitEnd(1, 0, rank))
    return conn.recv(timeout=30)


def _redist(conn, epoch, rid, es, old, new, dst):
    conn.send(P.RedistReq(1, epoch, rid, es, P.to_layout_spec(old), P.to_layout_spec(new), dst))
    out = bytearray()
    while True:
        m = conn.recv(timeout=30)
        if isinstance(m, P.Error):
            raise RemoteError(m.kind, m.reason)
        out += m.data
        if m.last:
            return bytes(out)


@pytest.mark.parametrize("old_s,new_s,n,p_old,p_new", [
    ("BLOCK", "BLOCK", 40, 2, 4),
    ("BLOCK", "CYCLIC", 16, 4, 4),
    ("CYCLIC", "BLOCK", 33, 3, 2),
    ("BLOCK", "BLOCK", 12, 3, 3),
])
def test_redistribution_across_two_agents(old_s, new_s, n, p_old, p_new):
    es = 4
    glob = np.arange(n, dtype=np.uint32)
    old, new = Layout(n, p_old, old_s), Layout(n, p_new, new_s)
    a1 = Agent(1, "n1", 1).start()
    a2 = Agent(2, "n2", 1).start()
    try:
        half = (p_old + 1) // 2
        holders = {r: (a1 if r < half else a2) for r in range(p_old)}
        for r in range(p_old):
            with Connection.connect(holders[r].address) as c:
                register(c, r, [("d", glob[global_indices(old, r)].tobytes(), es)])
                ack = _snapshot(c, 1, r, "d", glob[global_indices(old, r)].tobytes(), es, n)
                assert ack.status == P.ACK_OK
        sources = [P.AgentInfo(1, "n1", *a1.address, list(range(half))),
                   P.AgentInfo(2, "n2", *a2.address, list(range(half, p_old)))]
        a1.directories[(1, 1)] = sources
        a2.directories[(1, 1)] = sources
        for dst in range(p_new):
            target = a1 if dst % 2 == 0 else a2
            with Connection.connect(target.address) as c:
                got = _redist(c, 1, "d", es, old, new, dst)
            assert got == glob[global_indices(new, dst)].tobytes()
            assert len(got) == owned_count(new, dst) * es
    finally:
        a1.stop()
        a2.stop()


def test_redistribution_without_snapshot_times_out():
    a = Agent(1, "n1", 1, snapshot_timeout=0.2).start()
    try:
        a.directories[(1, 1)] = [P.AgentInfo(1, "n1", *a.address, [0])]
        with Connection.connect(a.address) as c:
            with pytest.raises(RemoteError) as ei:
                _redist(c, 1, "d", 1, Layout(4, 1), Layout(4, 2), 0)
        assert ei.value.kind == "no source"
    finally:
        a.stop()


def test_pushed_plan_is_used():
    a = Agent(1, "n1", 1).start()
    try:
        old, new = Layout(8, 1), Layout(8, 2)
        src = bytes(range(8))
        with Connection.connect(a.address) as c:
            register(c, 0, [("d", src, 1)])
            _snapshot(c, 1, 0, "d", src, 1, 8)
            runs = [P.Run(0, 4, 1, 0, 4)]
            info = P.AgentInfo(1, "n1", *a.address, [0])
            c.call(P.PlanPush(1, 1, "d", P.to_layout_spec(old), P.to_layout_spec(new), runs, [info]))
            assert _redist(c, 1, "d", 1, old, new, 1) == src[4:]
        assert a.counters.plans_pushed_used == 1 and a.counters.plans_computed == 0
    finally:
        a.stop()


def test_purge_drops_old_versions(agent):
    with Connection.connect(agent.address) as c:
        register(c, 0, [("d", b"ab", 1)])
        for v in (1, 2, 3):
            commit(c, v, 0, [("d", b"ab", 1)])
        assert c.call(P.Purge(1, 0, 3)).detail == "2"
    assert sorted(k[2] for k in agent.store.keys()) == [3]
