import threading
import time

import pytest

from icheck import protocol as P
from icheck.controller import ControllerConfig, ControllerError
from icheck.model import DistributionScheme, NodeStats, ProcessType, RegionMeta, StorageLevel

MiB = 1024 * 1024


def _register(ctl, name, world, rank=0, launch_id=0, regions=()):
    return ctl.register(P.Register(name, rank, world, int(ProcessType.INITIAL), launch_id, list(regions)))


def _meta(crc=1, size=8):
    return [RegionMeta("d", 1, size, DistributionScheme.BLOCK, 2 * size, size, crc)]


def _commit_all(ctl, app_id, version, world, epoch=0):
    for r in range(world):
        agent = next(a for a in ctl.app_state(app_id).record.assignments if r in a.ranks)
        ctl.record_commit(app_id, epoch, version, r, agent.agent_id, _meta(crc=version * 10 + r))


def test_register_assigns_every_rank(cluster):
    ack = _register(cluster.controller, "app", 4)
    ranks = sorted(r for a in ack.assignments for r in a.ranks)
    assert ranks == [0, 1, 2, 3] and ack.world_size == 4 and ack.next_version == 1


def test_other_ranks_wait_for_rank_zero(cluster):
    ctl = cluster.controller
    got = {}
    t = threading.Thread(target=lambda: got.setdefault(1, _register(ctl, "late", 2, rank=1)))
    t.start()
    time.sleep(0.2)
    assert not got
    ack0 = _register(ctl, "late", 2)
    t.join(10)
    assert got[1].app_id == ack0.app_id


def test_large_hint_spreads_agents(cluster):
    hint = [P.RegionDesc("d", 1, 0, [256 * MiB] * 8)]
    ack = _register(cluster.controller, "big", 8, regions=hint)
    assert len(ack.assignments) > 1


def test_commit_is_idempotent_and_completes_once(cluster):
    ctl = cluster.controller
    app_id = _register(ctl, "idem", 2).app_id
    agent = ctl.app_state(app_id).record.assignments[0].agent_id
    ctl.record_commit(app_id, 0, 1, 0, agent, _meta())
    ctl.record_commit(app_id, 0, 1, 0, agent, _meta())
    assert not ctl.version_status(app_id, 1).complete
    ctl.record_commit(app_id, 0, 1, 1, agent, _meta())
    ctl.record_commit(app_id, 0, 1, 1, agent, _meta())
    assert ctl.version_status(app_id, 1).complete
    assert ctl.count_events("complete") == 1


def test_commit_validation(cluster):
    ctl = cluster.controller
    app_id = _register(ctl, "val", 2).app_id
    with pytest.raises(ControllerError):
        ctl.record_commit(app_id, 0, 1, 5, 1, _meta())
    with pytest.raises(ControllerError):
        ctl.record_commit(999, 0, 1, 0, 1, _meta())


def test_only_two_complete_versions_are_kept(cluster):
    ctl = cluster.controller
    app_id = _register(ctl, "gc", 2).app_id
    for v in (1, 2, 3, 4):
        _commit_all(ctl, app_id, v, 2)
    assert [v.version for v in ctl.app_state(app_id).record.versions] == [3, 4]
    purge = ctl.record_commit(app_id, 0, 4, 0, 1, _meta())
    assert purge.below_version == 3


def test_restart_info_picks_newest_complete(cluster):
    ctl = cluster.controller
    app_id = _register(ctl, "rs", 2).app_id
    _commit_all(ctl, app_id, 1, 2)
    _commit_all(ctl, app_id, 2, 2)
    agent = ctl.app_state(app_id).record.assignments[0].agent_id
    ctl.record_commit(app_id, 0, 3, 0, agent, _meta())  # v3 incomplete
    info = ctl.restart_info(app_id)
    assert info.found and info.version == 2 and info.world_size == 2
    assert {(c.rank, c.crc) for c in info.checksums} == {(0, 20), (1, 21)}
    assert [l.rank for l in info.locations] == [0, 1]
    assert not ctl.restart_info(name="nobody").found


def test_restart_info_with_dead_holder_falls_back_to_pfs(cluster):
    ctl = cluster.controller
    app_id = _register(ctl, "dead", 1).app_id
    _commit_all(ctl, app_id, 1, 1)
    v = ctl.app_state(app_id).record.find_version(1)
    holder = v.locations[0]
    ctl.agents[holder].alive = False
    assert not ctl.restart_info(app_id).found
    v.storage_level[0] = StorageLevel.BOTH
    info = ctl.restart_info(app_id)
    assert info.found and info.locations[0].agent_id == 0


def test_reclaim_of_unowned_node_is_refused(cluster):
    reply = cluster.controller.handle(P.NodeReclaim(["n3"], time.time() + 5))
    assert isinstance(reply, P.Error) and reply.kind == "not owned"


def test_node_request_is_granted_and_suppressed_while_outstanding(cluster):
    ctl = cluster.controller
    with ctl._lock:
        ctl.outstanding_requests.add("memory")
    assert not ctl.request_nodes(1, "memory")
    assert ctl.count_events("node_request_suppressed") == 1
    with ctl._lock:
        ctl.outstanding_requests.discard("memory")
    assert ctl.request_nodes(1, "memory")
    assert "n3" in ctl.owned_nodes()
    assert not ctl.request_nodes(1, "memory")  # RM has no spares left
    assert ctl.count_events("node_denied") == 1


def test_flush_schedule_age_and_pressure(cluster):
    ctl = cluster.controller
    cfg = ctl.config.policy
    app_id = _register(ctl, "fl", 1).app_id
    _commit_all(ctl, app_id, 1, 1)
    v = ctl.app_state(app_id).record.find_version(1)
    done = v.completed_at
    assert ctl.schedule_flush(done + cfg.flush_age - 1) == []
    orders = ctl.schedule_flush(done + cfg.flush_age + 1)
    assert len(orders) == 1 and orders[0][1].version == 1 and not orders[0][1].evict
    # one flush in flight per node
    assert ctl.schedule_flush(done + cfg.flush_age + 2) == []
    node = ctl.nodes[orders[0][0]]
    with ctl._lock:
        node.flush_inflight = None
        node.stats = NodeStats(node.node_id, node.capacity, int(0.8 * node.capacity))
    orders = ctl.schedule_flush(done)
    assert len(orders) == 1 and orders[0][1].evict


def test_directory_for_unknown_epoch(cluster):
    ctl = cluster.controller
    app_id = _register(ctl, "dir", 1).app_id
    reply = ctl.handle(P.DirectoryQuery(app_id, 4))
    assert isinstance(reply, P.Error) and reply.kind == "missing"


def test_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"listen": "127.0.0.1:7777", "rm": "127.0.0.1:7778", "policy": {"flush_age": 3}}')
    cfg = ControllerConfig.load(path)
    assert (cfg.host, cfg.port, cfg.rm, cfg.policy.flush_age) == ("127.0.0.1", 7777, ("127.0.0.1", 7778), 3)
