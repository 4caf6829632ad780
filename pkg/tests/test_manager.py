import pytest
from hypothesis import given, strategies as st

from icheck import protocol as P
from icheck.manager import EwmaPredictor, Manager, predict
from icheck.model import crc32
from icheck.transport import Connection

from oracles import ewma_ref

MiB = 1024 * 1024


def test_ewma_first_sample_seeds():
    assert predict(None, 100) == 100


def test_ewma_step():
    assert predict(100, 200, alpha=0.5) == 150


def test_ewma_rejects_bad_alpha():
    with pytest.raises(ValueError):
        predict(1, 2, alpha=0)
    with pytest.raises(ValueError):
        EwmaPredictor(1.5)


@given(st.lists(st.floats(0, 1e12), min_size=1, max_size=40), st.floats(0.01, 1.0))
def test_ewma_matches_reference_and_stays_in_range(samples, alpha):
    p = EwmaPredictor(alpha)
    got = [p.update(s) for s in samples]
    assert got == pytest.approx(ewma_ref(samples, alpha), rel=1e-9)
    for i, v in enumerate(got):
        assert min(samples[: i + 1]) - 1e-3 <= v <= max(samples[: i + 1]) + 1e-3


def _stage(agent, nbytes, rank):
    with Connection.connect(agent.address) as c:
        data = bytes(nbytes)
        decl = P.RegionDecl("d", 1, nbytes, 0, nbytes)
        c.call(P.MemRegister(1, rank, 0, [decl]))
        c.send(P.CommitBegin(1, 0, 1, rank, [P.RegionSum("d", 1, nbytes, 0, nbytes, nbytes, crc32(data))]))
        c.send(P.CommitData("d", 0, data))
        c.send(P.CommitEnd(1, 1, rank))
        assert c.recv(timeout=30).status == P.ACK_OK


def test_sample_sums_agents_and_measures_bandwidth():
    m = Manager("n1", 64 * MiB).start()
    try:
        ready = m.launch_agents(P.LaunchAgents([P.AgentSpec(1, 1, [0], 0), P.AgentSpec(2, 1, [1], 0)], "", 0, ""))
        assert [a.agent_id for a in ready.agents] == [1, 2] and ready.failed == []
        m.sample_stats(now=100.0)
        _stage(m.agents[1].agent, 3 * MiB, 0)
        _stage(m.agents[2].agent, 5 * MiB, 1)
        s = m.sample_stats(now=101.0)
        assert s.mem_used == 8 * MiB
        assert s.bw_used == pytest.approx(8 * MiB)  # 8 MiB received within one second
        s = m.sample_stats(now=103.0)
        assert s.bw_used == pytest.approx(0.0)
        assert s.bw_predicted == pytest.approx(2 * MiB)  # samples 0, 8, 0 MiB/s at alpha 0.5
    finally:
        m.stop()


def test_duplicate_agent_is_rejected():
    m = Manager("n1", 64 * MiB).start()
    try:
        m.launch_agents(P.LaunchAgents([P.AgentSpec(7, 1, [0], 0)], "", 0, ""))
        again = m.launch_agents(P.LaunchAgents([P.AgentSpec(7, 1, [0], 0)], "", 0, ""))
        assert again.agents == [] and again.failed == [7]
    finally:
        m.stop()


def test_killed_agent_is_reported_dead():
    m = Manager("n1", 64 * MiB).start()
    try:
        m.launch_agents(P.LaunchAgents([P.AgentSpec(3, 1, [0], 0)], "", 0, ""))
        assert m.kill_agent(3)
        assert not m.kill_agent(99)
        s = m.sample_stats()
        assert s.mem_used == 0 and not m.agents[3].alive
    finally:
        m.stop()


def test_agents_as_processes():
    m = Manager("n1", 64 * MiB, single_process=False).start()
    try:
        ready = m.launch_agents(P.LaunchAgents([P.AgentSpec(1, 1, [0], 0)], "", 0, ""))
        info = ready.agents[0]
        with Connection.connect((info.host, info.port)) as c:
            assert c.call(P.AgentStatsQuery()).agent_id == 1
        assert m.kill_agent(1)
        assert not m.agents[1].process.is_alive()
    finally:
        m.stop()
