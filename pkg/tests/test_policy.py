import pytest

from icheck.model import InvalidArgument
from icheck.policy import NodeView, PolicyConfig, SchedulingPolicy, place_many

MiB = 1024 * 1024
GiB = 1024 * MiB


@pytest.fixture
def policy():
    return SchedulingPolicy(PolicyConfig())


def test_small_app_gets_one_agent(policy):
    assert policy.agent_count(8 * MiB, 4) == 1


def test_large_app_splits_into_equal_groups(policy):
    n = policy.agent_count(1 * GiB, 48)
    assert n == 4
    groups = policy.rank_groups(48, n)
    assert [len(g) for g in groups] == [12] * 4
    assert sum(groups, []) == list(range(48))


def test_agent_count_bounds(policy):
    assert policy.agent_count(0, 4) == 1
    assert policy.agent_count(100 * GiB, 3) == 3
    assert policy.agent_count(100 * GiB, 64) == 8


def test_placement_prefers_most_free_memory(policy):
    nodes = [NodeView("a", 10 * GiB, 6 * GiB), NodeView("b", 10 * GiB, 2 * GiB)]
    assert policy.place(1 * GiB, nodes) == "b"


def test_placement_respects_headroom(policy):
    node = NodeView("a", 10 * GiB, 7 * GiB)
    assert policy.place(1.5 * GiB, [node]) == "a"  # 8.5 GiB == 85 %
    assert policy.place(1.6 * GiB, [node]) is None


def test_place_many_charges_each_placement(policy):
    nodes = [NodeView("a", 10 * GiB, 0), NodeView("b", 10 * GiB, 0)]
    assert place_many(policy, [4 * GiB] * 4, nodes) == ["a", "b", "a", "b"]
    assert place_many(policy, [4 * GiB] * 5, nodes) is None


def test_probe_dead_band(policy):
    target = policy.config.target_rate
    assert policy.probe(None, 2, 8) == 2
    assert policy.probe(0.4 * target, 2, 8) == 3
    assert policy.probe(0.6 * target, 2, 8) == 2
    assert policy.probe(1.9 * target, 2, 8) == 2
    assert policy.probe(2.1 * target, 2, 8) == 1
    assert policy.probe(2.1 * target, 1, 8) == 1
    assert policy.probe(0.1 * target, 2, 2) == 2


def test_config_validation():
    with pytest.raises(InvalidArgument):
        PolicyConfig(mem_headroom=1.0)
    with pytest.raises(InvalidArgument):
        PolicyConfig(per_agent_capacity=0)
    with pytest.raises(InvalidArgument):
        PolicyConfig.from_dict({"ranks_per_agent": 4})
    assert PolicyConfig.from_dict({"flush_age": 5}).flush_age == 5
