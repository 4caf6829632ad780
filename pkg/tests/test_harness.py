import json
import csv

import numpy as np
import pytest

from icheck.harness import (ScenarioError, decode_iteration, first_divergence, format_summary, generate,
                            parse_scenario, run_scenario, summarize, validate_scenario)

from oracles import pattern_word

GiB = 1024 ** 3


def scenario(**over):
    raw = {
        "name": "t",
        "app": {"name": "app", "world_size": 3, "iterations": 8, "checkpoint_interval": 2, "probe_interval": 4,
                "seed": 5, "regions": [{"id": "a", "elements": 100, "elem_size": 16},
                                       {"id": "b", "elements": 31, "scheme": "CYCLIC"}]},
        "cluster": {"nodes": {"n1": GiB, "n2": GiB}, "spares": {"n3": GiB}},
        "rank_mode": "thread",
    }
    for k, v in over.items():
        if k in raw["app"]:
            raw["app"][k] = v
        else:
            raw[k] = v
    return raw


def test_generator_matches_reference():
    idx = np.array([0, 1, 77, 2 ** 32 + 3])
    got = generate(0x1_0007, 3, idx, elem_size=16)
    want = [pattern_word(0x1_0007, 3, int(g)) for g in idx for _ in range(2)]
    assert got.tolist() == want
    assert decode_iteration(got) == 3


def test_first_divergence():
    a = generate(1, 1, np.arange(10))
    b = a.copy()
    assert first_divergence(a, b) is None
    b[7] ^= 1
    assert first_divergence(a, b) == 56
    assert first_divergence(a, b[:5]) == 0


def test_validation_reports_lines(tmp_path):
    raw = scenario(checkpoint_interval=0, rm_script=[{"action": "GRANT", "at": 0, "nodes": ["n9"]}])
    path = tmp_path / "s.json"
    path.write_text(json.dumps(raw, indent=1))
    with pytest.raises(ScenarioError) as ei:
        validate_scenario(path)
    errs = ei.value.errors
    assert any("checkpoint_interval" in e and e.startswith("line ") for e in errs)
    assert any("'n9'" in e for e in errs)


@pytest.mark.parametrize("over,needle", [
    ({"elem_size_bad": None}, None),
    ({"mode": "FAST"}, "mode"),
    ({"policy": {"bogus": 1}}, "policy"),
    ({"rm_script": [{"action": "ADAPT", "app": "app", "at": 1, "new_world_size": 2}]}, "iteration-triggered"),
    ({"rm_script": [{"action": "ADAPT", "app": "app", "at_iteration": 1, "new_world_size": 1000}]}, "larger"),
    ({"world_size": 500}, "at least one element"),
])
def test_parse_errors(over, needle):
    over.pop("elem_size_bad", None)
    if needle is None:
        raw = scenario()
        raw["app"]["regions"][0]["elem_size"] = 12
        needle = "multiple of 8"
    else:
        raw = scenario(**over)
    with pytest.raises(ScenarioError, match=needle):
        parse_scenario(raw)


def test_zero_iterations(tmp_path):
    v = run_scenario(parse_scenario(scenario(iterations=0)), tmp_path)
    assert v.passed and v.restarts == 0
    with pytest.raises(ValueError):
        summarize(tmp_path / "metrics")
    assert json.loads((tmp_path / "verdict.json").read_text())["passed"]


def test_adapt_and_kill_threads(tmp_path):
    raw = scenario(iterations=12, rm_script=[
        {"action": "ADAPT", "app": "app", "at_iteration": 3, "new_world_size": 5},
        {"action": "KILL_APP", "app": "app", "at_iteration": 7},
        {"action": "ADAPT", "app": "app", "at_iteration": 10, "new_world_size": 2},
    ])
    v = run_scenario(parse_scenario(raw), tmp_path)
    assert v.passed, v.failures
    assert v.restarts == 1


def test_sync_run_summary(tmp_path):
    v = run_scenario(parse_scenario(scenario(mode="SYNC", iterations=6)), tmp_path)
    assert v.passed
    rep = summarize(tmp_path)
    e = rep["modes"]["SYNC"]
    # a synchronous commit blocks for the copy and the whole transfer
    assert e["t_blocked_us"]["mean"] >= e["t_transfer_us"]["mean"] - 50
    assert "SYNC" in format_summary(rep)


def test_summary_of_one_commit(tmp_path):
    p = tmp_path / "one.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["commit", "version", "t_copy_us", "t_blocked_us", "t_transfer_us", "mode"])
        w.writerow([0, 1, 10, 12, 300, "ASYNC"])
    rep = summarize(p)
    assert rep["modes"]["ASYNC"]["t_blocked_us"] == {"mean": 12.0, "p95": 12.0}


def test_paired_summary(tmp_path):
    for mode, blocked in (("ASYNC", 10), ("SYNC", 40)):
        with open(tmp_path / f"{mode}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["commit", "version", "t_copy_us", "t_blocked_us", "t_transfer_us", "mode"])
            w.writerow([0, 1, 5, blocked, 30, mode])
    assert summarize(tmp_path)["async_over_sync_blocked"] == pytest.approx(0.25)
