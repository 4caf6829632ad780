import json

import pytest

from icheck.cli import main, parse_addr, parse_bytes, parse_nodes

GiB = 1024 ** 3


def test_parse_helpers():
    assert parse_bytes("4096") == 4096
    assert parse_bytes("512M") == 512 * 1024 ** 2
    assert parse_bytes("4GiB") == 4 * GiB
    assert parse_bytes("1.5k") == 1536
    assert parse_addr("127.0.0.1:7600") == ("127.0.0.1", 7600)
    assert parse_addr(":9") == ("127.0.0.1", 9)
    assert parse_nodes("n1=2G, n2", default_capacity=7) == {"n1": 2 * GiB, "n2": 7}


def _write(tmp_path, raw):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(raw, indent=1))
    return p


RAW = {
    "name": "cli",
    "app": {"name": "app", "world_size": 2, "iterations": 4, "checkpoint_interval": 2, "probe_interval": 2,
            "regions": [{"id": "a", "elements": 64}]},
    "cluster": {"nodes": {"n1": GiB}},
}


def test_validate(tmp_path, capsys):
    assert main(["validate", str(_write(tmp_path, RAW))]) == 0
    assert "ok (cli, 2 ranks" in capsys.readouterr().out
    bad = dict(RAW, app=dict(RAW["app"], probe_interval=0))
    assert main(["validate", str(_write(tmp_path, bad))]) == 1
    assert "probe_interval" in capsys.readouterr().err
    assert main(["validate", str(tmp_path / "missing.json")]) == 1


def test_run_and_summarize_processes(tmp_path, capsys):
    path = _write(tmp_path, RAW)
    out = tmp_path / "out"
    assert main(["run", "--scenario", str(path), "--out", str(out), "--rank-mode", "process"]) == 0
    assert "cli: PASS" in capsys.readouterr().out
    assert main(["summarize", str(out), "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["commits"] == 4  # 2 ranks x 2 checkpoints
    assert main(["summarize", str(tmp_path / "nothing")]) == 2


def test_usage_errors():
    with pytest.raises(SystemExit):
        main([])
    with pytest.raises(SystemExit):
        main(["manager", "--node-id", "n1"])
