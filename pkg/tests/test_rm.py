import json
import time

import pytest

from icheck import protocol as P
from icheck.rm import ResourceManagerStub, RmEvent, ScriptError, load_script, validate_script
from icheck.transport import Server

INV = ["n1", "n2", "n3"]


@pytest.mark.parametrize("event,msg", [
    ({"action": "EXPLODE", "at": 0}, "unknown action"),
    ({"action": "GRANT"}, "exactly one"),
    ({"action": "GRANT", "at": 1, "at_iteration": 2, "nodes": ["n1"]}, "exactly one"),
    ({"action": "GRANT", "at": -1, "nodes": ["n1"]}, "must be >= 0"),
    ({"action": "GRANT", "at": 0}, "nodes"),
    ({"action": "MIGRATE_HINT", "at": 0, "from": "n1"}, "from"),
    ({"action": "ADAPT", "at": 0, "app": "a"}, "new_world_size"),
    ({"action": "KILL_APP", "at": 0}, "app"),
    ({"action": "GRANT", "at": 0, "nodes": ["n1"], "colour": 1}, "unknown fields"),
])
def test_malformed_events(event, msg):
    with pytest.raises(ScriptError, match=msg):
        RmEvent.from_dict(event)


def test_cross_checks():
    with pytest.raises(ScriptError, match="unknown node"):
        validate_script([{"action": "GRANT", "at": 0, "nodes": ["n9"]}], INV, [])
    with pytest.raises(ScriptError, match="unknown application"):
        validate_script([{"action": "ADAPT", "at": 0, "app": "x", "new_world_size": 2}], INV, ["a"])
    with pytest.raises(ScriptError, match="non-decreasing"):
        validate_script([{"action": "GRANT", "at": 2, "nodes": ["n1"]},
                         {"action": "GRANT", "at": 1, "nodes": ["n2"]}], INV, [])
    evs = validate_script([{"action": "ADAPT", "at_iteration": 3, "app": "a", "new_world_size": 2},
                           {"action": "throttle", "at": 0.5, "rate": 100}], INV, ["a"])
    assert [e.action for e in evs] == ["ADAPT", "THROTTLE"]


def test_load_script(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"action": "GRANT"}))
    with pytest.raises(ScriptError, match="array"):
        load_script(p)


def test_requests_are_granted_first_come_then_denied():
    rm = ResourceManagerStub({"n1": 1, "n2": 1, "n3": 1})
    assert rm.handle(P.NodeRequest(2, "memory")) == P.NodeGrant(["n1", "n2"], False)
    partial = rm.handle(P.NodeRequest(2, "bandwidth"))
    assert partial.nodes == ["n3"] and partial.partial
    deny = rm.handle(P.NodeRequest(1, "memory"))
    assert isinstance(deny, P.NodeDeny)
    rm.handle(P.NodeReleased(["n2"], False))
    assert rm.spare() == ["n2"]


def test_timed_script_reaches_controller():
    seen = []
    ctl = Server(lambda conn: (lambda m: seen.append(m) or P.Ok("")), name="fake-ctl").start()
    try:
        rm = ResourceManagerStub({"n1": 1, "n2": 1}, ctl.address)
        faults = []
        rm.fault_handler = faults.append
        events = validate_script([
            {"action": "GRANT", "at": 0, "nodes": ["n1"]},
            {"action": "MIGRATE_HINT", "at": 0.05, "from": "n1", "to": "n2"},
            {"action": "THROTTLE", "at": 0.1, "rate": 1000},
        ], ["n1", "n2"], [])
        t0 = time.monotonic()
        rm.run_script(events)
        assert time.monotonic() - t0 >= 0.1
        assert [type(m) for m in seen] == [P.NodeGrant, P.MigrateHint]
        assert faults[0].rate == 1000
        assert [w for _, w, _ in rm.log] == ["grant", "migrate_hint", "throttle"]
    finally:
        ctl.stop()


def test_fault_event_without_handler_is_logged():
    rm = ResourceManagerStub({"n1": 1})
    rm.run_script([RmEvent("KILL_AGENT", at=0, agent=1)])
    assert rm.log[-1][1] == "error"
