import copy
import json

import pytest

from zonesim.attacks import (
    CONTROL, GOLDEN, Scenario, ScenarioError, UnknownScenario, load_scenario, manifest,
    run_scenario, run_suite,
)


@pytest.mark.parametrize("name", GOLDEN)
def test_golden_blocked(name):
    res = run_scenario(name)
    assert res.status == "blocked", [(s.op, s.expect, s.outcome) for s in res.steps]
    assert res.outcome == res.expected and res.passed


def test_benign_control_has_no_faults():
    res = run_scenario(CONTROL)
    assert res.passed and res.status == "completed" and res.faults == 0


def test_golden_outcomes_cover_every_class():
    classes = {run_scenario(n).outcome.split("(")[0] for n in GOLDEN}
    assert classes == {"PermFault", "GPF", "CfiViolation", "CpiViolation", "Rejected",
                       "SwitchRejected"}


def _stripped(name, **changes):
    sc = load_scenario(name)
    sc = copy.deepcopy(sc)
    for step in sc.attack:
        if step["op"] == "program":
            step.update(changes)
    return sc


def test_breach_without_instrumentation():
    res = run_scenario(_stripped("fnptr_overwrite_zlog", instrument=False))
    assert res.status == "breached" and not res.passed


def test_breach_without_scan():
    res = run_scenario(_stripped("stray_gcsstr_inline", scan=False))
    assert res.status == "breached"


def test_mismatch_when_wrong_fault():
    sc = load_scenario("heartbleed_oob_read")
    sc.attack[-1]["expect"] = "GPF"
    assert run_scenario(sc).status == "mismatch"


def test_setup_failure_reported():
    sc = Scenario.from_dict({"name": "x", "expected": "PermFault",
                             "setup": [{"op": "switch", "domain": [0, 3, 1], "via": "inline"}],
                             "attack": []})
    res = run_scenario(sc)
    assert res.status == "setup_failed" and res.outcome == "SwitchRejected(NotTrampoline)"


def test_unknown_scenario():
    with pytest.raises(UnknownScenario):
        load_scenario("no_such_attack")


@pytest.mark.parametrize("data", [
    {"name": "x", "expected": "PermFault", "attack": [], "colour": 1},
    {"name": "x", "attack": []},
    {"name": "x", "expected": "Segfault", "attack": []},
    {"name": "x", "expected": "GPF", "attack": [], "world": {"ram": 4}},
])
def test_strict_scenario_schema(data):
    with pytest.raises(ScenarioError):
        Scenario.from_dict(data)


def test_unknown_step_op():
    sc = Scenario.from_dict({"name": "x", "expected": "GPF", "attack": [{"op": "teleport"}]})
    with pytest.raises(ScenarioError):
        run_scenario(sc)


def test_scenario_from_file(tmp_path):
    p = tmp_path / "mine.json"
    prog = tmp_path / "p.toy"
    prog.write_text("call f\nsmash_ret 0x41\nret\n")
    p.write_text(json.dumps({"name": "mine", "expected": "CfiViolation",
                             "attack": [{"op": "program", "file": "p.toy",
                                         "expect": "CfiViolation"}]}))
    assert run_scenario(str(p)).status == "blocked"


def test_manifest_lists_everything():
    m = manifest()
    assert set(m["scenarios"]) == set(GOLDEN) | {CONTROL}
    assert [n for n, v in m["scenarios"].items() if v["golden"]] == list(GOLDEN)
    for name, entry in m["scenarios"].items():
        assert entry["expected"] == load_scenario(name).expected
    for target in m["table_mapping"].values():
        assert target in GOLDEN


def test_suite_runner():
    results = run_suite()
    assert len(results) == 12 and all(r.passed for r in results)
