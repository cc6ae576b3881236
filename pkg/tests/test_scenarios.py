"""Scenario harness: builtin suite verdicts, determinism, the JSON format,
and actor discipline."""

import pytest

from servas_sim.scenarios import (
    Scenario,
    ScenarioRunner,
    ScriptError,
    Verdict,
    builtin_suite,
    dump_scenarios,
    load_scenarios,
    run_scenario,
)

EXPECTED_NAMES = {
    "os-read-enclave", "downgrade", "remap", "perm-flip", "physical-replay",
    "dram-duplicate-toggle", "swap-replay", "swap-double-copy", "shm-wrong-key",
    "shm-brute-force", "encid-brute-force", "privilege-separation",
    "shm-happy-path", "code-dedup",
}


def test_suite_covers_every_attack_family():
    suite = builtin_suite()
    assert len(suite) >= 12
    assert {s.name for s in suite} == EXPECTED_NAMES
    allowed = {s.name for s in suite if s.expected.outcome == "ALLOWED"}
    assert allowed == {"shm-happy-path", "code-dedup"}


@pytest.mark.parametrize("scenario", builtin_suite(), ids=lambda s: s.name)
def test_builtin_verdicts(scenario):
    assert run_scenario(scenario, seed=0) == scenario.expected


def test_determinism_same_seed_same_verdict():
    scenario = next(s for s in builtin_suite() if s.name == "physical-replay")
    runs = {run_scenario(scenario, seed=11) for _ in range(3)}
    assert len(runs) == 1


def test_verdicts_stable_across_seeds():
    suite = builtin_suite()
    for seed in (0, 1, 17, 9999):
        for scenario in suite:
            assert run_scenario(scenario, seed=seed) == scenario.expected, \
                f"{scenario.name} flaked at seed {seed}"


def test_json_roundtrip_preserves_verdicts():
    suite = builtin_suite()
    reloaded = load_scenarios(dump_scenarios(suite))
    assert [s.name for s in reloaded] == [s.name for s in suite]
    for scenario in reloaded:
        assert scenario == next(s for s in suite if s.name == scenario.name)
        assert run_scenario(scenario, seed=5) == scenario.expected


def test_malformed_scenario_file():
    with pytest.raises(ScriptError):
        load_scenarios("{not json")
    with pytest.raises(ScriptError):
        load_scenarios('{"scenarios": [{"name": "x"}]}')


def _one_step_scenario(step, actors=None, expected=None):
    return Scenario.from_dict({
        "name": "t",
        "actors": actors or [{"name": "os", "kind": "OS", "space": "os"},
                             {"name": "phys", "kind": "PHYSICAL"}],
        "steps": [step],
        "expected": (expected or Verdict("ALLOWED", None, 0)).to_dict(),
    })


def test_unknown_action_is_script_error():
    scenario = _one_step_scenario({"actor": "os", "action": "frobnicate", "args": {}})
    with pytest.raises(ScriptError):
        run_scenario(scenario)


def test_undeclared_actor_is_script_error():
    with pytest.raises(ScriptError):
        run_scenario(_one_step_scenario({"actor": "ghost", "action": "access",
                                         "args": {"va": 0}}))


def test_physical_actor_cannot_touch_software_surfaces():
    scenario = _one_step_scenario(
        {"actor": "phys", "action": "map_page", "args": {"va": 0, "ppn": 1}})
    with pytest.raises(ScriptError):
        run_scenario(scenario)


def test_software_actor_cannot_tamper_raw_dram():
    scenario = _one_step_scenario(
        {"actor": "os", "action": "flip_bit", "args": {"line": 0, "bit": 0}})
    with pytest.raises(ScriptError):
        run_scenario(scenario)


def test_missing_args_are_script_errors():
    scenario = _one_step_scenario({"actor": "os", "action": "map_page", "args": {}})
    with pytest.raises(ScriptError):
        run_scenario(scenario)


def test_benign_scenario_runs_allowed():
    scenario = Scenario.from_dict({
        "name": "write-read",
        "actors": [{"name": "os", "kind": "OS", "space": "os"}],
        "steps": [
            {"actor": "os", "action": "map_page",
             "args": {"va": 0x1000, "ppn": 0x10, "perms": "rw"}},
            {"actor": "os", "action": "access", "args": {"va": 0x1000, "data": "abc"}},
            {"actor": "os", "action": "access",
             "args": {"va": 0x1000, "kind": "READ", "size": 3, "check": "abc"}},
        ],
        "expected": {"outcome": "ALLOWED", "detail": None, "at_step": 2},
    })
    assert run_scenario(scenario, seed=0) == scenario.expected


def test_failed_check_is_data_mismatch():
    scenario = Scenario.from_dict({
        "name": "bad-check",
        "actors": [{"name": "os", "kind": "OS", "space": "os"}],
        "steps": [
            {"actor": "os", "action": "map_page",
             "args": {"va": 0x1000, "ppn": 0x10, "perms": "rw"}},
            {"actor": "os", "action": "access",
             "args": {"va": 0x1000, "kind": "READ", "size": 3, "check": "abc"}},
        ],
        "expected": {"outcome": "ALLOWED", "detail": None, "at_step": 1},
    })
    got = run_scenario(scenario, seed=0)
    assert got.outcome == "DATA_MISMATCH" and got.at_step == 1


def test_expected_trap_that_does_not_fire_is_no_trap():
    scenario = Scenario.from_dict({
        "name": "phantom-trap",
        "actors": [{"name": "os", "kind": "OS", "space": "os"}],
        "steps": [
            {"actor": "os", "action": "map_page",
             "args": {"va": 0x1000, "ppn": 0x10, "perms": "rw"}},
            {"actor": "os", "action": "access", "expect_trap": "AUTH",
             "args": {"va": 0x1000, "kind": "READ", "size": 1}},
        ],
        "expected": {"outcome": "ALLOWED", "detail": None, "at_step": 1},
    })
    got = run_scenario(scenario, seed=0)
    assert got == Verdict("NO_TRAP", "AUTH", 1)


def test_runner_exposes_machine_for_inspection():
    scenario = next(s for s in builtin_suite() if s.name == "code-dedup")
    runner = ScenarioRunner(scenario, seed=2)
    verdict = runner.run()
    assert verdict.outcome == "ALLOWED"
    h1, h2 = runner.vars["hA"], runner.vars["hA2"]
    assert runner.sm.peek_meta(h1).rtid != runner.sm.peek_meta(h2).rtid
    assert runner.sm.peek_meta(h1).encid_full == runner.sm.peek_meta(h2).encid_full
