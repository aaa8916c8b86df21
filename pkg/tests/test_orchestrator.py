import json
from dataclasses import replace

import numpy as np
import pytest

from agile_twin import optimizer as opt
from agile_twin import orchestrator as orc
from agile_twin import qot
from agile_twin.model import DEFAULT_DURATIONS_MIN, WORKFLOW_STEPS, DataCenter

from conftest import fuel_scenario, infeasible_scenario


@pytest.fixture(scope="module")
def executed(scenario):
    return orc.execute(scenario)


@pytest.fixture(scope="module")
def report(executed):
    return executed[0]


# --- clock, fuel and migration ---------------------------------------------------


def test_sim_clock():
    c = orc.SimClock()
    assert c.advance(90.0) == 90.0
    assert c.now_hours == pytest.approx(1.5)
    c.advance(0.0)
    with pytest.raises(orc.WorkflowError):
        c.advance(-1.0)
    assert c.now_min == 90.0


def test_fuel_check():
    gen = DataCenter("dc", "A", "s", "generator", 8.0, ())
    assert orc.fuel_check(7.9, gen) == "ok"
    assert orc.fuel_check(8.0, gen) == "exhausted"
    assert orc.fuel_check(9.0, gen) == "exhausted"
    assert orc.fuel_check(1e6, DataCenter("dc", "A", "s", "grid", 0.0, ())) == "ok"


def test_migration_example():
    clock = orc.SimClock(10.0)
    m = orc.migrate_dataset(orc.MigrationJob(25.0, 3200.0), clock)
    assert m["transfer_s"] == pytest.approx(0.078125)
    assert m["duration_min"] == pytest.approx(9.5013, abs=1e-4)
    assert clock.now_min == pytest.approx(10.0 + m["duration_min"])


def test_migration_scales_with_size():
    small = orc.migrate_dataset(orc.MigrationJob(25.0, 400.0, 1.0, 0.0))
    big = orc.migrate_dataset(orc.MigrationJob(50.0, 400.0, 1.0, 0.0))
    assert big["transfer_s"] == pytest.approx(2 * small["transfer_s"])


def test_migration_zero_capacity():
    with pytest.raises(orc.WorkflowError, match="zero capacity"):
        orc.migrate_dataset(orc.MigrationJob(25.0, 0.0))


@pytest.mark.parametrize("util", [0.0, -0.1, 1.2])
def test_migration_utilization_bounds(util):
    with pytest.raises(orc.WorkflowError):
        orc.MigrationJob(25.0, 100.0, util)


def test_migration_negative_size():
    with pytest.raises(orc.WorkflowError):
        orc.MigrationJob(-1.0, 100.0)


# --- parameters ----------------------------------------------------------------------


def test_run_parameters_defaults(scenario):
    p = orc.RunParameters.from_scenario(scenario)
    assert p.probe_count == 8 and p.margin_db == 1.0


def test_run_parameters_unknown_key(scenario):
    resp = replace(scenario.disaster.response, parameters={"warp": 9})
    bad = replace(scenario, disaster=replace(scenario.disaster, response=resp))
    with pytest.raises(orc.WorkflowError, match="warp"):
        orc.RunParameters.from_scenario(bad)


def test_negative_seed(scenario):
    with pytest.raises(orc.WorkflowError):
        orc.run_recovery(scenario, seed=-1)


# --- full run ------------------------------------------------------------------------


def test_default_run_succeeds(report):
    assert report.outcome == orc.SUCCEEDED
    assert report.failed_step is None
    assert [s.id for s in report.steps] == list(WORKFLOW_STEPS)
    assert all(s.status == "completed" for s in report.steps)


def test_step_timeline(report):
    assert report.total_duration_min == pytest.approx(sum(DEFAULT_DURATIONS_MIN.values()))
    assert report.total_duration_min == pytest.approx(372.0)
    t = 0.0
    for s in report.steps:
        assert s.started_at_min == pytest.approx(t)
        t = s.ended_at_min
        assert s.ended_at_min - s.started_at_min == pytest.approx(s.duration_min)
    assert report.total_duration_hours < report.fuel_deadline_hours


def test_default_run_lightpaths(report, scenario):
    lps = report.lightpaths
    assert sorted(lp["demand_id"] for lp in lps) == sorted(d.id for d in scenario.disaster.response.demands)
    for lp in lps:
        assert lp["measured_gsnr_db"] >= lp["required_gsnr_db"]
        assert lp["delta_db"] == pytest.approx(lp["measured_gsnr_db"] - lp["predicted_gsnr_db"])
    assert report.migration["capacity_gbps"] == pytest.approx(3200.0)


def test_default_run_state(executed, scenario):
    _, state = executed
    lease = state["lease"]
    assert lease["state"] == "active"
    assert lease["lessee"] == scenario.disaster.response.tenant
    ops = [a["op"] for a in state["audit"]]
    assert ops[:3] == ["advance_clock", "request_lease", "grant_lease"]
    assert ops.count("configure_port") == 6
    assert state["audit"][1]["clock_hours"] == pytest.approx(6.0)
    assert state["dlm_delta"]["max_abs_db"] > 0


def test_report_figures(report):
    figs = report.figures
    assert set(figs) == {"launch_power", "accumulated_gsnr", "dlm_profile", "received_spectrum"}
    assert len(figs["launch_power"]) == 48
    assert {r["occupancy"] for r in figs["received_spectrum"]} == {"dummy", "400G", "800G"}


def test_report_optimization_improves(report):
    o = report.optimization
    assert o["objective_db"] >= o["unoptimized"]["objective_db"]


def test_run_is_deterministic(scenario, report):
    again = orc.run_recovery(scenario)
    assert again.to_json() == report.to_json()


def test_seed_changes_measurements(scenario, report):
    other = orc.run_recovery(scenario, seed=scenario.seed + 1)
    assert other.outcome == orc.SUCCEEDED
    assert other.estimates != report.estimates


def test_report_json_is_canonical(report):
    text = report.to_json()
    assert text == orc.canonical_json(json.loads(text))
    assert text.endswith("\n")


def test_canonical_json_non_finite():
    assert json.loads(orc.canonical_json({"b": np.inf, "a": -np.inf, "c": np.nan, "d": np.float64(1.5)})) == {
        "a": "-inf", "b": "inf", "c": None, "d": 1.5}


# --- fuel race ----------------------------------------------------------------------


def test_fuel_6_h():
    r = orc.run_recovery(fuel_scenario(6.0))
    assert r.outcome == orc.DEADLINE_EXCEEDED
    assert r.failed_step == "dlm_validate"
    assert r.steps[-1].status == "interrupted"
    assert r.steps[-1].ended_at_min == pytest.approx(360.0)
    assert "trx_configure" not in [s.id for s in r.steps]


def test_fuel_6_2_h():
    r = orc.run_recovery(fuel_scenario(6.2))
    assert r.outcome == orc.DEADLINE_EXCEEDED
    assert r.failed_step == "migrate"
    assert [s.status for s in r.steps[:-1]] == ["completed"] * 7


def test_fuel_just_enough():
    assert orc.run_recovery(fuel_scenario(6.21)).outcome == orc.SUCCEEDED


def test_infeasible_run():
    r = orc.run_recovery(infeasible_scenario())
    assert r.outcome == orc.INFEASIBLE
    assert r.failed_step == "trx_configure"
    assert "short of required" in r.detail
    assert r.steps[-1].status == "failed"
    assert r.migration is None


# --- stages ---------------------------------------------------------------------------


def test_stages_cover_workflow():
    steps = [s for st in orc.STAGES.values() for s in st[0]]
    assert steps == ["trx_characterization", "dlm_measure", "dlm_analyze", "ols_measure", "ols_calibrate",
                     "ols_optimize", "dlm_validate", "trx_configure", "migrate"]


def test_stage_chain_matches_run(scenario, executed):
    _, full = executed
    state = {}
    for name, (_, _, keys) in orc.STAGES.items():
        out = orc.run_stage(name, scenario, state)
        assert set(out) >= set(keys)
        state.update(json.loads(orc.canonical_json(out)))
    for k in ("trx_estimates", "link_estimate", "ols_estimate", "optimization", "validation", "migration"):
        assert orc.canonical_json(state[k]) == orc.canonical_json(full[k])


def test_stage_missing_input(scenario):
    with pytest.raises(orc.WorkflowError, match="link_estimate"):
        orc.run_stage("calibrate", scenario, {"base_config": {}})
    with pytest.raises(orc.WorkflowError, match="unknown stage"):
        orc.run_stage("teleport", scenario, {})


def test_scheduled_start(scenario):
    assert orc.scheduled_start_min(scenario, "trx_characterization") == 0.0
    assert orc.scheduled_start_min(scenario, "trx_configure") == pytest.approx(360.0)


# --- validation -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def truth_designs(scenario, line):
    resp = scenario.disaster.response
    ports = sorted((p for p in scenario.transceivers
                    if p.line_system == resp.line_system and p.owner_operator == resp.lessor), key=lambda p: p.id)
    result = opt.optimize_line(line)
    spectrum = qot.propagate_gsnr(line, result.config, qot.ChannelPlan.fully_loaded(line.grid))[-1]
    designs = opt.design_lightpaths(list(resp.demands), spectrum, ports, {p.id: p.snr_trx_true_db for p in ports},
                                    line, result.config, available_slots=resp.leased_slots)
    return designs, result.config, {p.id: p for p in ports}


def test_validation_noiseless_with_truth(line, truth_designs):
    """With perfect estimates and no noise, delta is the margin less a small loading penalty.

    Designs are evaluated on the all-dummy spectrum; the provisioned plan
    launches traffic carriers hotter than the dummies they replace.
    """
    designs, cfg, ports = truth_designs
    rows = orc.validate_designs(designs, line, cfg, ports, seed=0, sigma_db=0.0)
    for r in rows:
        assert r["margin_db"] - 0.05 <= r["delta_db"] < r["margin_db"]


def test_validation_rejects_unprovisioned(line, truth_designs):
    designs, cfg, ports = truth_designs
    with pytest.raises(orc.WorkflowError, match=designs[0].demand_id):
        orc.validate_designs(designs, line, cfg, ports, seed=0, provisioned={d.demand_id for d in designs[1:]})
