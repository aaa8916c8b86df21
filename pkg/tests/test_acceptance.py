"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records a one-line PASS/FAIL verdict that is printed in the
terminal summary (and immediately, when run with ``-s``).
"""

import csv
import io
import json
import time
from dataclasses import replace

import numpy as np
import pytest

from agile_twin import characterization as ch
from agile_twin import cli
from agile_twin import optimizer as opt
from agile_twin import orchestrator as orc
from agile_twin import qot
from agile_twin import telemetry as tm
from agile_twin.figures import csv_text, FIGURES
from agile_twin.model import ChannelPlan, DUMMY, TRAFFIC, TransceiverPort, get_format
from agile_twin.qot import LineConfig
from agile_twin.scenario import default_scenario_text

import cp_fuzz
import test_qot
from conftest import (
    ACCEPTANCE,
    fuel_scenario,
    load_fixture,
    ols_campaign,
    ols_line,
    random_nf,
    two_span_line,
    with_amps,
)

SEEDS = range(100)


def verdict(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def timed_run(scenario):
    t0 = time.perf_counter()
    report, state = orc.execute(scenario)
    return report, state, time.perf_counter() - t0


# --- 1. end-to-end timing ---------------------------------------------------------


def test_criterion_1_timing(timed_run):
    report, _, wall = timed_run
    hours = report.total_duration_hours
    ok = (report.outcome == orc.SUCCEEDED and report.total_duration_min == pytest.approx(372.0)
          and 5.5 <= hours <= 6.5 and wall < 60.0)
    verdict(1, ok, f"{report.outcome}, {report.total_duration_min:g} min = {hours:.2f} h, wall {wall:.1f} s")


# --- 2. channel plan ----------------------------------------------------------------


def test_criterion_2_channel_plan(timed_run, line):
    report, state, _ = timed_run
    designs = [opt.LightpathDesign.from_dict(d) for d in state["lightpaths"]]
    plan = opt.designed_plan(line, designs)
    rates = sorted(round(get_format(d.format).symbol_rate_gbd, 1) for d in designs)
    grid_ok = line.grid.slot_count == 48 and line.grid.slot_spacing_ghz == 100.0
    channels = [plan.channel_at(s) for s in range(48)]
    traffic = [c for c in channels if c.role == TRAFFIC]
    dummies = [c for c in channels if c.role == DUMMY]
    rows = list(csv.DictReader(io.StringIO(csv_text(report.figures["received_spectrum"],
                                                    FIGURES["received_spectrum"][1]))))
    occ = [r["occupancy"] for r in rows]
    occ_ok = all(occ[s] == d.format for d in designs for s in d.slots) and occ.count("dummy") == 40
    ok = (sorted(d.format for d in designs) == ["400G"] * 4 + ["800G"] * 2
          and rates == [63.1] * 4 + [130.0] * 2 and grid_ok and len(traffic) == 8
          and len(dummies) == 40 and all(c.symbol_rate_gbd <= 50.0 for c in dummies) and occ_ok)
    verdict(2, ok, f"{occ.count('800G') // 2}x800G + {occ.count('400G')}x400G, {occ.count('dummy')} dummy slots")


# --- 3. conservatism ------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_3_conservatism(scenario):
    deltas = []
    for seed in SEEDS:
        report = orc.run_recovery(scenario, seed=seed)
        assert report.outcome == orc.SUCCEEDED, (seed, report.detail)
        deltas += [lp["delta_db"] for lp in report.lightpaths]
    d = np.array(deltas)
    ok = d.min() >= -0.2 and 0.0 <= np.median(d) <= 1.5
    verdict(3, ok, f"{len(d)} lightpaths over {len(SEEDS)} seeds, min {d.min():.3f} dB, median {np.median(d):.3f} dB")


# --- 4. flattening --------------------------------------------------------------------


def ripple_tilt_line(line, seed):
    """Field-trial line with seeded zero-mean sinusoidal ripple and a random tilt on every amp."""
    rng = np.random.default_rng(500 + seed)
    f = np.linspace(-1.0, 1.0, line.grid.slot_count)
    amps = []
    for a in line.amps:
        r = rng.uniform(0.2, 0.8) * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * f + rng.uniform(0, 2 * np.pi))
        amps.append(replace(a, gain_ripple_db=tuple(float(v) for v in r - r.mean()),
                            tilt_db=float(rng.uniform(-1.0, 1.0))))
    return with_amps(line, amps)


def spread(line, cfg):
    g = qot.end_gsnr_array(line, cfg, ChannelPlan.fully_loaded(line.grid))
    return float(g.max() - g.min())


def test_criterion_4_flattening(line, timed_run):
    report, _, _ = timed_run
    failures = []
    for seed in range(8):
        var = ripple_tilt_line(line, seed)
        base = LineConfig.from_line(var, -var.booster.gain_db)
        result = opt.optimize_line(var, base)
        if not result.flatness_db < spread(var, base):
            failures.append(seed)
    default = report.optimization["flatness_db"]
    truth = opt.optimize_line(line, LineConfig.from_line(line, -line.booster.gain_db)).flatness_db

    d = load_fixture("grid_oracle.json")
    b = d["boxes"]
    reduced = replace(
        line, spans=line.spans[:1], ilas=(),
        booster=replace(line.booster, gain_db=3.0, tilt_db=0.0, gain_range_db=tuple(b["booster_gain"]),
                        tilt_range_db=tuple(b["booster_tilt"])),
        preamp=replace(line.preamp, gain_db=12.0, tilt_db=0.0, gain_range_db=tuple(b["preamp_gain"]),
                       tilt_range_db=tuple(b["preamp_tilt"])),
    )
    c = opt.Constraints(launch_offset_range_dbm=tuple(b["launch_offset"]),
                        launch_tilt_range_db=tuple(b["launch_tilt"]), flatness_weight=d["flatness_weight"])
    gap = abs(opt.optimize_line(reduced, constraints=c).objective_db - d["best_objective_db"])
    ok = not failures and default <= 1.0 and truth <= 1.0 and gap <= 0.25
    head = "8/8 ripple-tilt lines flattened" if not failures else f"not flattened: seeds {failures}"
    verdict(4, ok, f"{head}; default spread {default:.3f} dB (twin), {truth:.3f} dB (truth); "
                   f"grid-oracle gap {gap:.3f} dB")


# --- 5. DLM accuracy ------------------------------------------------------------------


def dlm(line, sigma, seed):
    cap = tm.simulate_dlm_capture(line, LineConfig.from_line(line), 3, noise_sigma_db=sigma, seed=seed)
    return ch.analyze_dlm_profile(cap)


def test_criterion_5_dlm():
    rng = np.random.default_rng(2024)
    hits = 0
    for seed in SEEDS:
        x = rng.uniform(0.0, 112.0)
        span = int(x // 56.0)
        est = dlm(two_span_line(loss=(x - 56.0 * span, 3.0), loss_span=span), 0.2, seed)
        hits += (len(est.lumped_losses) == 1 and abs(est.lumped_losses[0][0] - x) <= 1.0
                 and abs(est.lumped_losses[0][1] - 3.0) <= 0.5)
    clean = sum(not dlm(two_span_line(), 0.2, 1000 + s).lumped_losses for s in SEEDS)

    exact = True
    for x in (10.0, 30.0, 70.0, 100.0):
        span = int(x // 56.0)
        est = dlm(two_span_line(loss=(x - 56.0 * span, 3.0), loss_span=span), 0.0, 0)
        (pos, mag), = est.lumped_losses
        exact &= abs(pos - x) <= 0.01 and abs(mag - 3.0) <= 0.01
        exact &= abs(est.span_boundaries_km[0] - 56.0) <= 0.01
        exact &= all(abs(a - 0.2) <= 0.01 for a in est.attenuation_db_per_km)
    ok = hits >= 95 and clean >= 99 and exact
    verdict(5, ok, f"{hits}/100 losses located, {clean}/100 clean profiles without events, noiseless exact {exact}")


# --- 6. OLS accuracy ------------------------------------------------------------------


def test_criterion_6_ols(line):
    worst = 0.0
    for seed in SEEDS:
        nf = random_nf(seed)
        est, _ = ols_campaign(ols_line(line, nf), count=8, sigma=0.1, seed=seed)
        worst = max(worst, float(np.max(np.abs(np.array(est.noise_figure_db) - nf))))
    nf = random_nf(0)
    est, _ = ols_campaign(ols_line(line, nf), sigma=0.0)
    exact = float(np.max(np.abs(np.array(est.noise_figure_db) - nf)))
    ok = len(line.ilas) == 4 and worst <= 0.5 and exact <= 0.01
    verdict(6, ok, f"worst NF error {worst:.3f} dB over 100 seeds, noiseless {exact:.2e} dB")


# --- 7. transceiver fit ---------------------------------------------------------------


def test_criterion_7_trx():
    g = load_fixture("voa_golden.json")
    rec = tm.VoaSweepRecord("p", g["format"], tuple(g["attenuations_db"]), tuple(g["ber"]), (False,) * len(g["ber"]),
                            g["reference_gsnr_db"], g["rx_power_dbm"], g["seed"])
    golden = ch.fit_transceiver_noise(rec).snr_trx_db
    port = TransceiverPort("p", "B", "a", "l", ("400G",), 24.0)
    noiseless = ch.fit_transceiver_noise(
        tm.simulate_voa_sweep(port, np.arange(0.0, 31.0, 1.0), 40.0, counting_sigma=0.0)).snr_trx_db
    ok = abs(golden - 24.0) <= 0.3 and abs(noiseless - 24.0) <= 0.05
    verdict(7, ok, f"golden {golden:.3f} dB, noiseless {noiseless:.3f} dB (truth 24)")


# --- 8. QoT oracle equivalence ----------------------------------------------------------


def test_criterion_8_qot_oracle():
    o = test_qot.ORACLE
    checks = [(qot.effective_length(c["alpha_db_km"], c["length_km"]), c["value"]) for c in o["effective_length"]]
    checks += [(qot.ase_power(c["gain_db"], c["nf_db"], c["freq_hz"]), c["value"]) for c in o["ase_power"]]
    for c in o["nli_psd"]:
        span = test_qot.FiberSpan("s", c["length_km"], c["alpha_db_km"], c["beta2_ps2_km"], c["gamma_w_km"])
        checks.append((qot.nli_psd_per_span(span, c["psd_w_hz"], c["bandwidth_hz"]), c["value"]))
    checks += [(qot.combine_with_transceiver(c["gsnr_db"], c["snr_trx_db"]), c["value"]) for c in o["combine"]]
    checks += [(qot.ber_from_gsnr(test_qot._Fmt(c["curve"]), c["gsnr_db"]), c["value"]) for c in o["ber"]]
    worst = max(abs(got - want) / abs(want) for got, want in checks)
    properties = []
    for prop in (test_qot.test_nli_snr_drops_two_db_per_launch_db, test_qot.test_gsnr_monotone_along_line):
        try:
            prop()  # 1000 random lines each
            properties.append(True)
        except AssertionError:
            properties.append(False)
    ok = worst <= 1e-6 and all(properties)
    verdict(8, ok, f"{len(checks)} oracle cases, worst relative error {worst:.1e}; "
                   f"cubic law {properties[0]}, monotone GSNR {properties[1]} over 1000 lines")


# --- 9. isolation and safety -------------------------------------------------------------


def test_criterion_9_isolation():
    runs = [cp_fuzz.run(10_000, seed) for seed in range(3)]
    unjustified = sum(len(r["unjustified"]) for r in runs)
    attempts = sum(r["post_release_attempts"] for r in runs)
    denied = sum(r["post_release_denied"] for r in runs)
    replay = all(r["replay_equal"] for r in runs)
    exclusive = sum(r["exclusivity_violations"] + r["residual_capabilities"] for r in runs) == 0
    snap = [json.dumps(r["control_plane"].snapshot(), sort_keys=True) for r in runs]
    replay_bytes = all(
        json.dumps(cp_fuzz.ControlPlane.replay(r["control_plane"], r["control_plane"].audit_log).snapshot(),
                   sort_keys=True) == s for r, s in zip(runs, snap))
    ok = unjustified == 0 and attempts > 0 and denied == attempts and replay and replay_bytes and exclusive
    verdict(9, ok, f"3 x 10000 ops: {unjustified} unjustified mutations, {denied}/{attempts} post-release denied, "
                   f"replay byte-exact {replay and replay_bytes}")


# --- 10. deadline logic ------------------------------------------------------------------


def test_criterion_10_deadline():
    r8, r6, r62 = (orc.run_recovery(fuel_scenario(h)) for h in (8.0, 6.0, 6.2))
    ok = (r8.outcome == orc.SUCCEEDED
          and r6.outcome == orc.DEADLINE_EXCEEDED and r6.failed_step == "dlm_validate"
          and r6.steps[-1].status == "interrupted"
          and r62.outcome == orc.DEADLINE_EXCEEDED and r62.failed_step == "migrate"
          and r62.steps[-1].ended_at_min == pytest.approx(372.0))
    verdict(10, ok, f"8 h {r8.outcome}; 6 h {r6.outcome} at {r6.failed_step}; "
                    f"6.2 h {r62.outcome} at {r62.failed_step} (inclusive)")


# --- 11. determinism ----------------------------------------------------------------------


def test_criterion_11_determinism(tmp_path):
    sc = tmp_path / "scenario.json"
    sc.write_text(default_scenario_text())
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [cli.main(["run", "--scenario", str(sc), "--out", str(o)]) for o in outs]
    names = ["report.json"] + [f"{stem}.csv" for stem, _ in FIGURES.values()]
    same = [(outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names]
    ok = codes == [0, 0] and all(same)
    verdict(11, ok, f"{sum(same)}/{len(names)} files byte-identical across two runs")
