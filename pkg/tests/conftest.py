import copy
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from agile_twin import characterization as ch
from agile_twin import telemetry as tm
from agile_twin.model import ChannelPlan, Edfa, FiberSpan, LineSystem, LumpedLoss, SpectrumGrid
from agile_twin.qot import LineConfig
from agile_twin.scenario import default_scenario, default_scenario_text, parse_scenario

FIXTURES = Path(__file__).parent / "fixtures"


def load_fixture(name):
    return json.loads((FIXTURES / name).read_text())


@pytest.fixture(scope="session")
def scenario():
    return default_scenario()


@pytest.fixture(scope="session")
def line(scenario):
    return scenario.line_systems[0]


@pytest.fixture
def doc():
    """Mutable copy of the field-trial scenario document."""
    return copy.deepcopy(json.loads(default_scenario_text()))


def line_elements(doc):
    return doc["line_systems"][0]["elements"]


def clean_line(line):
    """``line`` without ripple or lumped losses."""
    flat = lambda a: replace(a, gain_ripple_db=())  # noqa: E731
    return replace(
        line,
        booster=flat(line.booster),
        ilas=tuple(flat(a) for a in line.ilas),
        preamp=flat(line.preamp),
        spans=tuple(replace(s, lumped_losses=()) for s in line.spans),
    )


def with_amps(line, amps):
    amps = list(amps)
    return replace(line, booster=amps[0], ilas=tuple(amps[1:-1]), preamp=amps[-1])


def infeasible_doc(base, loss_db=10.0, trx_db=14.2):
    """Thin-margin transceivers, capped amplifier gains and a mid-span loss in span 3."""
    d = copy.deepcopy(base)
    for t in d["transceivers"]:
        t["snr_trx_true_db"] = trx_db
    for e in d["line_systems"][0]["elements"]:
        if e["id"] == "span-3" and loss_db:
            e["lumped_losses"].append({"position_km": 28.0, "loss_db": loss_db})
        if e["type"] == "amp" and e["id"] != "booster":
            e["gain_range_db"] = [8.0, 12.0]
    return d


def infeasible_scenario(loss_db=10.0):
    return parse_scenario(infeasible_doc(json.loads(default_scenario_text()), loss_db))


SMALL_GRID = SpectrumGrid("g", 191.35, 50.0, 8)
BOTH_OSA = {"a": {"osa": True}, "b": {"osa": True}}


def two_span_line(loss=None, osa=BOTH_OSA, loss_span=1):
    """Booster at 0 dB, 2 x 56 km at 0.2 dB/km, ILA and preamp at 11.2 dB."""
    spans = [FiberSpan("span-1", 56.0, 0.2), FiberSpan("span-2", 56.0, 0.2)]
    if loss:
        spans[loss_span] = FiberSpan(spans[loss_span].id, 56.0, 0.2, lumped_losses=(LumpedLoss(*loss),))
    return LineSystem(
        "l", ("a", "b"), SMALL_GRID,
        Edfa("booster", gain_db=0.0, noise_figure_db=5.0),
        tuple(spans),
        (Edfa("ila", gain_db=11.2, noise_figure_db=5.0),),
        Edfa("pre", gain_db=11.2, noise_figure_db=5.0),
        endpoint_instruments=osa,
    )


def ols_line(base_line, nf_db):
    """Clean field-trial line with the given per-amp noise figures."""
    clean = clean_line(base_line)
    return with_amps(clean, [replace(a, noise_figure_db=float(v)) for a, v in zip(clean.amps, nf_db)])


_PROBES = {}


def ols_campaign(truth, count=8, sigma=0.1, seed=0):
    """Run the OLS probe campaign on ``truth`` and calibrate from the public view."""
    public = ch.public_view(truth)
    key = (public, count)
    if key not in _PROBES:
        _PROBES[key] = ch.design_probes(public, LineConfig.from_line(public, -3.0), count)
    meas = (0, truth.grid.slot_count - 1)
    plan = ChannelPlan.fully_loaded(truth.grid, skip=meas)
    probes = []
    for i, cfg in enumerate(_PROBES[key]):
        spec = tm.simulate_osa_spectrum(truth, cfg, truth.endpoints[1], plan=plan, noise_sigma_db=sigma,
                                        seed=seed * 100 + i)
        rd = tm.read_amp_power_monitors(truth, cfg, plan=plan, noise_sigma_db=sigma, seed=seed * 100 + 50 + i)
        probes.append(ch.OlsProbe(cfg, spec, tuple(rd), meas))
    return ch.calibrate_ols(probes, public), probes


def random_nf(seed, n=6, lo=4.5, hi=6.5):
    return np.random.default_rng(1000 + seed).uniform(lo, hi, n)


def fuel_scenario(hours):
    d = json.loads(default_scenario_text())
    d["disaster"]["fuel_hours"] = hours
    d["disaster"]["fuel_override"] = True
    return parse_scenario(d)


# acceptance verdicts, printed as one PASS/FAIL line per criterion at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
