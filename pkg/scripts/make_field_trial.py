"""Regenerate src/agile_twin/data/field_trial.json.

The amplifier ripple is drawn once from a fixed seed and frozen into the file.
"""

import json
from pathlib import Path

import numpy as np

SLOTS = 48
RIPPLE_SEED = 20240611


def ripple(rng, rms_db=0.2):
    x = np.linspace(0.0, 1.0, SLOTS)
    r = np.zeros(SLOTS)
    for _ in range(3):
        r += rng.normal() * np.sin(2 * np.pi * (rng.uniform(0.5, 2.5) * x + rng.uniform()))
    r -= r.mean()
    r *= rms_db / np.sqrt(np.mean(r ** 2))
    r = np.round(r, 8)
    r[-1] -= r.sum()
    return [float(v) for v in np.round(r, 8)]


def amp(rng, amp_id, gain, nf, gain_range, tilt=0.0):
    return {
        "type": "amp",
        "id": amp_id,
        "gain_db": gain,
        "tilt_db": tilt,
        "noise_figure_db": nf,
        "gain_range_db": list(gain_range),
        "tilt_range_db": [-2.0, 2.0],
        "max_total_output_dbm": 23.0,
        "gain_ripple_db": ripple(rng),
    }


def span(span_id, attenuation, losses=()):
    return {
        "type": "span",
        "id": span_id,
        "length_km": 56.0,
        "attenuation_db_per_km": attenuation,
        "dispersion_ps2_per_km": 21.7,
        "gamma_per_w_per_km": 1.3,
        "lumped_losses": [{"position_km": p, "loss_db": l} for p, l in losses],
    }


def build():
    rng = np.random.default_rng(RIPPLE_SEED)
    nfs = [5.5, 5.0, 5.5, 6.0, 5.2, 5.8]
    attenuations = [0.205, 0.198, 0.21, 0.2, 0.195]
    spans = [span(f"span-{i + 1}", a) for i, a in enumerate(attenuations)]
    spans[2]["lumped_losses"] = [{"position_km": 23.4, "loss_db": 1.5}]
    amps = [amp(rng, "booster", 3.0, nfs[0], (0.0, 10.0), tilt=0.0)]
    for i in range(4):
        amps.append(amp(rng, f"ila-{i + 1}", 11.5, nfs[i + 1], (8.0, 20.0), tilt=0.5))
    amps.append(amp(rng, "preamp", 11.0, nfs[5], (8.0, 20.0)))
    elements = [amps[0]]
    for s, a in zip(spans, amps[1:]):
        elements += [s, a]

    ports = []
    snr_800 = [18.6, 18.2]
    snr_400 = [19.8, 20.3, 19.5, 20.1]
    for i, snr in enumerate(snr_800):
        ports.append({"id": f"p800-{i + 1}", "owner_operator": "B", "node": "dublin",
                      "line_system": "galway-dublin", "supported_formats": ["800G"], "snr_trx_true_db": snr})
    for i, snr in enumerate(snr_400):
        ports.append({"id": f"p400-{i + 1}", "owner_operator": "B", "node": "dublin",
                      "line_system": "galway-dublin", "supported_formats": ["400G"], "snr_trx_true_db": snr})

    return {
        "operators": [{"id": "A", "token": "token-operator-a"},
                      {"id": "B", "token": "token-operator-b"}],
        "nodes": [{"id": "galway", "site": "X", "operator": "B"},
                  {"id": "dublin", "site": "Y", "operator": "B"}],
        "grids": [{"id": "c-band", "anchor_freq_thz": 191.35, "slot_spacing_ghz": 100.0, "slot_count": SLOTS}],
        "line_systems": [{
            "id": "galway-dublin",
            "endpoints": ["galway", "dublin"],
            "grid": "c-band",
            "owner": "B",
            "elements": elements,
            "endpoint_instruments": {"galway": {"osa": True, "ase_source": True},
                                     "dublin": {"osa": True, "ase_source": True}},
        }],
        "transceivers": ports,
        "data_centers": [
            {"id": "dc-x", "operator": "A", "site": "X", "power_state": "generator",
             "datasets": [{"id": "customer-db", "size_gb": 25.0}]},
            {"id": "dc-y", "operator": "B", "site": "Y", "power_state": "grid", "datasets": []},
        ],
        "disaster": {
            "affected_site": "X",
            "outage_duration_hours": 24.0,
            "fuel_hours": 8.0,
            "response": {
                "tenant": "A",
                "lessor": "B",
                "line_system": "galway-dublin",
                "source_dc": "dc-x",
                "target_dc": "dc-y",
                "dataset": "customer-db",
                "demands": [
                    {"id": "lp-800-1", "format": "800G"},
                    {"id": "lp-800-2", "format": "800G"},
                    {"id": "lp-400-1", "format": "400G"},
                    {"id": "lp-400-2", "format": "400G"},
                    {"id": "lp-400-3", "format": "400G"},
                    {"id": "lp-400-4", "format": "400G"},
                ],
                "leased_slots": list(range(20, 28)),
                "lease_hours": 24.0,
            },
        },
        "workflow_durations": {
            "trx_characterization": 30, "dlm_measure": 20, "dlm_analyze": 40, "ols_measure": 150,
            "ols_analyze": 60, "dlm_validate": 60, "trx_configure": 2, "migrate": 10,
        },
        "seed": 7,
    }


if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "src" / "agile_twin" / "data" / "field_trial.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(build(), indent=2) + "\n", encoding="utf-8")
    print(out)
