"""CSV datasets and optional SVG line plots from a recovery report.

Numbers are written with six significant digits in lowercase scientific
notation where needed, so identical reports give identical files.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from pathlib import Path

log = logging.getLogger(__name__)

# dataset key -> (file stem, columns)
FIGURES = {
    "launch_power": ("launch_power", ("slot", "frequency_thz", "launch_power_dbm")),
    "accumulated_gsnr": ("accumulated_gsnr", ("slot", "reference_index", "reference", "gsnr_db")),
    "dlm_profile": ("dlm_profile_before_after", ("position_km", "power_dbm_before", "power_dbm_after")),
    "received_spectrum": ("received_spectrum", ("slot", "frequency_thz", "power_dbm", "occupancy")),
}


def format_value(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        out = f"{v:.6g}"
        return "0" if out == "-0" else out
    return str(v)


def csv_text(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([format_value(row[c]) for c in columns])
    return buf.getvalue()


def write_figures(figures: dict, out_dir, svg=False):
    """Write one CSV (and SVG if asked) per dataset; returns ``(paths, warnings)``.

    Missing or empty datasets are skipped with a warning.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths, warnings = [], []
    for key, (stem, columns) in FIGURES.items():
        rows = figures.get(key) or []
        if not rows or any(c not in rows[0] for c in columns):
            msg = f"report has no complete {key} section; skipped {stem}.csv"
            log.info(msg)
            warnings.append(msg)
            continue
        path = out / f"{stem}.csv"
        path.write_text(csv_text(rows, columns), encoding="utf-8")
        paths.append(path)
        if svg:
            path = out / f"{stem}.svg"
            _PLOTTERS[key](rows, path)
            paths.append(path)
    return paths, warnings


# --- SVG --------------------------------------------------------------------------


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "agile-twin"
    matplotlib.rcParams["svg.fonttype"] = "none"
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.grid(True, alpha=0.3)
    return plt, fig, ax


def _save(plt, fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _plot_launch(rows, path):
    plt, fig, ax = _figure()
    ax.plot([r["frequency_thz"] for r in rows], [r["launch_power_dbm"] for r in rows], marker=".")
    ax.set_xlabel("Frequency (THz)")
    ax.set_ylabel("Launch power per 50 GHz (dBm)")
    _save(plt, fig, path)


def _plot_gsnr(rows, path):
    plt, fig, ax = _figure()
    refs = sorted({(r["reference_index"], r["reference"]) for r in rows})
    for idx, name in refs[1:]:  # the line input carries no noise
        sel = [r for r in rows if r["reference_index"] == idx]
        ax.plot([r["slot"] for r in sel], [r["gsnr_db"] for r in sel], label=name)
    ax.set_xlabel("Slot")
    ax.set_ylabel("GSNR (dB)")
    ax.legend(fontsize="small", ncol=3)
    _save(plt, fig, path)


def _plot_dlm(rows, path):
    plt, fig, ax = _figure()
    x = [r["position_km"] for r in rows]
    ax.plot(x, [r["power_dbm_before"] for r in rows], label="before", linewidth=0.8)
    ax.plot(x, [r["power_dbm_after"] for r in rows], label="after", linewidth=0.8)
    ax.set_xlabel("Distance (km)")
    ax.set_ylabel("Probe power (dBm)")
    ax.legend(fontsize="small")
    _save(plt, fig, path)


def _plot_spectrum(rows, path):
    plt, fig, ax = _figure()
    ax.step([r["frequency_thz"] for r in rows], [r["power_dbm"] for r in rows], where="mid")
    ax.set_xlabel("Frequency (THz)")
    ax.set_ylabel("Power in 12.5 GHz (dBm)")
    _save(plt, fig, path)


_PLOTTERS = {
    "launch_power": _plot_launch,
    "accumulated_gsnr": _plot_gsnr,
    "dlm_profile": _plot_dlm,
    "received_spectrum": _plot_spectrum,
}
