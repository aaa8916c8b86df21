"""``agile-twin`` command line.

``run`` executes the whole recovery workflow; ``characterize``, ``calibrate``,
``optimize``, ``provision`` and ``migrate`` run one stage against artifacts
already in ``--out``; ``report`` writes figure datasets from those artifacts.

Exit codes: 0 success, 1 usage or I/O error, 2 fuel deadline exceeded,
3 infeasible.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import figures
from . import orchestrator as orch
from .model import ModelError
from .scenario import load_scenario, with_overrides

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DEADLINE = 2
EXIT_INFEASIBLE = 3

OUTCOME_EXIT = {orch.SUCCEEDED: EXIT_OK, orch.DEADLINE_EXCEEDED: EXIT_DEADLINE, orch.INFEASIBLE: EXIT_INFEASIBLE}

# artifact file -> state keys it holds
ARTIFACTS = {
    "trx_estimates.json": ("voa_sweeps", "trx_estimates"),
    "link_estimate.json": ("base_config", "dlm_before", "link_estimate"),
    "ols_estimate.json": ("ols_probes", "ols_estimate"),
    "optimization.json": ("optimization", "unoptimized"),
    "lightpaths.json": ("dlm_after", "dlm_delta", "lightpaths", "validation", "received_spectrum", "lease"),
    "migration.json": ("migration",),
}
AUDIT_FILE = "audit.jsonl"
REPORT_FILE = "report.json"
STAGE_COMMANDS = tuple(orch.STAGES)

log = logging.getLogger("agile_twin")


class UsageError(Exception):
    pass


def _artifact_for(key: str) -> str:
    for name, keys in ARTIFACTS.items():
        if key in keys:
            return name
    raise KeyError(key)


def load_state(out: Path) -> dict:
    state = {}
    for name in ARTIFACTS:
        path = out / name
        if path.exists():
            try:
                state.update(json.loads(path.read_text(encoding="utf-8")))
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read {path}: {exc}") from exc
    return state


def save_state(out: Path, state: dict) -> list:
    written = []
    for name, keys in ARTIFACTS.items():
        if all(k in state for k in keys):
            (out / name).write_text(orch.canonical_json({k: state[k] for k in keys}), encoding="utf-8")
            written.append(out / name)
    return written


def _scenario(args):
    path = Path(args.scenario)
    if not path.is_file():
        raise UsageError(f"scenario file not found: {path}")
    try:
        sc = load_scenario(path)
        if args.seed is not None or args.fuel_hours is not None:
            sc = with_overrides(sc, seed=args.seed, fuel_hours=args.fuel_hours)
    except (OSError, ValueError) as exc:
        raise UsageError(f"invalid scenario {path}: {exc}") from exc
    return sc


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _emit(figs, out, svg):
    _, warnings = figures.write_figures(figs, out, svg=svg)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return len(warnings)


def cmd_run(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args)
    report, state = orch.execute(sc, audit_path=out / AUDIT_FILE)
    (out / REPORT_FILE).write_text(report.to_json(), encoding="utf-8")
    save_state(out, state)
    n_warn = _emit(report.figures, out, args.svg)
    print(f"outcome: {report.outcome}")
    print(f"total duration: {report.total_duration_min:g} min ({report.total_duration_hours:.2f} h), "
          f"fuel deadline {report.fuel_deadline_hours:g} h")
    if report.failed_step:
        print(f"failed step: {report.failed_step}: {report.detail}")
    for lp in report.lightpaths:
        print(f"  {lp['demand_id']}: {lp['format']} slot {lp['slot_index']} predicted "
              f"{lp['predicted_gsnr_db']:.2f} dB measured {lp['measured_gsnr_db']:.2f} dB")
    print(f"figure warnings: {n_warn}")
    return OUTCOME_EXIT[report.outcome]


def cmd_stage(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args)
    state = load_state(out)
    _, needs, produces = orch.STAGES[args.command]
    missing = sorted({_artifact_for(k) for k in needs if k not in state})
    if missing:
        raise UsageError(f"{args.command} needs {', '.join(missing)} in {out}; run the earlier stages first")
    audit = out / AUDIT_FILE if args.command == "provision" else None
    try:
        new = orch.run_stage(args.command, sc, state, audit_path=audit)
    except ModelError as exc:
        print(f"{args.command}: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    state.update(new)
    for path in save_state(out, state):
        if any(k in new for k in ARTIFACTS[path.name]):
            print(f"wrote {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args)
    state = load_state(out)
    if not state:
        raise UsageError(f"no artifacts in {out}; run a stage first")
    n_warn = _emit(orch.figure_datasets(sc, state), out, args.svg)
    print(f"figure warnings: {n_warn}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agile-twin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run",) + STAGE_COMMANDS + ("report",):
        p = sub.add_parser(name)
        p.add_argument("--scenario", required=True, help="scenario JSON file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=_non_negative_int, help="override the scenario seed")
        p.add_argument("--fuel-hours", type=float, help="override the generator fuel budget")
        p.add_argument("--svg", action="store_true", help="also write SVG plots")
    return parser


def _non_negative_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("seed must be non-negative")
    return v


def main(argv=None) -> int:
    level = os.environ.get("AGILE_TWIN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    handler = {"run": cmd_run, "report": cmd_report}.get(args.command, cmd_stage)
    try:
        return handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
