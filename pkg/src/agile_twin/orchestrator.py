"""Disaster-recovery workflow on a simulated clock.

``run_recovery`` walks the eight workflow steps in order, books each step's
scenario duration on the clock and checks the source data center's fuel at
every step end.  Estimator compute time never advances the clock.  Ground
truth is read only through :mod:`agile_twin.telemetry` and the validation
measurement.

For stepwise use the steps are grouped into five stages (``STAGES``), each
reading and writing plain JSON-serializable state.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import characterization as chz
from . import optimizer as opt
from . import qot
from . import telemetry as tm
from .control_plane import ControlPlane, port_resource, slot_resource
from .model import WORKFLOW_STEPS, ChannelPlan, DataCenter, ModelError, Scenario, get_format

SUCCEEDED = "succeeded"
DEADLINE_EXCEEDED = "deadline_exceeded"
INFEASIBLE = "infeasible"

TENANT_VERBS = ("configure", "read-state", "read-telemetry")


class WorkflowError(ModelError):
    pass


@dataclass(frozen=True)
class RunParameters:
    """Knobs of the recovery run; the scenario's ``response.parameters`` may override any of them."""

    fiber_launch_dbm: float = 0.0  # per 50 GHz dummy, after the booster
    probe_count: int = 8
    margin_db: float = opt.DEFAULT_MARGIN_DB
    fec_limit: float = qot.DEFAULT_FEC_LIMIT
    flatness_weight: float = opt.DEFAULT_FLATNESS_WEIGHT
    dlm_slot: int = 24
    dlm_sigma_db: float = tm.DEFAULT_DLM_SIGMA_DB
    detection_threshold_db: float = chz.DEFAULT_DETECTION_THRESHOLD_DB
    osa_sigma_db: float = 0.1
    monitor_sigma_db: float = 0.1
    validation_sigma_db: float = 0.2
    voa_reference_gsnr_db: float = 40.0
    voa_max_attenuation_db: float = 30.0
    voa_step_db: float = 1.0
    migration_utilization: float = 0.8
    migration_setup_min: float = 9.5

    @classmethod
    def from_scenario(cls, scenario: Scenario) -> "RunParameters":
        overrides = dict(scenario.disaster.response.parameters or {})
        known = {f.name for f in fields(cls)}
        unknown = set(overrides) - known
        if unknown:
            raise WorkflowError(f"unknown run parameters: {sorted(unknown)}")
        return cls(**overrides)


# --- clock, fuel and migration ---------------------------------------------------


class SimClock:
    """Monotone simulated time in minutes."""

    def __init__(self, start_min=0.0):
        self._now = float(start_min)

    @property
    def now_min(self) -> float:
        return self._now

    @property
    def now_hours(self) -> float:
        return self._now / 60.0

    def advance(self, minutes: float) -> float:
        if minutes < 0:
            raise WorkflowError("simulated time cannot move backwards")
        self._now += float(minutes)
        return self._now


def fuel_check(elapsed_hours: float, dc: DataCenter) -> str:
    """``exhausted`` once elapsed time reaches the fuel reserve (inclusive); grid power is always ``ok``."""
    if dc.power_state != "generator":
        return "ok"
    return "exhausted" if elapsed_hours >= dc.fuel_hours_remaining - 1e-12 else "ok"


@dataclass(frozen=True)
class MigrationJob:
    dataset_gb: float
    capacity_gbps: float
    utilization: float = 0.8
    setup_overhead_min: float = 9.5

    def __post_init__(self):
        if not 0.0 < self.utilization <= 1.0:
            raise WorkflowError(f"utilization {self.utilization} outside (0, 1]")
        if self.dataset_gb < 0:
            raise WorkflowError("dataset size cannot be negative")


def migrate_dataset(job: MigrationJob, clock: SimClock = None) -> dict:
    """Transfer time at the provisioned rate plus setup; advances ``clock`` if given."""
    if not job.capacity_gbps > 0:
        raise WorkflowError("migration path has zero capacity")
    bits = job.dataset_gb * 1e9 * 8.0
    transfer_s = bits / (job.capacity_gbps * 1e9 * job.utilization)
    duration_min = job.setup_overhead_min + transfer_s / 60.0
    if clock is not None:
        clock.advance(duration_min)
    return {
        "bytes": job.dataset_gb * 1e9,
        "capacity_gbps": job.capacity_gbps,
        "utilization": job.utilization,
        "setup_overhead_min": job.setup_overhead_min,
        "transfer_s": transfer_s,
        "duration_min": duration_min,
    }


# --- shared helpers --------------------------------------------------------------


def _seed(base: int, stage: int, k: int = 0) -> int:
    return int(base) * 10_000 + stage * 1_000 + k


@dataclass(frozen=True)
class _Setting:
    scenario: Scenario
    seed: int
    params: RunParameters

    @property
    def response(self):
        return self.scenario.disaster.response

    @property
    def line(self):
        return self.scenario.line(self.response.line_system)

    @property
    def public(self):
        return chz.public_view(self.line)

    def base_config(self) -> qot.LineConfig:
        line = self.line
        return qot.LineConfig.from_line(line, self.params.fiber_launch_dbm - line.booster.gain_db)

    def ports(self):
        r = self.response
        return sorted((p for p in self.scenario.transceivers
                       if p.line_system == r.line_system and p.owner_operator == r.lessor), key=lambda p: p.id)


def _setting(scenario, seed, params=None):
    seed = scenario.seed if seed is None else int(seed)
    if seed < 0:
        raise WorkflowError("seed must be non-negative")
    return _Setting(scenario, seed, params or RunParameters.from_scenario(scenario))


def _measurement_slots(grid):
    return (0, grid.slot_count - 1)


# --- workflow steps ------------------------------------------------------------------
#
# Each step reads what earlier steps left in ``state`` and returns new entries.


_PROBE_CACHE = {}


def _cached_probes(model, base, count, meas):
    key = (model, base, count, meas)
    if key not in _PROBE_CACHE:
        if len(_PROBE_CACHE) > 64:
            _PROBE_CACHE.clear()
        _PROBE_CACHE[key] = tuple(chz.design_probes(model, base, count, measurement_slots=meas))
    return list(_PROBE_CACHE[key])


def step_trx_characterization(s: "_Setting", state: dict) -> dict:
    p = s.params
    att = np.arange(0.0, p.voa_max_attenuation_db + 1e-9, p.voa_step_db)
    sweeps, trx = [], {}
    for k, port in enumerate(s.ports()):
        sweep = tm.simulate_voa_sweep(port, att, p.voa_reference_gsnr_db, seed=_seed(s.seed, 1, k))
        sweeps.append(sweep.to_dict())
        trx[port.id] = chz.fit_transceiver_noise(sweep).to_dict()
    return {"voa_sweeps": sweeps, "trx_estimates": trx}


def step_dlm_measure(s, state):
    base = s.base_config()
    before = tm.simulate_dlm_capture(s.line, base, s.params.dlm_slot, noise_sigma_db=s.params.dlm_sigma_db,
                                     seed=_seed(s.seed, 2))
    return {"base_config": base.to_dict(), "dlm_before": before.to_dict()}


def step_dlm_analyze(s, state):
    before = tm.PowerProfile.from_dict(state["dlm_before"])
    return {"link_estimate": chz.analyze_dlm_profile(before, s.params.detection_threshold_db).to_dict()}


def step_ols_measure(s, state):
    base = qot.LineConfig.from_dict(state["base_config"])
    meas = _measurement_slots(s.line.grid)
    # probes are planned on the DLM-updated model so hidden losses cannot push them into loss of signal
    twin = chz.build_twin(s.public, chz.LinkEstimate.from_dict(state["link_estimate"]))
    configs = _cached_probes(twin, base, s.params.probe_count, meas)
    plan = ChannelPlan.fully_loaded(s.line.grid, skip=meas)
    far = s.line.endpoints[1]
    probes = []
    for k, cfg in enumerate(configs):
        spec = tm.simulate_osa_spectrum(s.line, cfg, far, plan=plan, noise_sigma_db=s.params.osa_sigma_db,
                                        seed=_seed(s.seed, 3, 2 * k))
        readings = tm.read_amp_power_monitors(s.line, cfg, plan=plan, noise_sigma_db=s.params.monitor_sigma_db,
                                              seed=_seed(s.seed, 3, 2 * k + 1))
        probes.append(chz.OlsProbe(cfg, spec, tuple(readings), meas).to_dict())
    return {"ols_probes": probes}


def step_ols_calibrate(s, state):
    link = chz.LinkEstimate.from_dict(state["link_estimate"])
    twin = chz.build_twin(s.public, link)
    probes = [chz.OlsProbe.from_dict(d) for d in state["ols_probes"]]
    return {"ols_estimate": chz.calibrate_ols(probes, twin).to_dict()}


def step_ols_optimize(s, state):
    model = calibrated_model(s.scenario, state)
    base = qot.LineConfig.from_dict(state["base_config"])
    plan = ChannelPlan.fully_loaded(model.grid)
    before = qot.end_gsnr_array(model, base, plan)
    result = opt.optimize_line(model, base, opt.Constraints(flatness_weight=s.params.flatness_weight), plan)
    return {
        "optimization": result.to_dict(),
        "unoptimized": {"flatness_db": float(np.max(before) - np.min(before)),
                        "min_gsnr_db": float(np.min(before)),
                        "objective_db": opt.objective(before, s.params.flatness_weight)},
    }


def step_ols_analyze(s, state):
    out = step_ols_calibrate(s, state)
    out.update(step_ols_optimize(s, {**state, **out}))
    return out


def step_dlm_validate(s, state):
    cfg = qot.LineConfig.from_dict(state["optimization"]["config"])
    before = tm.PowerProfile.from_dict(state["dlm_before"])
    after = tm.simulate_dlm_capture(s.line, cfg, s.params.dlm_slot, noise_sigma_db=s.params.dlm_sigma_db,
                                    seed=_seed(s.seed, 6))
    delta = chz.compare_profiles(before, after)
    return {"dlm_after": after.to_dict(), "dlm_delta": {"max_abs_db": delta.max_abs_db, "mean_db": delta.mean_db}}


def step_trx_configure(s, state, audit_path=None, clock_hours=0.0):
    """Design lightpaths on the leased slots, set them up through the control plane, validate.

    Raises :class:`optimizer.DesignError` when a demand cannot close.
    """
    p, r = s.params, s.response
    cfg = qot.LineConfig.from_dict(state["optimization"]["config"])
    model = calibrated_model(s.scenario, state)
    spectrum = qot.propagate_gsnr(model, cfg, ChannelPlan.fully_loaded(model.grid))[-1]
    trx = {k: v["snr_trx_db"] for k, v in state["trx_estimates"].items()}
    ports = s.ports()
    designs = opt.design_lightpaths(list(r.demands), spectrum, ports, trx, model, cfg, margin_db=p.margin_db,
                                    fec_limit=p.fec_limit, available_slots=r.leased_slots)

    cp = ControlPlane.from_scenario(s.scenario, audit_path=audit_path)
    cp.advance_clock(clock_hours)
    tenant = cp.authenticate(s.scenario.operator(r.tenant).token)
    lessor = cp.authenticate(s.scenario.operator(r.lessor).token)
    used_ports = sorted({d.port_id for d in designs})
    resources = [slot_resource(r.line_system, sl) for sl in r.leased_slots]
    resources += [port_resource(pid) for pid in used_ports]
    lease = cp.request_lease(tenant, resources, r.lease_hours)
    cp.grant_lease(lessor, lease.id)
    for pid in used_ports:
        cp.delegate_port(lessor, pid, r.tenant, TENANT_VERBS)
    tenant = cp.authenticate(s.scenario.operator(r.tenant).token)
    for d in designs:
        cp.configure_port(tenant, d.port_id, d.slot_index, d.format, d.launch_power_dbm)

    validation = validate_designs(designs, s.line, cfg, {pt.id: pt for pt in ports}, _seed(s.seed, 7),
                                  p.validation_sigma_db, provisioned=provisioned_ids(cp, designs))
    received = tm.simulate_osa_spectrum(s.line, cfg, s.line.endpoints[1], plan=opt.designed_plan(s.line, designs),
                                        noise_sigma_db=p.osa_sigma_db, seed=_seed(s.seed, 7, 1))
    return {
        "lightpaths": [d.to_dict() for d in designs],
        "validation": validation,
        "received_spectrum": received.to_dict(),
        "lease": cp.lease(lease.id).to_dict(),
        "audit": cp.audit_log,
    }


def step_migrate(s, state, clock: SimClock = None):
    r = s.response
    capacity = sum(get_format(d["format"]).net_rate_gbps for d in state["lightpaths"])
    dataset = s.scenario.data_center(r.source_dc).dataset(r.dataset)
    job = MigrationJob(dataset.size_gb, capacity, s.params.migration_utilization, s.params.migration_setup_min)
    summary = migrate_dataset(job, clock)
    summary.update({"dataset": dataset.id, "source_dc": r.source_dc, "target_dc": r.target_dc})
    return {"migration": summary}


STEP_FUNCTIONS = {
    "trx_characterization": step_trx_characterization,
    "dlm_measure": step_dlm_measure,
    "dlm_analyze": step_dlm_analyze,
    "ols_measure": step_ols_measure,
    "ols_analyze": step_ols_analyze,
    "dlm_validate": step_dlm_validate,
    "trx_configure": step_trx_configure,
    "migrate": step_migrate,
}

# CLI stages: the steps each runs, the state keys it needs and the ones it persists
STAGES = {
    "characterize": (("trx_characterization", "dlm_measure", "dlm_analyze"), (),
                     ("voa_sweeps", "trx_estimates", "base_config", "dlm_before", "link_estimate")),
    "calibrate": (("ols_measure", "ols_calibrate"), ("base_config", "link_estimate"),
                  ("ols_probes", "ols_estimate")),
    "optimize": (("ols_optimize",), ("base_config", "link_estimate", "ols_estimate"),
                 ("optimization", "unoptimized")),
    "provision": (("dlm_validate", "trx_configure"),
                  ("trx_estimates", "dlm_before", "link_estimate", "ols_estimate", "optimization"),
                  ("dlm_after", "dlm_delta", "lightpaths", "validation", "received_spectrum", "lease", "audit")),
    "migrate": (("migrate",), ("lightpaths",), ("migration",)),
}

_STAGE_STEPS = {"ols_calibrate": step_ols_calibrate, "ols_optimize": step_ols_optimize}


def run_stage(name: str, scenario: Scenario, state: dict, seed=None, params=None, audit_path=None) -> dict:
    """Run one CLI stage against persisted ``state``; returns the new entries."""
    if name not in STAGES:
        raise WorkflowError(f"unknown stage {name!r}")
    steps, needs, _ = STAGES[name]
    missing = [k for k in needs if k not in state]
    if missing:
        raise WorkflowError(f"stage {name} needs {', '.join(missing)}")
    s = _setting(scenario, seed, params)
    out = {}
    for step in steps:
        fn = _STAGE_STEPS.get(step) or STEP_FUNCTIONS[step]
        kwargs = {}
        if step == "trx_configure":
            kwargs = {"audit_path": audit_path, "clock_hours": scheduled_start_min(scenario, step) / 60.0}
        out.update(fn(s, {**state, **out}, **kwargs))
    return out


def scheduled_start_min(scenario: Scenario, step: str) -> float:
    """Start of ``step`` on the simulated clock when every earlier step takes its scheduled time."""
    earlier = WORKFLOW_STEPS[:WORKFLOW_STEPS.index(step)]
    return float(sum(scenario.workflow_durations[k] for k in earlier))


def calibrated_model(scenario: Scenario, state: dict):
    s = _setting(scenario, None)
    link = chz.LinkEstimate.from_dict(state["link_estimate"])
    ols = chz.OlsEstimate.from_dict(state["ols_estimate"])
    return chz.build_twin(s.public, link, ols)


def provisioned_ids(cp: ControlPlane, designs) -> set:
    """Demand ids whose port carries the designed slot and format."""
    configs = cp.port_configs()
    ok = set()
    for d in designs:
        c = configs.get(d.port_id)
        if c is not None and c["slot"] == d.slot_index and c["format"] == d.format:
            ok.add(d.demand_id)
    return ok


def validate_designs(designs, line, config: qot.LineConfig, ports: dict, seed: int, sigma_db=0.2,
                     provisioned=None) -> list:
    """Predicted versus "measured" GSNR for provisioned lightpaths.

    Measured is the ground-truth line with the designed plan, combined with
    the port's true transceiver SNR, plus clipped Gaussian noise.  Predicted
    is the design GSNR less the design margin, that is the QoT the design
    commits to.
    """
    if provisioned is not None:
        unknown = [d.demand_id for d in designs if d.demand_id not in provisioned]
        if unknown:
            raise WorkflowError(f"design {unknown[0]!r} was never provisioned")
    plan = opt.designed_plan(line, designs)
    spectrum = qot.propagate_gsnr(line, config, plan)[-1]
    noise = tm.clipped_normal(np.random.default_rng(seed), sigma_db, len(designs))
    out = []
    for d, n in zip(designs, noise):
        line_gsnr = qot.channel_gsnr(spectrum, plan.channel_at(d.slot_index), line.grid)
        measured = qot.combine_with_transceiver(line_gsnr, ports[d.port_id].snr_trx_true_db) + float(n)
        predicted = d.predicted_gsnr_db - d.margin_db
        out.append({
            "demand_id": d.demand_id,
            "format": d.format,
            "slot_index": d.slot_index,
            "width_slots": d.width_slots,
            "port": d.port_id,
            "design_gsnr_db": d.predicted_gsnr_db,
            "predicted_gsnr_db": predicted,
            "measured_gsnr_db": measured,
            "delta_db": measured - predicted,
            "required_gsnr_db": d.required_gsnr_db,
            "margin_db": d.margin_db,
        })
    return out


# --- figure datasets --------------------------------------------------------------


def figure_datasets(scenario: Scenario, state: dict) -> dict:
    """Launch profile, accumulated GSNR, DLM before/after and received spectrum."""
    figs = {}
    s = _setting(scenario, None)
    grid = s.line.grid
    freqs = [grid.anchor_freq_thz + i * grid.slot_spacing_ghz / 1000.0 for i in range(grid.slot_count)]
    if "optimization" in state:
        cfg = qot.LineConfig.from_dict(state["optimization"]["config"])
        prof = cfg.launch_profile(grid)
        figs["launch_power"] = [{"slot": i, "frequency_thz": freqs[i], "launch_power_dbm": float(prof[i])}
                                for i in range(grid.slot_count)]
        model = calibrated_model(scenario, state)
        plan = ChannelPlan.fully_loaded(grid)
        spectra = qot.propagate_gsnr(model, cfg, plan)
        rows = []
        for sl in range(grid.slot_count):
            for sp in spectra:
                rows.append({"slot": sl, "reference_index": sp.reference_index, "reference": sp.reference,
                             "gsnr_db": sp.by_slot()[sl]})
        figs["accumulated_gsnr"] = rows
    if "dlm_before" in state and "dlm_after" in state:
        b = tm.PowerProfile.from_dict(state["dlm_before"])
        a = tm.PowerProfile.from_dict(state["dlm_after"])
        ya = np.interp(b.x, a.x, a.y)
        figs["dlm_profile"] = [{"position_km": float(x), "power_dbm_before": float(yb), "power_dbm_after": float(y2)}
                               for x, yb, y2 in zip(b.x, b.y, ya)]
    if "received_spectrum" in state and "lightpaths" in state:
        spec = tm.OsaSpectrum.from_dict(state["received_spectrum"])
        roles = ["dummy"] * grid.slot_count
        for d in state["lightpaths"]:
            for sl in range(d["slot_index"], d["slot_index"] + d["width_slots"]):
                roles[sl] = d["format"]
        figs["received_spectrum"] = [{"slot": i, "frequency_thz": freqs[i], "power_dbm": spec.power_dbm[i],
                                      "occupancy": roles[i]} for i in range(grid.slot_count)]
    return figs


# --- the full run ------------------------------------------------------------------


@dataclass
class StepRecord:
    id: str
    duration_min: float
    started_at_min: float
    ended_at_min: float
    status: str = "completed"  # or interrupted / failed


@dataclass
class RecoveryReport:
    seed: int
    outcome: str
    steps: list
    total_duration_min: float
    fuel_deadline_hours: float
    failed_step: str = None
    detail: str = None
    lightpaths: list = field(default_factory=list)
    migration: dict = None
    estimates: dict = field(default_factory=dict)
    optimization: dict = None
    figures: dict = field(default_factory=dict)

    @property
    def total_duration_hours(self) -> float:
        return self.total_duration_min / 60.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_duration_hours"] = self.total_duration_hours
        return d

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


def _plain(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return _plain(obj.item())
    return obj


def canonical_json(obj) -> str:
    """Sorted keys and fixed indentation; floats keep their shortest exact repr."""
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def execute(scenario: Scenario, seed=None, params=None, audit_path=None):
    """Run the whole workflow and return ``(report, state)``."""
    s = _setting(scenario, seed, params)
    dc = scenario.data_center(s.response.source_dc)
    fuel_h = dc.fuel_hours_remaining if dc.power_state == "generator" else math.inf
    durations = scenario.workflow_durations
    clock = SimClock()
    steps, state = [], {}
    outcome, failed, detail = SUCCEEDED, None, None

    for step in WORKFLOW_STEPS:
        fn = STEP_FUNCTIONS[step]
        kwargs = {}
        if step == "trx_configure":
            kwargs = {"audit_path": audit_path, "clock_hours": clock.now_hours}
        try:
            state.update(fn(s, state, **kwargs))
        except ModelError as exc:
            # domain failures (no design closes, no feasible set point, loss of signal, ...) end the run
            _book(clock, step, durations[step], fuel_h, steps, "failed")
            outcome, failed, detail = INFEASIBLE, step, str(exc)
            break
        duration = durations[step]
        if step == "migrate":
            duration = max(duration, state["migration"]["duration_min"])
        if not _book(clock, step, duration, fuel_h, steps):
            outcome, failed = DEADLINE_EXCEEDED, step
            detail = f"fuel exhausted at {fuel_h:g} h during {step}"
            break

    if outcome == SUCCEEDED:
        short = [v["demand_id"] for v in state["validation"] if v["measured_gsnr_db"] < v["required_gsnr_db"]]
        if short:
            outcome, failed = INFEASIBLE, "trx_configure"
            detail = f"measured GSNR below required for {', '.join(short)}"

    optimization = None
    if "optimization" in state:
        o = state["optimization"]
        optimization = {k: o[k] for k in ("config", "objective_db", "flatness_db", "min_gsnr_db", "iterations")}
        optimization["unoptimized"] = state["unoptimized"]
    report = RecoveryReport(
        seed=s.seed,
        outcome=outcome,
        steps=steps,
        total_duration_min=float(sum(st.duration_min for st in steps)),
        fuel_deadline_hours=float(fuel_h),
        failed_step=failed,
        detail=detail,
        lightpaths=state.get("validation", []),
        migration=state.get("migration"),
        estimates={k: state[k] for k in ("trx_estimates", "link_estimate", "ols_estimate") if k in state},
        optimization=optimization,
        figures=figure_datasets(scenario, state),
    )
    return report, state


def run_recovery(scenario: Scenario, seed=None, params=None, audit_path=None) -> RecoveryReport:
    """Run the whole workflow, racing the source data center's fuel.

    Never raises for workflow failures: the outcome and the failing step are
    recorded in the report.  Fuel is checked at each step end; a step ending at
    or after the deadline is recorded as interrupted and the run stops there.
    """
    return execute(scenario, seed, params, audit_path)[0]


def _book(clock: SimClock, step: str, duration: float, fuel_h: float, steps: list, status="completed") -> bool:
    """Put ``step`` on the clock; False if fuel runs out before it ends."""
    start = clock.now_min
    clock.advance(duration)
    if fuel_h - clock.now_hours <= 1e-12 and status == "completed":
        status = "interrupted"
    steps.append(StepRecord(step, float(duration), start, clock.now_min, status))
    return status == "completed"
