"""Estimators that recover line and transceiver parameters from telemetry.

Nothing here reads ground truth.  Line-level estimators work against a
*public view* of the line (lengths, fiber type, amplifier ranges) and the
telemetry records produced by :mod:`agile_twin.telemetry`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from . import qot
from .model import (
    ChannelPlan,
    Edfa,
    LineSystem,
    LumpedLoss,
    ModelError,
    get_format,
    lin_to_db,
    w_to_dbm,
)
from .telemetry import (
    BER_CEILING,
    AmpPowerReading,
    OsaSpectrum,
    PowerProfile,
    VoaSweepRecord,
    voa_ber_model,
)

DEFAULT_DETECTION_THRESHOLD_DB = 0.6
MIN_PROFILE_SAMPLES = 100
MIN_SEGMENT_KM = 0.5
PLACEHOLDER_NF_DB = 5.0
NF_BOUNDS_DB = (3.0, 12.0)


class EstimationError(ModelError):
    pass


class RankError(EstimationError):
    pass


# --- public view / digital twin --------------------------------------------------


def public_view(line: LineSystem) -> LineSystem:
    """Copy of ``line`` without any hidden parameter.

    Noise figures become a placeholder, ripple and lumped losses are dropped.
    """
    def amp(a: Edfa) -> Edfa:
        return replace(a, noise_figure_db=PLACEHOLDER_NF_DB, gain_ripple_db=())

    return replace(
        line,
        booster=amp(line.booster),
        ilas=tuple(amp(a) for a in line.ilas),
        preamp=amp(line.preamp) if line.preamp is not None else None,
        spans=tuple(replace(s, lumped_losses=()) for s in line.spans),
    )


@dataclass(frozen=True)
class LinkEstimate:
    span_boundaries_km: tuple  # amplifier positions between spans
    attenuation_db_per_km: tuple
    amp_net_step_db: tuple
    lumped_losses: tuple  # (position_km, magnitude_db), absolute positions
    launch_power_dbm: float
    residual_db: float
    total_length_km: float

    def span_edges(self):
        return (0.0,) + tuple(self.span_boundaries_km) + (self.total_length_km,)

    def to_dict(self):
        return {
            "span_boundaries_km": list(self.span_boundaries_km),
            "attenuation_db_per_km": list(self.attenuation_db_per_km),
            "amp_net_step_db": list(self.amp_net_step_db),
            "lumped_losses": [{"position_km": p, "magnitude_db": m} for p, m in self.lumped_losses],
            "launch_power_dbm": self.launch_power_dbm,
            "residual_db": self.residual_db,
            "total_length_km": self.total_length_km,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["span_boundaries_km"]), tuple(d["attenuation_db_per_km"]), tuple(d["amp_net_step_db"]),
                   tuple((l["position_km"], l["magnitude_db"]) for l in d["lumped_losses"]),
                   d["launch_power_dbm"], d["residual_db"], d["total_length_km"])


@dataclass(frozen=True)
class OlsEstimate:
    amp_ids: tuple
    noise_figure_db: tuple
    ripple_db: tuple  # per amp, per slot
    residual_db: float
    probe_count: int
    measurement_slots: tuple

    def to_dict(self):
        return {"amp_ids": list(self.amp_ids), "noise_figure_db": list(self.noise_figure_db),
                "ripple_db": [list(r) for r in self.ripple_db], "residual_db": self.residual_db,
                "probe_count": self.probe_count, "measurement_slots": list(self.measurement_slots)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["amp_ids"]), tuple(d["noise_figure_db"]), tuple(tuple(r) for r in d["ripple_db"]),
                   d["residual_db"], d["probe_count"], tuple(d["measurement_slots"]))


@dataclass(frozen=True)
class TrxEstimate:
    port_id: str
    snr_trx_db: float
    knee_dbm: float
    residual: float

    def to_dict(self):
        return {"port_id": self.port_id, "snr_trx_db": self.snr_trx_db, "knee_dbm": self.knee_dbm,
                "residual": self.residual}

    @classmethod
    def from_dict(cls, d):
        return cls(d["port_id"], d["snr_trx_db"], d["knee_dbm"], d["residual"])


def apply_link_estimate(public: LineSystem, est: LinkEstimate) -> LineSystem:
    """Replace span lengths, attenuation and lumped losses with DLM results."""
    edges = est.span_edges()
    if len(edges) - 1 != len(public.spans):
        raise EstimationError(
            f"DLM found {len(edges) - 1} spans but {public.id} has {len(public.spans)}"
        )
    spans = []
    for k, span in enumerate(public.spans):
        start, end = edges[k], edges[k + 1]
        losses = tuple(
            LumpedLoss(round(p - start, 9), m) for p, m in est.lumped_losses if start <= p < end
        )
        spans.append(replace(span, length_km=end - start, attenuation_db_per_km=est.attenuation_db_per_km[k],
                             lumped_losses=losses))
    return replace(public, spans=tuple(spans))


def apply_ols_estimate(line: LineSystem, est: OlsEstimate) -> LineSystem:
    """Insert estimated noise figures and ripple into the amplifiers."""
    amps = []
    for a, nf, rip in zip(line.amps, est.noise_figure_db, est.ripple_db):
        amps.append(replace(a, noise_figure_db=float(nf), gain_ripple_db=tuple(rip)))
    return replace(
        line,
        booster=amps[0],
        ilas=tuple(amps[1:len(line.ilas) + 1]),
        preamp=amps[-1] if line.preamp is not None else None,
    )


def build_twin(public: LineSystem, link: LinkEstimate, ols: OlsEstimate = None) -> LineSystem:
    twin = apply_link_estimate(public, link)
    return apply_ols_estimate(twin, ols) if ols is not None else twin


# --- DLM profile analysis -----------------------------------------------------


def _best_step(x, y, m):
    """Best single step for y ~ a + b*x + c*[i >= t] with at least m samples per side.

    Returns (t, c, sse_reduction) or None if the segment is too short.
    """
    n = len(y)
    if n < 2 * m + 1:
        return None
    xc = x - x.mean()
    sxx = float(np.dot(xc, xc))
    b = float(np.dot(xc, y)) / sxx if sxx > 0 else 0.0
    r = y - y.mean() - b * xc
    suffix_r = np.cumsum(r[::-1])[::-1]
    suffix_x = np.cumsum(xc[::-1])[::-1]
    t = np.arange(m, n - m + 1)
    nt = (n - t).astype(float)
    s = suffix_r[t]
    xt = suffix_x[t]
    norm = nt - nt ** 2 / n - (xt ** 2 / sxx if sxx > 0 else 0.0)
    norm = np.maximum(norm, 1e-12)
    gain = s ** 2 / norm
    i = int(np.argmax(gain))
    return int(t[i]), float(s[i] / norm[i]), float(gain[i])


def _segment(x, y, lo, hi, m, threshold, out):
    found = _best_step(x[lo:hi], y[lo:hi], m)
    if found is None:
        return
    t, c, _ = found
    if abs(c) <= threshold:
        return
    cut = lo + t
    out.append(cut)
    _segment(x, y, lo, cut, m, threshold, out)
    _segment(x, y, cut, hi, m, threshold, out)


def _robust_sigma(y):
    d = np.diff(y)
    d = d - np.median(d)
    return float(1.4826 * np.median(np.abs(d)) / math.sqrt(2.0))


def analyze_dlm_profile(profile: PowerProfile, detection_threshold=DEFAULT_DETECTION_THRESHOLD_DB) -> LinkEstimate:
    """Segment a longitudinal power profile into spans, amplifiers and lumped losses.

    Pass one finds step candidates by recursive single-step least squares on
    detrended segments, pass two fits one attenuation slope per span with the
    lumped-loss steps as extra regressors.
    """
    x, y = profile.x, profile.y
    if len(y) < MIN_PROFILE_SAMPLES:
        raise EstimationError(f"profile has {len(y)} samples, need at least {MIN_PROFILE_SAMPLES}")
    sigma = profile.noise_sigma_db if profile.noise_sigma_db > 0 else _robust_sigma(y)
    if detection_threshold < 3.0 * sigma - 1e-9:
        raise EstimationError(
            f"detection threshold {detection_threshold} dB is below 3x the noise level ({sigma:.3f} dB)"
        )
    spacing = float(np.median(np.diff(x)))
    m = max(2, int(round(MIN_SEGMENT_KM / spacing)))

    cuts = []
    _segment(x, y, 0, len(y), m, detection_threshold, cuts)
    cuts = sorted(cuts)
    # refine each cut between its neighbours
    refined = []
    for i, cut in enumerate(cuts):
        lo = cuts[i - 1] if i > 0 else 0
        hi = cuts[i + 1] if i + 1 < len(cuts) else len(y)
        found = _best_step(x[lo:hi], y[lo:hi], min(m, (hi - lo - 1) // 2))
        refined.append(lo + found[0] if found is not None else cut)
    cuts = sorted(set(refined))

    # classify by sign of the local step
    ups, downs = [], []
    for i, cut in enumerate(cuts):
        lo = cuts[i - 1] if i > 0 else 0
        hi = cuts[i + 1] if i + 1 < len(cuts) else len(y)
        c = _step_size(x[lo:hi], y[lo:hi], cut - lo)
        (ups if c > 0 else downs).append(cut)

    edges = [0] + ups + [len(y)]
    slopes, intercepts, losses, resid = [], [], [], np.zeros_like(y)
    for k in range(len(edges) - 1):
        lo, hi = edges[k], edges[k + 1]
        xs = x[lo:hi] - x[lo]
        inner = [d for d in downs if lo < d < hi]
        cols = [np.ones_like(xs), xs] + [(np.arange(lo, hi) >= d).astype(float) for d in inner]
        a = np.column_stack(cols)
        coef, *_ = np.linalg.lstsq(a, y[lo:hi], rcond=None)
        resid[lo:hi] = y[lo:hi] - a @ coef
        intercepts.append(float(coef[0]))
        slopes.append(float(coef[1]))
        for d, c in zip(inner, coef[2:]):
            if -c > detection_threshold:
                losses.append((float(x[d]), float(-c)))

    net_steps = []
    for k in range(1, len(edges) - 1):
        b = edges[k]
        before = intercepts[k - 1] + slopes[k - 1] * (x[b] - x[edges[k - 1]])
        before -= sum(m_ for p, m_ in losses if x[edges[k - 1]] <= p < x[b])
        net_steps.append(float(intercepts[k] - before))

    return LinkEstimate(
        span_boundaries_km=tuple(float(x[u]) for u in ups),
        attenuation_db_per_km=tuple(-s for s in slopes),
        amp_net_step_db=tuple(net_steps),
        lumped_losses=tuple(losses),
        launch_power_dbm=intercepts[0],
        residual_db=float(np.sqrt(np.mean(resid ** 2))),
        total_length_km=float(x[-1]),
    )


def _step_size(x, y, t):
    """LS step size at index t in a segment with a common slope."""
    h = (np.arange(len(y)) >= t).astype(float)
    a = np.column_stack([np.ones_like(x), x - x[0], h])
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    return float(coef[2])


@dataclass(frozen=True)
class ProfileDelta:
    positions_km: tuple
    delta_db: tuple
    max_abs_db: float
    mean_db: float

    def to_dict(self):
        return {"positions_km": list(self.positions_km), "delta_db": list(self.delta_db),
                "max_abs_db": self.max_abs_db, "mean_db": self.mean_db}


def compare_profiles(before: PowerProfile, after: PowerProfile) -> ProfileDelta:
    """Per-position difference after - before, with ``after`` resampled onto ``before``."""
    xb, xa = before.x, after.x
    if abs(xb[-1] - xa[-1]) > 1e-6 or abs(xb[0] - xa[0]) > 1e-6:
        raise EstimationError(
            f"profiles cover different lengths ({xb[-1]:.3f} km vs {xa[-1]:.3f} km)"
        )
    ya = np.interp(xb, xa, after.y)
    d = ya - before.y
    return ProfileDelta(tuple(float(v) for v in xb), tuple(float(v) for v in d),
                        float(np.max(np.abs(d))), float(np.mean(d)))


# --- OLS calibration ------------------------------------------------------------


@dataclass(frozen=True)
class OlsProbe:
    """One operating point of the calibration campaign."""

    config: qot.LineConfig
    spectrum: OsaSpectrum
    readings: tuple
    measurement_slots: tuple

    def to_dict(self):
        return {"config": self.config.to_dict(), "spectrum": self.spectrum.to_dict(),
                "readings": [r.to_dict() for r in self.readings],
                "measurement_slots": list(self.measurement_slots)}

    @classmethod
    def from_dict(cls, d):
        return cls(qot.LineConfig.from_dict(d["config"]), OsaSpectrum.from_dict(d["spectrum"]),
                   tuple(AmpPowerReading.from_dict(r) for r in d["readings"]), tuple(d["measurement_slots"]))


MIN_ASE_SHARE = 0.05
PROBE_LOS_MARGIN_DB = 1.0


def _ols_rows(model: LineSystem, config: qot.LineConfig, plan: ChannelPlan, meas_idx):
    """Linear model of one probe's observables in the per-amp linear NF.

    Observables are the far-end PSD in the measurement slots (W/Hz), then every
    amplifier's total input and output power (W).  Returns ``(basis, fixed)``
    with ``observable = basis @ nf_lin + fixed``.
    """
    k_amps = len(model.amps)
    silent = np.full(k_amps, -np.inf)

    def observables(tr):
        return np.concatenate([
            tr.ref_ase[-1][meas_idx] + tr.ref_nli[-1][meas_idx] + tr.ref_signal[-1][meas_idx],
            tr.amp_input_total_w,
            tr.amp_output_total_w,
        ])

    fixed = observables(qot.walk(model, config, plan, nf_db=silent, check_los=False))
    basis = []
    for k in range(k_amps):
        nf = silent.copy()
        nf[k] = 0.0
        basis.append(observables(qot.walk(model, config, plan, nf_db=nf, check_los=False)) - fixed)
    return np.array(basis).T, fixed


def _usable_rows(basis, fixed, nf_lin, n_meas):
    """Spectrum rows always; monitor rows only where ASE is a visible share."""
    pred = basis @ nf_lin + fixed
    share = (basis @ nf_lin) / pred
    keep = share >= MIN_ASE_SHARE
    keep[:n_meas] = True
    return keep, pred


def _probe_check(line, config, plan):
    """``(trace, output_excess_db)``, or ``(None, None)`` if ranges or loss of signal rule the probe out."""
    for amp, g, t in zip(line.amps, config.amp_gains_db, config.amp_tilts_db):
        if not (amp.gain_range_db[0] - 1e-9 <= g <= amp.gain_range_db[1] + 1e-9
                and amp.tilt_range_db[0] - 1e-9 <= t <= amp.tilt_range_db[1] + 1e-9):
            return None, None
    tr = qot.walk(line, config, plan, check_los=False)
    if np.min(tr.amp_input_min_dbm) < qot.LOS_THRESHOLD_DBM:
        return None, None
    out_dbm = w_to_dbm(tr.amp_output_total_w)
    excess = float(np.max(out_dbm - np.array([a.max_total_output_dbm for a in line.amps])))
    return tr, excess


def _probe_feasible(line, config, plan):
    tr, excess = _probe_check(line, config, plan)
    return tr if tr is not None and excess <= 1e-9 else None


def _settle_launch(line, config, plan, max_steps=60):
    """Lower the launch offset in whole dB until no amplifier exceeds its output limit."""
    lowered = 0
    while lowered <= max_steps:
        tr, excess = _probe_check(line, config, plan)
        if tr is None:
            return None
        if excess <= 1e-9:
            return config
        # output falls by at most 1 dB per dB of launch, so smaller steps cannot be feasible
        step = max(1, math.ceil(excess - 1e-9))
        lowered += step
        config = replace(config, launch_offset_dbm=config.launch_offset_dbm - step)
    return None


def _quiet_launch(line, config, plan):
    """Same gains at the lowest launch that stays clear of loss of signal."""
    tr = _probe_feasible(line, config, plan)
    if tr is None:
        return None
    margin = float(np.min(tr.amp_input_min_dbm)) - (qot.LOS_THRESHOLD_DBM + PROBE_LOS_MARGIN_DB)
    if margin < 1.0:
        return None
    quiet = replace(config, launch_offset_dbm=config.launch_offset_dbm - math.floor(margin))
    return quiet if _probe_feasible(line, quiet, plan) is not None else None


def _candidate_probes(line: LineSystem, base: qot.LineConfig, plan: ChannelPlan, step_db: float) -> list:
    amps = line.amps
    k_amps = len(amps)
    out = [base]
    tilt_options = (None, 0, 1)
    for k in range(k_amps):
        for upstream_low, target_max, downstream_max in itertools.product((False, True), repeat=3):
            gains = list(base.amp_gains_db)
            for j, amp in enumerate(amps):
                lo, hi = amp.gain_range_db
                if j < k and upstream_low:
                    gains[j] = lo
                elif j == k:
                    gains[j] = hi if target_max else min(gains[j] + step_db, hi)
                elif j > k and downstream_max:
                    gains[j] = hi
            for tilt in tilt_options:
                cfg = replace(base, amp_gains_db=tuple(gains))
                if tilt is not None:
                    cfg = replace(cfg, amp_tilts_db=tuple(a.tilt_range_db[tilt] for a in amps))
                cfg = _settle_launch(line, cfg, plan)
                if cfg is None:
                    continue
                out.append(cfg)
                quiet = _quiet_launch(line, cfg, plan)
                if quiet is not None:
                    out.append(quiet)
    return out


def design_probes(line: LineSystem, base: qot.LineConfig, count=8, step_db=6.0,
                  measurement_slots=None) -> list:
    """Gain/tilt/launch settings for the calibration campaign.

    Candidates raise one amplifier's gain (optionally with upstream gains at
    minimum, downstream gains at maximum and the tilt at either limit), each at
    a feasible launch and again at the quietest launch that keeps every channel
    clear of loss of signal.  In quiet probes the amplifier monitors read mostly
    ASE.  Probes are picked greedily, then refined by single exchanges, to
    minimise the worst predicted NF standard deviation under equal relative
    noise on every reading.  Probe 0 is always ``base``.

    ``line`` should be the public model; only placeholder NFs are used.
    """
    amps = line.amps
    k_amps = len(amps)
    if count < 1:
        raise EstimationError("probe count must be positive")
    if measurement_slots is None:
        measurement_slots = (0, line.grid.slot_count - 1)
    meas_idx = np.array(sorted(set(measurement_slots)))
    plan = _probe_plan(line.grid, tuple(meas_idx))
    nf_lin = np.full(k_amps, 10.0 ** (PLACEHOLDER_NF_DB / 10.0))

    cands = _candidate_probes(line, base, plan, step_db)
    blocks = []
    for cfg in cands:
        basis, fixed = _ols_rows(line, cfg, plan, meas_idx)
        keep, pred = _usable_rows(basis, fixed, nf_lin, len(meas_idx))
        blocks.append((basis / pred[:, None])[keep])

    def score(idx):
        a = np.vstack([blocks[i] for i in idx])
        info = a.T @ a
        if np.linalg.matrix_rank(info, tol=1e-10 * max(np.trace(info), 1e-300)) < k_amps:
            return math.inf
        cov = np.linalg.inv(info)
        return float(np.max(np.sqrt(np.abs(np.diag(cov))) / nf_lin))

    def best_for(idx, pos):
        trials = [score(idx[:pos] + [i] + idx[pos + 1:]) for i in range(len(cands))]
        return int(np.argmin(trials))

    chosen = [0]
    while len(chosen) < count:
        chosen.append(best_for(chosen + [0], len(chosen)))
    for _ in range(3):
        before = list(chosen)
        for pos in range(1, count):
            chosen[pos] = best_for(chosen, pos)
        if chosen == before:
            break
    return [cands[i] for i in chosen]


def predicted_nf_std_db(line: LineSystem, probes, sigma_db: float, measurement_slots=None) -> np.ndarray:
    """Cramer-Rao style NF standard deviation (dB) for a probe set.

    Assumes independent ``sigma_db`` errors on every OSA and monitor reading
    and uses the NFs currently stored on ``line``.
    """
    if measurement_slots is None:
        measurement_slots = (0, line.grid.slot_count - 1)
    meas_idx = np.array(sorted(set(measurement_slots)))
    plan = _probe_plan(line.grid, tuple(meas_idx))
    nf_lin = 10.0 ** (np.array([a.noise_figure_db for a in line.amps]) / 10.0)
    rows = []
    for cfg in probes:
        basis, fixed = _ols_rows(line, cfg, plan, meas_idx)
        keep, pred = _usable_rows(basis, fixed, nf_lin, len(meas_idx))
        rows.append((basis / pred[:, None])[keep])
    a = np.vstack(rows)
    rel = sigma_db * math.log(10.0) / 10.0
    cov = np.linalg.inv(a.T @ a) * rel ** 2
    return 10.0 / math.log(10.0) * np.sqrt(np.diag(cov)) / nf_lin


def _probe_plan(grid, measurement_slots):
    return ChannelPlan.fully_loaded(grid, skip=measurement_slots)


def calibrate_ols(probes, link: LineSystem, iterations=4) -> OlsEstimate:
    """Fit per-amplifier noise figure and gain ripple from calibration probes.

    ``link`` is the public line with DLM-derived spans; its amplifier noise
    figures and ripple are ignored.  Noise figures come from a weighted least
    squares fit of the far-end ASE floor in the empty measurement slots and of
    the amplifier power monitors, all linear in each amplifier's NF once gains,
    losses and the NLI floor are known.  Monitor readings where ASE is a small
    share of the total are left out, since there span-loss errors would swamp
    the noise.  Only the sum of the amplifiers' ripple is observable end to
    end; it is shared equally.
    """
    k_amps = len(link.amps)
    if len(probes) < k_amps + 2:
        raise RankError(f"{len(probes)} probes for {k_amps} amplifiers; need at least {k_amps + 2}")
    grid = link.grid
    n = grid.slot_count
    meas = tuple(sorted(set(probes[0].measurement_slots)))
    if not meas:
        raise EstimationError("probes need at least one empty measurement slot")
    signal_slots = np.array([s for s in range(n) if s not in meas])
    meas_idx = np.array(meas)
    plan = _probe_plan(grid, meas)
    amp_ids = [a.id for a in link.amps]

    measured = np.array([p.spectrum.power_dbm for p in probes])
    measured_psd = 1e-3 * 10.0 ** (measured / 10.0) / qot.REF_BANDWIDTH_HZ
    observed = []
    for p, psd in zip(probes, measured_psd):
        by_id = {r.amp_id: r for r in p.readings}
        if set(by_id) != set(amp_ids):
            raise EstimationError("probe readings do not cover every amplifier")
        mon_in = [1e-3 * 10.0 ** (by_id[i].input_dbm / 10.0) for i in amp_ids]
        mon_out = [1e-3 * 10.0 ** (by_id[i].output_dbm / 10.0) for i in amp_ids]
        observed.append(np.concatenate([psd[meas_idx], mon_in, mon_out]))

    nf_db = np.full(k_amps, PLACEHOLDER_NF_DB)
    cum_ripple = np.zeros(n)

    def line_with(ripple_total):
        share = tuple(ripple_total / k_amps)
        amps = [replace(a, gain_ripple_db=share) for a in link.amps]
        return replace(link, booster=amps[0], ilas=tuple(amps[1:len(link.ilas) + 1]),
                       preamp=amps[-1] if link.preamp is not None else None)

    def predict(model, cfg, nf):
        tr = qot.walk(model, cfg, plan, nf_db=nf, check_los=False)
        return tr.ref_signal[-1], tr.ref_signal[-1] + tr.ref_ase[-1] + tr.ref_nli[-1]

    for _ in range(iterations):
        # ripple from the signal slots, weighted by how much of each slot is signal
        model = line_with(cum_ripple)
        delta, weight = [], []
        for p, psd in zip(probes, measured_psd):
            sig, pred = predict(model, p.config, nf_db)
            delta.append(lin_to_db(psd[signal_slots] / pred[signal_slots]))
            weight.append(sig[signal_slots] / pred[signal_slots])
        weight = np.array(weight) ** 2
        update = np.zeros(n)
        update[signal_slots] = np.sum(np.array(delta) * weight, axis=0) / np.sum(weight, axis=0)
        for s in meas:
            nearest = signal_slots[np.argmin(np.abs(signal_slots - s))]
            update[s] = update[nearest]
        cum_ripple = cum_ripple + update
        cum_ripple -= cum_ripple.mean()

        # NF from the ASE floor and the power monitors
        model = line_with(cum_ripple)
        nf_lin = 10.0 ** (nf_db / 10.0)
        rows, rhs = [], []
        for p, obs in zip(probes, observed):
            basis, fixed = _ols_rows(model, p.config, plan, meas_idx)
            keep, _ = _usable_rows(basis, fixed, nf_lin, len(meas_idx))
            w = 1.0 / obs[keep]
            rows.append(basis[keep] * w[:, None])
            rhs.append((obs[keep] - fixed[keep]) * w)
        a = np.vstack(rows)
        b = np.concatenate(rhs)
        col_scale = np.linalg.norm(a, axis=0)
        if np.any(col_scale == 0) or np.linalg.matrix_rank(a / col_scale, tol=1e-8) < k_amps:
            raise RankError("probe set is degenerate: noise figures are not identifiable")
        sol, *_ = np.linalg.lstsq(a / col_scale, b, rcond=None)
        sol = sol / col_scale
        nf_db = np.clip(lin_to_db(np.maximum(sol, 1e-3)), *NF_BOUNDS_DB)

    model = line_with(cum_ripple)
    resid = []
    for p, m in zip(probes, measured):
        _, pred = predict(model, p.config, nf_db)
        resid.append(m - lin_to_db(pred * qot.REF_BANDWIDTH_HZ / 1e-3))
    share = cum_ripple / k_amps
    return OlsEstimate(
        amp_ids=tuple(amp_ids),
        noise_figure_db=tuple(float(v) for v in nf_db),
        ripple_db=tuple(tuple(float(v) for v in share) for _ in range(k_amps)),
        residual_db=float(np.sqrt(np.mean(np.square(resid)))),
        probe_count=len(probes),
        measurement_slots=meas,
    )


# --- transceiver noise ------------------------------------------------------------


def fit_transceiver_noise(sweep: VoaSweepRecord, fmt=None) -> TrxEstimate:
    """Fit transceiver SNR and receiver knee to a VOA sweep in log10(BER)."""
    a = np.asarray(sweep.attenuations_db, dtype=float)
    ber = np.asarray(sweep.ber, dtype=float)
    if a.size > 1 and not np.all(np.diff(a) > 0):
        raise EstimationError("sweep attenuations are not strictly increasing")
    if a.size > 1 and np.any(np.diff(ber) < 0):
        raise EstimationError("sweep BER is not monotone in attenuation")
    ok = ~np.asarray(sweep.saturated, dtype=bool) & (ber < BER_CEILING)
    if not ok.any():
        raise EstimationError("every sweep point is saturated")
    if ok.sum() < 5:
        raise EstimationError(f"{int(ok.sum())} usable sweep points, need at least 5")
    f = get_format(fmt or sweep.format)
    a, target = a[ok], np.log10(ber[ok])

    def cost(params):
        snr, knee = params
        model = voa_ber_model(f, a, snr, knee, sweep.reference_gsnr_db, sweep.rx_power_dbm)
        return float(np.sum((np.log10(model) - target) ** 2))

    p_hi = sweep.rx_power_dbm
    p_lo = sweep.rx_power_dbm - a.max()
    snr_grid = np.arange(5.0, 40.0 + 1e-9, 0.25)
    knee_grid = np.arange(p_lo - 5.0, p_hi + 5.0 + 1e-9, 0.5)
    model = voa_ber_model(f, a[None, None, :], snr_grid[:, None, None], knee_grid[None, :, None],
                          sweep.reference_gsnr_db, sweep.rx_power_dbm)
    costs = np.sum((np.log10(model) - target) ** 2, axis=-1)
    i, j = np.unravel_index(np.argmin(costs), costs.shape)
    best = (float(costs[i, j]), float(snr_grid[i]), float(knee_grid[j]))
    res = minimize(cost, x0=[best[1], best[2]], method="Nelder-Mead",
                   options={"xatol": 1e-7, "fatol": 1e-16, "maxiter": 4000})
    snr, knee = (res.x if res.fun <= best[0] else (best[1], best[2]))
    final = cost((snr, knee))
    return TrxEstimate(sweep.port_id, float(snr), float(knee), float(math.sqrt(final / a.size)))

