"""GN-model quality-of-transmission engine.

Incoherent closed-form NLI accumulation for a fully loaded band, lumped ASE
per amplifier, and the GSNR <-> pre-FEC BER maps used for design.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import erfc

from .model import (
    H_PLANCK,
    Channel,
    ChannelPlan,
    DUMMY_BANDWIDTH_GHZ,
    FiberSpan,
    LineSystem,
    ModelError,
    ModulationFormat,
    db_to_lin,
    dbm_to_w,
    lin_to_db,
    w_to_dbm,
)

REF_BANDWIDTH_HZ = 12.5e9
GSNR_CAP_DB = 60.0
LOS_THRESHOLD_DBM = -50.0
MIN_DISPERSION_PS2_PER_KM = 0.1
DEFAULT_FEC_LIMIT = 2.0e-2

DB_PER_NEPER = 10.0 * math.log10(math.e)


class QotError(ModelError):
    pass


class LossOfSignal(QotError):
    def __init__(self, element, power_dbm):
        super().__init__(f"loss of signal at {element}: {power_dbm:.2f} dBm at amplifier input")
        self.element = element
        self.power_dbm = power_dbm


def effective_length(attenuation_db_per_km: float, length_km: float) -> float:
    """Nonlinear effective length in km; reduces to ``length_km`` when lossless."""
    alpha = attenuation_db_per_km / DB_PER_NEPER
    if alpha * length_km < 1e-12:
        return float(length_km)
    return float(-np.expm1(-alpha * length_km) / alpha)


def ase_power(gain_db, noise_figure_db, carrier_hz, ref_bandwidth_hz=REF_BANDWIDTH_HZ):
    """ASE power (W) emitted by one amplifier in ``ref_bandwidth_hz``."""
    return db_to_lin(noise_figure_db) * H_PLANCK * np.asarray(carrier_hz) * (db_to_lin(gain_db) - 1.0) * ref_bandwidth_hz


def nli_psd_per_span(span: FiberSpan, wdm_psd: float, total_bandwidth_hz: float) -> float:
    """NLI power spectral density (W/Hz) generated by one span, referred to its input."""
    if span.dispersion_ps2_per_km < MIN_DISPERSION_PS2_PER_KM:
        raise QotError(
            f"span {span.id}: |beta2| = {span.dispersion_ps2_per_km} ps^2/km is below the model domain"
        )
    alpha = span.attenuation_db_per_km / DB_PER_NEPER / 1e3  # 1/m
    l_eff = effective_length(span.attenuation_db_per_km, span.length_km) * 1e3
    l_eff_a = 1.0 / alpha
    beta2 = span.dispersion_ps2_per_km * 1e-27  # s^2/m
    gamma = span.gamma_per_w_per_km * 1e-3  # 1/(W m)
    arg = (math.pi ** 2 / 2.0) * beta2 * l_eff_a * total_bandwidth_hz ** 2
    return (8.0 / 27.0) * gamma ** 2 * l_eff ** 2 * wdm_psd ** 3 * math.asinh(arg) / (math.pi * beta2 * l_eff_a)


def combine_snr(*snr_db) -> float:
    """Inverse-sum of SNR terms given in dB; infinite terms drop out."""
    inv = 0.0
    for s in snr_db:
        if math.isinf(s) and s > 0:
            continue
        inv += 10.0 ** (-s / 10.0)
    if inv == 0.0:
        return math.inf
    return -10.0 * math.log10(inv)


def combine_with_transceiver(gsnr_db: float, snr_trx_db: float) -> float:
    return combine_snr(gsnr_db, snr_trx_db)


def ber_from_gsnr(fmt: ModulationFormat, gsnr_db):
    snr = db_to_lin(gsnr_db)
    if fmt.ber_curve == "dp-qpsk":
        return 0.5 * erfc(np.sqrt(snr / 2.0))
    if fmt.ber_curve == "dp-16qam":
        return 0.375 * erfc(np.sqrt(snr / 10.0))
    raise QotError(f"unknown BER curve {fmt.ber_curve!r}")


def required_gsnr(fmt: ModulationFormat, fec_limit: float = DEFAULT_FEC_LIMIT) -> float:
    """Smallest GSNR (dB) whose pre-FEC BER does not exceed ``fec_limit``."""
    if not 0.0 < fec_limit < 0.5:
        raise QotError(f"FEC limit {fec_limit} outside (0, 0.5)")
    lo, hi = -20.0, 40.0
    if not ber_from_gsnr(fmt, hi) <= fec_limit <= ber_from_gsnr(fmt, lo):
        raise QotError(f"FEC limit {fec_limit} cannot be bracketed for {fmt.id}")
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if ber_from_gsnr(fmt, mid) > fec_limit:
            lo = mid
        else:
            hi = mid
    return hi


@dataclass(frozen=True)
class LineConfig:
    """Amplifier set points plus a two-parameter launch profile.

    ``launch_offset_dbm`` and ``launch_tilt_db`` describe the power of a 50 GHz
    dummy carrier entering the booster; wider carriers keep the same PSD.
    """

    amp_gains_db: tuple
    amp_tilts_db: tuple
    launch_offset_dbm: float = 0.0
    launch_tilt_db: float = 0.0

    @classmethod
    def from_line(cls, line: LineSystem, launch_offset_dbm=0.0, launch_tilt_db=0.0):
        return cls(
            tuple(a.gain_db for a in line.amps),
            tuple(a.tilt_db for a in line.amps),
            float(launch_offset_dbm),
            float(launch_tilt_db),
        )

    def launch_profile(self, grid) -> np.ndarray:
        return self.launch_offset_dbm + self.launch_tilt_db * grid.normalized_frequency()

    def params(self) -> np.ndarray:
        return np.concatenate([self.amp_gains_db, self.amp_tilts_db, [self.launch_offset_dbm, self.launch_tilt_db]])

    @classmethod
    def from_params(cls, x, n_amps):
        x = [float(v) for v in x]
        return cls(tuple(x[:n_amps]), tuple(x[n_amps:2 * n_amps]), x[2 * n_amps], x[2 * n_amps + 1])

    def to_dict(self) -> dict:
        return {
            "amp_gains_db": list(self.amp_gains_db),
            "amp_tilts_db": list(self.amp_tilts_db),
            "launch_offset_dbm": self.launch_offset_dbm,
            "launch_tilt_db": self.launch_tilt_db,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["amp_gains_db"]), tuple(d["amp_tilts_db"]), d["launch_offset_dbm"], d["launch_tilt_db"])


def apply_launch(plan: ChannelPlan, config: LineConfig) -> ChannelPlan:
    """Set every channel's launch power from the config's launch profile."""
    profile = config.launch_profile(plan.grid)
    chans = []
    for ch in plan.channels:
        ref = float(np.mean(profile[list(ch.slots(plan.grid))]))
        power = ref + 10.0 * math.log10(ch.symbol_rate_gbd / DUMMY_BANDWIDTH_GHZ)
        chans.append(replace(ch, launch_power_dbm=power))
    return ChannelPlan(plan.grid, tuple(chans))


@functools.lru_cache(maxsize=256)
def _plan_layout(plan: ChannelPlan):
    """Per-slot occupancy and bandwidth, a channel-averaging matrix and per-channel constants."""
    n = plan.grid.slot_count
    n_ch = len(plan.channels)
    occupied = np.zeros(n, dtype=bool)
    bandwidth = np.zeros(n)
    owner = np.zeros(n, dtype=int)
    average = np.zeros((n_ch, n))
    rate_db = np.zeros(n_ch)
    bw_ch = np.zeros(n_ch)
    for c, ch in enumerate(plan.channels):
        span = list(ch.slots(plan.grid))
        bw_ch[c] = ch.symbol_rate_gbd * 1e9
        occupied[span] = True
        bandwidth[span] = bw_ch[c] / len(span)
        owner[span] = c
        average[c, span] = 1.0 / len(span)
        rate_db[c] = 10.0 * math.log10(ch.symbol_rate_gbd / DUMMY_BANDWIDTH_GHZ)
    return occupied, bandwidth, owner, average, rate_db, bw_ch


def launch_arrays(plan: ChannelPlan, config: LineConfig):
    """Per-slot (occupied, bandwidth_hz, psd_w_per_hz) at the line input; same as ``apply_launch(...).slot_arrays()``."""
    occupied, bandwidth, owner, average, rate_db, bw_ch = _plan_layout(plan)
    psd = np.zeros(plan.grid.slot_count)
    if len(plan.channels):
        power_w = dbm_to_w(average @ config.launch_profile(plan.grid) + rate_db) / bw_ch
        psd[occupied] = power_w[owner[occupied]]
    return occupied.copy(), bandwidth.copy(), psd


@dataclass
class Trace:
    """Per-slot state recorded while walking a line.

    ``ref_*`` arrays have one row per reference point: line input, then each
    amplifier output.  PSDs are in W/Hz.
    """

    element_ids: list
    ref_signal: np.ndarray
    ref_ase: np.ndarray
    ref_nli: np.ndarray
    occupied: np.ndarray
    bandwidth: np.ndarray
    amp_input_total_w: np.ndarray
    amp_output_total_w: np.ndarray
    amp_gain_db: np.ndarray  # per amp, per slot
    amp_input_min_dbm: np.ndarray = None  # weakest channel at each amp input
    span_input_signal: list = field(default_factory=list)
    span_nli: list = field(default_factory=list)  # per span, NLI PSD contribution referred to line end

    @property
    def end_signal(self):
        return self.ref_signal[-1]


def amp_slot_gains(line: LineSystem, config: LineConfig) -> np.ndarray:
    fn = line.grid.normalized_frequency()
    n = line.grid.slot_count
    rows = [
        g + t * fn + amp.ripple(n)
        for amp, g, t in zip(line.amps, config.amp_gains_db, config.amp_tilts_db)
    ]
    return np.array(rows)


def walk(line: LineSystem, config: LineConfig, plan: ChannelPlan, *, nf_db=None, check_los=True) -> Trace:
    """Propagate signal, ASE and NLI PSDs through every element of ``line``."""
    grid = line.grid
    amps = line.amps
    if len(config.amp_gains_db) != len(amps) or len(config.amp_tilts_db) != len(amps):
        raise QotError(f"config has {len(config.amp_gains_db)} gains for {len(amps)} amplifiers")
    occupied, bw, sig = launch_arrays(plan, config)
    nu = grid.carriers_hz()
    spacing = grid.spacing_hz
    b_wdm = grid.total_bandwidth_hz
    nf = np.array([a.noise_figure_db for a in amps]) if nf_db is None else np.asarray(nf_db, dtype=float)
    gains_db = amp_slot_gains(line, config)

    ase = np.zeros(grid.slot_count)
    nli = np.zeros(grid.slot_count)
    ids = ["line_input"]
    ref_s, ref_a, ref_n = [sig.copy()], [ase.copy()], [nli.copy()]
    amp_in, amp_out, amp_min = [], [], []
    span_in = []
    span_nli_raw = []  # (span index, contribution at generation point)
    for k, amp in enumerate(amps):
        if occupied.any():
            with np.errstate(divide="ignore"):
                p_min = float(np.min(w_to_dbm(sig[occupied] * bw[occupied])))
        else:
            p_min = math.inf
        if check_los and p_min < LOS_THRESHOLD_DBM:
            raise LossOfSignal(amp.id, p_min)
        amp_min.append(p_min)
        amp_in.append(np.sum(sig * bw) + np.sum(ase + nli) * spacing)
        g = db_to_lin(gains_db[k])
        sig = sig * g
        nli = nli * g
        ase = ase * g + db_to_lin(nf[k]) * H_PLANCK * nu * (g - 1.0)
        span_nli_raw = [(j, c * g) for j, c in span_nli_raw]
        amp_out.append(np.sum(sig * bw) + np.sum(ase + nli) * spacing)
        ids.append(amp.id)
        ref_s.append(sig.copy())
        ref_a.append(ase.copy())
        ref_n.append(nli.copy())
        if k < len(line.spans):
            span = line.spans[k]
            span_in.append(sig.copy())
            g_wdm = np.sum(sig * bw) / b_wdm
            contrib = nli_psd_per_span(span, g_wdm, b_wdm) if g_wdm > 0 else 0.0
            t = db_to_lin(-span.loss_db)
            nli = (nli + contrib) * t
            sig = sig * t
            ase = ase * t
            span_nli_raw = [(j, c * t) for j, c in span_nli_raw] + [(k, np.full(grid.slot_count, contrib) * t)]
    return Trace(
        element_ids=ids,
        ref_signal=np.array(ref_s),
        ref_ase=np.array(ref_a),
        ref_nli=np.array(ref_n),
        occupied=occupied,
        bandwidth=bw,
        amp_input_total_w=np.array(amp_in),
        amp_output_total_w=np.array(amp_out),
        amp_gain_db=gains_db,
        amp_input_min_dbm=np.array(amp_min),
        span_input_signal=span_in,
        span_nli=[c for _, c in span_nli_raw],
    )


def _capped_db(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        lin = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    return np.minimum(lin_to_db(lin), GSNR_CAP_DB)


@dataclass(frozen=True)
class GsnrSpectrum:
    """Per-slot GSNR at one reference point (``reference`` names the element)."""

    reference_index: int
    reference: str
    slots: tuple
    gsnr_db: tuple
    snr_ase_db: tuple
    snr_nli_db: tuple

    def by_slot(self) -> dict:
        return dict(zip(self.slots, self.gsnr_db))

    def to_dict(self) -> dict:
        return {
            "reference_index": self.reference_index,
            "reference": self.reference,
            "slots": list(self.slots),
            "gsnr_db": list(self.gsnr_db),
            "snr_ase_db": list(self.snr_ase_db),
            "snr_nli_db": list(self.snr_nli_db),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["reference_index"], d["reference"], tuple(d["slots"]), tuple(d["gsnr_db"]),
                   tuple(d["snr_ase_db"]), tuple(d["snr_nli_db"]))


def spectra_from_trace(trace: Trace) -> list:
    slots = np.flatnonzero(trace.occupied)
    out = []
    for i, ref in enumerate(trace.element_ids):
        s = trace.ref_signal[i][slots]
        a = trace.ref_ase[i][slots]
        n = trace.ref_nli[i][slots]
        out.append(GsnrSpectrum(
            i, ref, tuple(int(x) for x in slots),
            tuple(float(x) for x in _capped_db(s, a + n)),
            tuple(float(x) for x in _capped_db(s, a)),
            tuple(float(x) for x in _capped_db(s, n)),
        ))
    return out


def propagate_gsnr(line: LineSystem, config: LineConfig, plan: ChannelPlan) -> list:
    """Accumulated GSNR spectra: line input, then after every amplifier."""
    return spectra_from_trace(walk(line, config, plan))


def end_gsnr_array(line: LineSystem, config: LineConfig, plan: ChannelPlan) -> np.ndarray:
    """Uncapped end-of-line GSNR (dB) over all slots; NaN where empty."""
    tr = walk(line, config, plan)
    s, a, n = tr.ref_signal[-1], tr.ref_ase[-1], tr.ref_nli[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        g = lin_to_db(s / (a + n))
    g[~tr.occupied] = np.nan
    return g


def channel_gsnr(spectrum: GsnrSpectrum, channel: Channel, grid) -> float:
    """GSNR of a carrier spanning one or more slots (noise averaged over its slots)."""
    values = spectrum.by_slot()
    inv = [10.0 ** (-values[s] / 10.0) for s in channel.slots(grid)]
    return -10.0 * math.log10(sum(inv) / len(inv))


def block_gsnr(gsnr_by_slot, slots) -> float:
    inv = [10.0 ** (-gsnr_by_slot[s] / 10.0) for s in slots]
    return -10.0 * math.log10(sum(inv) / len(inv))


def launch_sensitivity(line: LineSystem, config: LineConfig, plan: ChannelPlan):
    """Analytic d(end GSNR dB)/d(launch offset) and d/d(launch tilt) per slot.

    Amplifiers are held in constant-gain mode, so launch changes scale the
    signal everywhere while ASE stays put and each span's NLI follows the cube
    of its mean input PSD.
    """
    tr = walk(line, config, plan)
    grid = line.grid
    fn = grid.normalized_frequency()
    f_eff = fn.copy()
    for ch in plan.channels:
        idx = list(ch.slots(grid))
        f_eff[idx] = fn[idx].mean()
    s_end = tr.ref_signal[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        i_ase = tr.ref_ase[-1] / s_end
        i_nli_spans = [c / s_end for c in tr.span_nli]
    i_nli = np.sum(i_nli_spans, axis=0) if i_nli_spans else np.zeros_like(s_end)
    total = i_ase + i_nli
    d_offset = (i_ase - 2.0 * i_nli) / total
    acc = f_eff * i_ase
    for s_in, i_j in zip(tr.span_input_signal, i_nli_spans):
        p = s_in * tr.bandwidth
        w = np.sum(f_eff * p) / np.sum(p)
        acc = acc + (f_eff - 3.0 * w) * i_j
    d_tilt = acc / total
    d_offset[~tr.occupied] = np.nan
    d_tilt[~tr.occupied] = np.nan
    return d_offset, d_tilt


def config_violations(line: LineSystem, config: LineConfig, plan: ChannelPlan) -> list:
    """Human-readable list of gain/tilt range and output power violations."""
    problems = []
    for amp, g, t in zip(line.amps, config.amp_gains_db, config.amp_tilts_db):
        lo, hi = amp.gain_range_db
        if not lo - 1e-9 <= g <= hi + 1e-9:
            problems.append(f"{amp.id}: gain {g:.3f} dB outside [{lo}, {hi}]")
        tlo, thi = amp.tilt_range_db
        if not tlo - 1e-9 <= t <= thi + 1e-9:
            problems.append(f"{amp.id}: tilt {t:.3f} dB outside [{tlo}, {thi}]")
    if problems:
        return problems
    tr = walk(line, config, plan, check_los=False)
    for amp, p in zip(line.amps, tr.amp_output_total_w):
        if w_to_dbm(p) > amp.max_total_output_dbm + 1e-9:
            problems.append(f"{amp.id}: total output {float(w_to_dbm(p)):.2f} dBm above {amp.max_total_output_dbm}")
    return problems
