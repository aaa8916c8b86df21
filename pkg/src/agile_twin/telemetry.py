"""Synthetic observables: DLM power profiles, OSA spectra, amplifier power
monitors and VOA sweeps.

This is the only module that reads the hidden ground-truth fields of a line
(noise figures, ripple, lumped losses, transceiver SNR).  The records it
returns carry measurements and measurement-setup metadata only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import qot
from .model import (
    DUMMY_BANDWIDTH_GHZ,
    PROBE,
    Channel,
    ChannelPlan,
    LineSystem,
    ModelError,
    TransceiverPort,
    get_format,
    lin_to_db,
    total_length,
    w_to_dbm,
)

DEFAULT_SAMPLE_SPACING_KM = 0.1
DEFAULT_DLM_SIGMA_DB = 0.2
VOA_RX_POWER_DBM = -5.0
VOA_KNEE_DBM = -15.0
VOA_COUNTING_SIGMA = 0.05
BER_FLOOR = 1e-30
BER_CEILING = 0.5 - 1e-9


class TelemetryError(ModelError):
    pass


def clipped_normal(rng, sigma, size=None):
    """Gaussian noise clipped at +-3 sigma."""
    if sigma <= 0:
        return np.zeros(size) if size is not None else 0.0
    return np.clip(rng.normal(0.0, sigma, size), -3 * sigma, 3 * sigma)


@dataclass(frozen=True)
class PowerProfile:
    positions_km: tuple
    power_dbm: tuple
    slot_index: int
    noise_sigma_db: float
    seed: int

    def __post_init__(self):
        pos = np.asarray(self.positions_km)
        if len(pos) != len(self.power_dbm):
            raise TelemetryError("profile positions and powers differ in length")
        if len(pos) > 1 and not np.all(np.diff(pos) > 0):
            raise TelemetryError("profile positions must be strictly increasing")

    @property
    def x(self):
        return np.asarray(self.positions_km, dtype=float)

    @property
    def y(self):
        return np.asarray(self.power_dbm, dtype=float)

    def to_dict(self):
        return {"positions_km": list(self.positions_km), "power_dbm": list(self.power_dbm),
                "slot_index": self.slot_index, "noise_sigma_db": self.noise_sigma_db, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["positions_km"]), tuple(d["power_dbm"]), d["slot_index"], d["noise_sigma_db"], d["seed"])


@dataclass(frozen=True)
class OsaSpectrum:
    power_dbm: tuple  # per slot, in the 12.5 GHz reference bandwidth
    capture_point: str
    noise_sigma_db: float

    def to_dict(self):
        return {"power_dbm": list(self.power_dbm), "capture_point": self.capture_point,
                "noise_sigma_db": self.noise_sigma_db}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["power_dbm"]), d["capture_point"], d["noise_sigma_db"])


@dataclass(frozen=True)
class AmpPowerReading:
    amp_id: str
    input_dbm: float
    output_dbm: float
    noise_sigma_db: float

    def to_dict(self):
        return {"amp_id": self.amp_id, "input_dbm": self.input_dbm, "output_dbm": self.output_dbm,
                "noise_sigma_db": self.noise_sigma_db}

    @classmethod
    def from_dict(cls, d):
        return cls(d["amp_id"], d["input_dbm"], d["output_dbm"], d["noise_sigma_db"])


@dataclass(frozen=True)
class VoaSweepRecord:
    port_id: str
    format: str
    attenuations_db: tuple
    ber: tuple
    saturated: tuple
    reference_gsnr_db: float
    rx_power_dbm: float
    seed: int

    def to_dict(self):
        return {"port_id": self.port_id, "format": self.format, "attenuations_db": list(self.attenuations_db),
                "ber": list(self.ber), "saturated": list(self.saturated),
                "reference_gsnr_db": self.reference_gsnr_db, "rx_power_dbm": self.rx_power_dbm, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(d["port_id"], d["format"], tuple(d["attenuations_db"]), tuple(d["ber"]), tuple(d["saturated"]),
                   d["reference_gsnr_db"], d["rx_power_dbm"], d["seed"])


def probe_plan(grid, slot: int) -> ChannelPlan:
    """Full dummy comb with a single-slot DLM probe carrier at ``slot``."""
    base = ChannelPlan.fully_loaded(grid)
    return base.replace([Channel(slot, DUMMY_BANDWIDTH_GHZ, PROBE, id="dlm-probe")])


def simulate_dlm_capture(line: LineSystem, config: qot.LineConfig, slot: int, plan: ChannelPlan = None,
                         sample_spacing_km=DEFAULT_SAMPLE_SPACING_KM, noise_sigma_db=DEFAULT_DLM_SIGMA_DB,
                         seed=0) -> PowerProfile:
    """Longitudinal power of the carrier at ``slot``, sampled from 0 to the line end."""
    if not sample_spacing_km > 0:
        raise TelemetryError("sample spacing must be positive")
    if plan is None:
        plan = probe_plan(line.grid, slot)
    channel = plan.channel_at(slot)
    if channel is None:
        raise TelemetryError(f"no channel provisioned at slot {slot}")
    tr = qot.walk(line, config, plan)
    ch_slots = list(channel.slots(line.grid))
    starts = line.span_starts_km()
    length = total_length(line)
    n = int(round(length / sample_spacing_km))
    x = np.linspace(0.0, length, n + 1)
    y = np.empty_like(x)
    span_idx = np.searchsorted(starts, x, side="right") - 1
    for k, span in enumerate(line.spans):
        mask = span_idx == k
        p0 = float(w_to_dbm(np.sum(tr.span_input_signal[k][ch_slots] * tr.bandwidth[ch_slots])))
        local = x[mask] - starts[k]
        prof = p0 - span.attenuation_db_per_km * local
        for ll in span.lumped_losses:
            prof = prof - np.where(local >= ll.position_km - 1e-9, ll.loss_db, 0.0)
        y[mask] = prof
    rng = np.random.default_rng(seed)
    y = y + clipped_normal(rng, noise_sigma_db, len(y))
    return PowerProfile(tuple(float(v) for v in x), tuple(float(v) for v in y), slot, float(noise_sigma_db), int(seed))


def simulate_osa_spectrum(line: LineSystem, config: qot.LineConfig, end: str, plan: ChannelPlan = None,
                          noise_sigma_db=0.1, seed=0) -> OsaSpectrum:
    """Per-slot power in 12.5 GHz read by the OSA at ``end``.

    The far endpoint sees the end of the line; the near endpoint sees the
    launched comb before the booster.
    """
    if end not in line.endpoints:
        raise TelemetryError(f"{end!r} is not an endpoint of {line.id}")
    if not line.has_instrument(end, "osa"):
        raise TelemetryError(f"no OSA installed at {end}")
    if plan is None:
        plan = ChannelPlan.fully_loaded(line.grid)
    tr = qot.walk(line, config, plan)
    row = -1 if end == line.endpoints[1] else 0
    psd = tr.ref_signal[row] + tr.ref_ase[row] + tr.ref_nli[row]
    with np.errstate(divide="ignore"):
        reading = w_to_dbm(psd * qot.REF_BANDWIDTH_HZ)
    rng = np.random.default_rng(seed)
    reading = reading + clipped_normal(rng, noise_sigma_db, len(reading))
    return OsaSpectrum(tuple(float(v) for v in reading), end, float(noise_sigma_db))


def read_amp_power_monitors(line: LineSystem, config: qot.LineConfig, plan: ChannelPlan = None,
                            noise_sigma_db=0.1, seed=0) -> list:
    if plan is None:
        plan = ChannelPlan.fully_loaded(line.grid)
    tr = qot.walk(line, config, plan, check_los=False)
    rng = np.random.default_rng(seed)
    noise = clipped_normal(rng, noise_sigma_db, (len(line.amps), 2))
    out = []
    for k, amp in enumerate(line.amps):
        out.append(AmpPowerReading(
            amp.id,
            float(w_to_dbm(tr.amp_input_total_w[k]) + noise[k, 0]),
            float(w_to_dbm(tr.amp_output_total_w[k]) + noise[k, 1]),
            float(noise_sigma_db),
        ))
    return out


def receiver_snr_db(snr_trx_db, received_power_dbm, knee_dbm=VOA_KNEE_DBM):
    """Transceiver SNR versus received power: flat above the knee, falling 1 dB/dB below."""
    p = np.asarray(received_power_dbm, dtype=float)
    return snr_trx_db + np.minimum(0.0, p - knee_dbm)


def voa_ber_model(fmt, attenuations_db, snr_trx_db, knee_dbm, reference_gsnr_db, rx_power_dbm=VOA_RX_POWER_DBM):
    """Noiseless BER of the VOA sweep model."""
    a = np.asarray(attenuations_db, dtype=float)
    trx = receiver_snr_db(snr_trx_db, rx_power_dbm - a, knee_dbm)
    inv = 10.0 ** (-np.asarray(reference_gsnr_db) / 10.0) + 10.0 ** (-trx / 10.0)
    ber = qot.ber_from_gsnr(fmt, lin_to_db(1.0 / inv))
    return np.clip(ber, BER_FLOOR, BER_CEILING)


def simulate_voa_sweep(port: TransceiverPort, attenuations_db, reference_gsnr_db: float, seed=0, fmt=None,
                       rx_power_dbm=VOA_RX_POWER_DBM, knee_dbm=VOA_KNEE_DBM,
                       counting_sigma=VOA_COUNTING_SIGMA) -> VoaSweepRecord:
    """BER versus VOA attenuation with log-normal counting noise.

    The reported BER is the running maximum along the sweep, so the record is
    non-decreasing in attenuation even where the true curve is flat.
    """
    a = np.asarray(attenuations_db, dtype=float)
    if a.size == 0:
        raise TelemetryError("empty attenuation list")
    if a.size > 1 and not np.all(np.diff(a) > 0):
        raise TelemetryError("attenuations must be strictly increasing")
    fmt_id = fmt or port.supported_formats[0]
    f = get_format(fmt_id)
    ber = voa_ber_model(f, a, port.snr_trx_true_db, knee_dbm, reference_gsnr_db, rx_power_dbm)
    rng = np.random.default_rng(seed)
    ber = ber * np.exp(clipped_normal(rng, counting_sigma, a.size))
    ber = np.maximum.accumulate(ber)
    saturated = ber >= BER_CEILING
    ber = np.clip(ber, BER_FLOOR, BER_CEILING)
    return VoaSweepRecord(
        port.id, fmt_id, tuple(float(v) for v in a), tuple(float(v) for v in ber),
        tuple(bool(s) for s in saturated), float(reference_gsnr_db), float(rx_power_dbm), int(seed),
    )
