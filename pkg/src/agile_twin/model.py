"""Domain types, unit conversions and spectrum-grid arithmetic.

Everything here is immutable once built.  Powers are carried in dBm and
frequencies in THz at the edges of the package; the physics modules convert
to watts and hertz through the helpers below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

H_PLANCK = 6.62607015e-34  # J*s

TRAFFIC, DUMMY, PROBE = "traffic", "dummy", "probe"
CHANNEL_ROLES = (TRAFFIC, DUMMY, PROBE)
DUMMY_BANDWIDTH_GHZ = 50.0

POWER_STATES = ("grid", "generator", "down")


class ModelError(ValueError):
    """Base class for scenario and domain-type violations."""


class SchemaError(ModelError):
    """A field is missing, unknown or has the wrong type."""


class DanglingReferenceError(ModelError):
    """A cross-reference points at an id that does not exist."""


class InvariantError(ModelError):
    """A domain invariant does not hold."""


def dbm_to_w(dbm):
    return 1e-3 * np.power(10.0, np.asarray(dbm, dtype=float) / 10.0)


def w_to_dbm(w):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.asarray(w, dtype=float) / 1e-3)


def db_to_lin(db):
    return np.power(10.0, np.asarray(db, dtype=float) / 10.0)


def lin_to_db(lin):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.asarray(lin, dtype=float))


@dataclass(frozen=True)
class SpectrumGrid:
    id: str
    anchor_freq_thz: float
    slot_spacing_ghz: float
    slot_count: int

    def __post_init__(self):
        if not self.slot_spacing_ghz > 0:
            raise InvariantError(f"grid {self.id}: slot spacing must be positive")
        if int(self.slot_count) != self.slot_count or self.slot_count < 1:
            raise InvariantError(f"grid {self.id}: slot_count must be a positive integer")

    @property
    def spacing_hz(self) -> float:
        return self.slot_spacing_ghz * 1e9

    @property
    def total_bandwidth_hz(self) -> float:
        return self.slot_count * self.spacing_hz

    def carriers_hz(self) -> np.ndarray:
        return self.anchor_freq_thz * 1e12 + np.arange(self.slot_count) * self.spacing_hz

    def normalized_frequency(self) -> np.ndarray:
        """Slot positions mapped linearly onto [-0.5, 0.5], zero-mean."""
        n = self.slot_count
        if n == 1:
            return np.zeros(1)
        return (np.arange(n) - (n - 1) / 2.0) / (n - 1)


def carrier_frequency(grid: SpectrumGrid, slot: int) -> float:
    """Center frequency of ``slot`` in THz."""
    if not 0 <= slot < grid.slot_count:
        raise IndexError(f"slot {slot} outside grid {grid.id} (0..{grid.slot_count - 1})")
    return grid.anchor_freq_thz + slot * grid.slot_spacing_ghz / 1000.0


@dataclass(frozen=True)
class ModulationFormat:
    id: str
    bits_per_symbol_per_pol: float
    ber_curve: str
    net_rate_gbps: float
    symbol_rate_gbd: float

    def __post_init__(self):
        if not self.net_rate_gbps > 0:
            raise InvariantError(f"format {self.id}: net rate must be positive")
        if self.ber_curve not in ("dp-qpsk", "dp-16qam"):
            raise InvariantError(f"format {self.id}: unknown BER curve {self.ber_curve!r}")


# 800G and 400G both use the 16QAM curve; they differ by symbol rate and net rate.
FORMATS = {
    "100G": ModulationFormat("100G", 2, "dp-qpsk", 100.0, 32.0),
    "400G": ModulationFormat("400G", 4, "dp-16qam", 400.0, 63.1),
    "800G": ModulationFormat("800G", 4, "dp-16qam", 800.0, 130.0),
}


def get_format(format_id: str) -> ModulationFormat:
    try:
        return FORMATS[format_id]
    except KeyError:
        raise ModelError(f"unknown modulation format {format_id!r}") from None


@dataclass(frozen=True)
class Channel:
    """One optical carrier.  A channel wider than one slot occupies
    ``width_slots`` adjacent slots starting at ``slot_index``."""

    slot_index: int
    symbol_rate_gbd: float
    role: str
    format: Optional[str] = None
    launch_power_dbm: float = 0.0
    id: Optional[str] = None

    def __post_init__(self):
        if not self.symbol_rate_gbd > 0:
            raise InvariantError("channel symbol rate must be positive")
        if self.role not in CHANNEL_ROLES:
            raise InvariantError(f"unknown channel role {self.role!r}")
        if self.role == DUMMY and self.format is not None:
            raise InvariantError("dummy channels carry no modulation format")

    def width_slots(self, grid: SpectrumGrid) -> int:
        return max(1, math.ceil(self.symbol_rate_gbd / grid.slot_spacing_ghz - 1e-9))

    def slots(self, grid: SpectrumGrid) -> range:
        return range(self.slot_index, self.slot_index + self.width_slots(grid))


@dataclass(frozen=True)
class ChannelPlan:
    grid: SpectrumGrid
    channels: tuple

    def __post_init__(self):
        taken = set()
        for ch in self.channels:
            span = ch.slots(self.grid)
            if span.start < 0 or span.stop > self.grid.slot_count:
                raise InvariantError(f"channel at slot {ch.slot_index} does not fit the grid")
            if ch.symbol_rate_gbd > self.grid.slot_spacing_ghz * len(span) + 1e-9:
                raise InvariantError("channel bandwidth exceeds its slots")
            overlap = taken.intersection(span)
            if overlap:
                raise InvariantError(f"slots {sorted(overlap)} occupied twice")
            taken.update(span)

    @classmethod
    def fully_loaded(cls, grid: SpectrumGrid, skip=(), launch_power_dbm=0.0):
        chans = tuple(
            Channel(i, DUMMY_BANDWIDTH_GHZ, DUMMY, launch_power_dbm=launch_power_dbm)
            for i in range(grid.slot_count)
            if i not in set(skip)
        )
        return cls(grid, chans)

    def channel_at(self, slot: int) -> Optional[Channel]:
        for ch in self.channels:
            if slot in ch.slots(self.grid):
                return ch
        return None

    def replace(self, new_channels) -> "ChannelPlan":
        """Drop dummies under ``new_channels`` and add them to the plan."""
        covered = set()
        for ch in new_channels:
            covered.update(ch.slots(self.grid))
        kept = [
            ch for ch in self.channels
            if not (ch.role == DUMMY and covered.intersection(ch.slots(self.grid)))
        ]
        merged = sorted(kept + list(new_channels), key=lambda c: c.slot_index)
        return ChannelPlan(self.grid, tuple(merged))

    def slot_arrays(self):
        """Per-slot (occupied, bandwidth_hz, psd_w_per_hz) arrays."""
        n = self.grid.slot_count
        occupied = np.zeros(n, dtype=bool)
        bandwidth = np.zeros(n)
        psd = np.zeros(n)
        for ch in self.channels:
            span = list(ch.slots(self.grid))
            bw = ch.symbol_rate_gbd * 1e9
            occupied[span] = True
            bandwidth[span] = bw / len(span)
            psd[span] = float(dbm_to_w(ch.launch_power_dbm)) / bw
        return occupied, bandwidth, psd


@dataclass(frozen=True)
class LumpedLoss:
    position_km: float
    loss_db: float


@dataclass(frozen=True)
class FiberSpan:
    id: str
    length_km: float
    attenuation_db_per_km: float = 0.20
    dispersion_ps2_per_km: float = 21.7
    gamma_per_w_per_km: float = 1.3
    lumped_losses: tuple = ()

    def __post_init__(self):
        if not self.length_km > 0:
            raise InvariantError(f"span {self.id}: length must be positive")
        if not self.attenuation_db_per_km > 0:
            raise InvariantError(f"span {self.id}: attenuation must be positive")
        for ll in self.lumped_losses:
            if not 0 <= ll.position_km <= self.length_km:
                raise InvariantError(f"span {self.id}: lumped loss at {ll.position_km} km is outside the span")
            if ll.loss_db < 0:
                raise InvariantError(f"span {self.id}: lumped loss must be non-negative")

    @property
    def loss_db(self) -> float:
        return self.length_km * self.attenuation_db_per_km + sum(l.loss_db for l in self.lumped_losses)


@dataclass(frozen=True)
class Edfa:
    id: str
    gain_db: float
    noise_figure_db: float
    gain_range_db: tuple = (0.0, 30.0)
    tilt_db: float = 0.0
    gain_ripple_db: tuple = ()
    max_total_output_dbm: float = 23.0
    tilt_range_db: tuple = (-2.0, 2.0)

    def __post_init__(self):
        lo, hi = self.gain_range_db
        if not lo <= self.gain_db <= hi:
            raise InvariantError(f"amp {self.id}: gain {self.gain_db} dB outside [{lo}, {hi}]")
        if self.noise_figure_db < 3.0:
            raise InvariantError(f"amp {self.id}: noise figure below 3 dB")
        if self.gain_ripple_db and abs(float(np.mean(self.gain_ripple_db))) > 1e-6:
            raise InvariantError(f"amp {self.id}: gain ripple must be zero-mean")

    def ripple(self, slot_count: int) -> np.ndarray:
        if not self.gain_ripple_db:
            return np.zeros(slot_count)
        return np.asarray(self.gain_ripple_db, dtype=float)


@dataclass(frozen=True)
class LineSystem:
    """Booster, spans alternating with in-line amplifiers, preamp."""

    id: str
    endpoints: tuple
    grid: SpectrumGrid
    booster: Edfa
    spans: tuple
    ilas: tuple
    preamp: Optional[Edfa] = None
    owner: Optional[str] = None
    endpoint_instruments: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if len(self.ilas) != max(len(self.spans) - 1, 0):
            raise InvariantError(
                f"line {self.id}: {len(self.spans)} spans need {max(len(self.spans) - 1, 0)} ILAs, got {len(self.ilas)}"
            )
        for amp in self.amps:
            if amp.gain_ripple_db and len(amp.gain_ripple_db) != self.grid.slot_count:
                raise InvariantError(f"amp {amp.id}: ripple must have one value per grid slot")

    @property
    def amps(self) -> tuple:
        amps = (self.booster,) + tuple(self.ilas)
        return amps + ((self.preamp,) if self.preamp is not None else ())

    def span_starts_km(self) -> np.ndarray:
        lengths = [s.length_km for s in self.spans]
        return np.concatenate([[0.0], np.cumsum(lengths)[:-1]]) if lengths else np.zeros(0)

    def has_instrument(self, node: str, name: str) -> bool:
        return bool(self.endpoint_instruments.get(node, {}).get(name, False))


def total_length(line: LineSystem) -> float:
    return float(sum(span.length_km for span in line.spans))


@dataclass(frozen=True)
class TransceiverPort:
    id: str
    owner_operator: str
    node: str
    line_system: str
    supported_formats: tuple
    snr_trx_true_db: float

    def __post_init__(self):
        if not math.isfinite(self.snr_trx_true_db):
            raise InvariantError(f"port {self.id}: transceiver SNR must be finite")


@dataclass(frozen=True)
class Dataset:
    id: str
    size_gb: float


@dataclass(frozen=True)
class DataCenter:
    id: str
    operator: str
    site: str
    power_state: str
    fuel_hours_remaining: float
    datasets: tuple = ()

    def __post_init__(self):
        if self.power_state not in POWER_STATES:
            raise InvariantError(f"data center {self.id}: unknown power state {self.power_state!r}")
        if self.fuel_hours_remaining < 0:
            raise InvariantError(f"data center {self.id}: negative fuel")
        if self.power_state == "generator" and not self.fuel_hours_remaining > 0:
            raise InvariantError(f"data center {self.id}: generator power with no fuel")

    def dataset(self, dataset_id: str) -> Dataset:
        for ds in self.datasets:
            if ds.id == dataset_id:
                return ds
        raise KeyError(dataset_id)


@dataclass(frozen=True)
class Operator:
    id: str
    token: str


@dataclass(frozen=True)
class Node:
    id: str
    site: str
    operator: str


@dataclass(frozen=True)
class Demand:
    id: str
    format: str

    @property
    def rate_gbps(self) -> float:
        return get_format(self.format).net_rate_gbps


@dataclass(frozen=True)
class Response:
    """Who helps whom: the recovery plan attached to a disaster."""

    tenant: str
    lessor: str
    line_system: str
    source_dc: str
    target_dc: str
    dataset: str
    demands: tuple
    leased_slots: tuple
    lease_hours: float = 24.0
    parameters: dict = field(default_factory=dict, compare=True, hash=False)


@dataclass(frozen=True)
class Disaster:
    affected_site: str
    outage_duration_hours: float
    fuel_hours: float
    fuel_override: bool
    response: Response


WORKFLOW_STEPS = (
    "trx_characterization",
    "dlm_measure",
    "dlm_analyze",
    "ols_measure",
    "ols_analyze",
    "dlm_validate",
    "trx_configure",
    "migrate",
)

DEFAULT_DURATIONS_MIN = {
    "trx_characterization": 30.0,
    "dlm_measure": 20.0,
    "dlm_analyze": 40.0,
    "ols_measure": 150.0,
    "ols_analyze": 60.0,
    "dlm_validate": 60.0,
    "trx_configure": 2.0,
    "migrate": 10.0,
}


@dataclass(frozen=True)
class Scenario:
    operators: tuple
    nodes: tuple
    line_systems: tuple
    grids: tuple
    transceivers: tuple
    data_centers: tuple
    disaster: Disaster
    workflow_durations: dict
    seed: int

    def operator(self, op_id: str) -> Operator:
        return _by_id(self.operators, op_id, "operator")

    def line(self, line_id: str) -> LineSystem:
        return _by_id(self.line_systems, line_id, "line system")

    def port(self, port_id: str) -> TransceiverPort:
        return _by_id(self.transceivers, port_id, "transceiver")

    def data_center(self, dc_id: str) -> DataCenter:
        return _by_id(self.data_centers, dc_id, "data center")

    def node(self, node_id: str) -> Node:
        return _by_id(self.nodes, node_id, "node")


def _by_id(items, item_id, kind):
    for item in items:
        if item.id == item_id:
            return item
    raise DanglingReferenceError(f"unknown {kind} {item_id!r}")
