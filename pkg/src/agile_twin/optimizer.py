"""Line configuration search and lightpath design.

The line optimizer works on a calibrated model (public line plus link and OLS
estimates).  Its variables are every amplifier's gain and tilt plus the
two-parameter launch profile (offset and linear tilt).  The objective is

    J = min(GSNR) - lam * (max(GSNR) - min(GSNR))

over the end-of-line spectrum of the full dummy comb.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import qot
from .model import DUMMY_BANDWIDTH_GHZ, TRAFFIC, Channel, ChannelPlan, LineSystem, ModelError, get_format

DEFAULT_FLATNESS_WEIGHT = 0.5
DEFAULT_MARGIN_DB = 1.0
CONVERGENCE_DB = 0.01
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class OptimizationError(ModelError):
    pass


class DesignError(ModelError):
    pass


@dataclass(frozen=True)
class Constraints:
    """Search box for the variables the amplifiers do not bound themselves."""

    launch_offset_range_dbm: tuple = (-15.0, 5.0)
    launch_tilt_range_db: tuple = (-3.0, 3.0)
    flatness_weight: float = DEFAULT_FLATNESS_WEIGHT
    max_sweeps: int = 30
    scan_points: int = 17
    line_search_tol_db: float = 1e-3

    def __post_init__(self):
        for name in ("launch_offset_range_dbm", "launch_tilt_range_db"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise OptimizationError(f"{name} is empty: [{lo}, {hi}]")
        if self.flatness_weight < 0:
            raise OptimizationError("flatness weight must be non-negative")
        if self.scan_points < 3:
            raise OptimizationError("need at least 3 scan points per coordinate")


@dataclass
class OptimizationResult:
    config: qot.LineConfig
    spectrum: qot.GsnrSpectrum
    objective_db: float
    iterations: int
    flatness_db: float
    min_gsnr_db: float
    history: list = field(default_factory=list)  # objective after each sweep
    evaluations: int = 0

    def to_dict(self):
        return {
            "config": self.config.to_dict(),
            "spectrum": self.spectrum.to_dict(),
            "objective_db": self.objective_db,
            "iterations": self.iterations,
            "flatness_db": self.flatness_db,
            "min_gsnr_db": self.min_gsnr_db,
            "history": list(self.history),
            "evaluations": self.evaluations,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(qot.LineConfig.from_dict(d["config"]), qot.GsnrSpectrum.from_dict(d["spectrum"]),
                   d["objective_db"], d["iterations"], d["flatness_db"], d["min_gsnr_db"],
                   list(d.get("history", [])), d.get("evaluations", 0))


def objective(gsnr_db, flatness_weight=DEFAULT_FLATNESS_WEIGHT) -> float:
    g = np.asarray(gsnr_db, dtype=float)
    g = g[np.isfinite(g)]
    if g.size == 0:
        raise OptimizationError("no occupied slot to evaluate")
    lo, hi = float(g.min()), float(g.max())
    return lo - flatness_weight * (hi - lo)


class _Evaluator:
    """Objective with feasibility, memoized on the exact parameter vector."""

    def __init__(self, line: LineSystem, plan: ChannelPlan, weight: float):
        self.line = line
        self.plan = plan
        self.weight = weight
        self.cache = {}
        self.k = len(line.amps)

    def config(self, x) -> qot.LineConfig:
        return qot.LineConfig.from_params(x, self.k)

    def __call__(self, x) -> float:
        key = tuple(float(v) for v in x)
        if key not in self.cache:
            self.cache[key] = self._eval(key)
        return self.cache[key]

    def _eval(self, x) -> float:
        cfg = self.config(x)
        tr = qot.walk(self.line, cfg, self.plan, check_los=False)
        if np.any(tr.amp_input_min_dbm < qot.LOS_THRESHOLD_DBM):
            return -math.inf
        for amp, p in zip(self.line.amps, tr.amp_output_total_w):
            if 10.0 * math.log10(p / 1e-3) > amp.max_total_output_dbm + 1e-9:
                return -math.inf
        s, a, n = tr.ref_signal[-1], tr.ref_ase[-1], tr.ref_nli[-1]
        occ = tr.occupied
        g = 10.0 * np.log10(s[occ] / (a[occ] + n[occ]))
        return objective(g, self.weight)


def _bounds(line: LineSystem, constraints: Constraints):
    lo = [a.gain_range_db[0] for a in line.amps] + [a.tilt_range_db[0] for a in line.amps]
    hi = [a.gain_range_db[1] for a in line.amps] + [a.tilt_range_db[1] for a in line.amps]
    lo += [constraints.launch_offset_range_dbm[0], constraints.launch_tilt_range_db[0]]
    hi += [constraints.launch_offset_range_dbm[1], constraints.launch_tilt_range_db[1]]
    return np.array(lo), np.array(hi)


def _better(ja, xa, jb, xb, k_amps) -> bool:
    """True if point a beats point b: higher J, then smaller total gain, then lexicographic."""
    if ja > jb + 1e-12:
        return True
    if ja < jb - 1e-12:
        return False
    ga, gb = sum(xa[:k_amps]), sum(xb[:k_amps])
    if ga != gb:
        return ga < gb
    return tuple(xa) < tuple(xb)


def _golden(f, a, b, tol):
    """Golden-section maximization of f on [a, b]; returns (x, f(x))."""
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def _line_search(ev, x, i, lo, hi, constraints, k_amps):
    """Best value of coordinate ``i``: coarse scan, then golden section around the best scan point."""
    xs = np.linspace(lo, hi, constraints.scan_points)

    def f(v):
        y = x.copy()
        y[i] = v
        return ev(y)

    vals = [f(v) for v in xs]
    j = int(np.argmax(vals))
    if not np.isfinite(vals[j]):
        return x[i], ev(x)
    a = xs[max(j - 1, 0)]
    b = xs[min(j + 1, len(xs) - 1)]
    # shrink onto the feasible part of the bracket
    if not np.isfinite(f(a)):
        a = _feasible_edge(f, xs[j], a)
    if not np.isfinite(f(b)):
        b = _feasible_edge(f, xs[j], b)
    v, fv = _golden(f, a, b, constraints.line_search_tol_db)
    if fv < vals[j]:
        v, fv = xs[j], vals[j]
    return float(v), float(fv)


def _feasible_edge(f, inside, outside, iterations=30):
    """Bisect between a feasible and an infeasible value of one coordinate."""
    for _ in range(iterations):
        mid = 0.5 * (inside + outside)
        if np.isfinite(f(mid)):
            inside = mid
        else:
            outside = mid
    return inside


def optimize_line(line: LineSystem, start: qot.LineConfig = None, constraints: Constraints = None,
                  plan: ChannelPlan = None) -> OptimizationResult:
    """Coordinate descent with golden-section line search over gains, tilts and launch.

    ``line`` is the calibrated model.  A sweep visits every coordinate in
    order (gains, tilts, launch offset, launch tilt) and keeps a move only if
    it improves J, so the recorded objective never decreases.  Stops when a
    sweep gains less than 0.01 dB.
    """
    constraints = constraints or Constraints()
    plan = plan or ChannelPlan.fully_loaded(line.grid)
    k_amps = len(line.amps)
    lo, hi = _bounds(line, constraints)
    if start is None:
        start = qot.LineConfig.from_line(line, float(np.clip(0.0, lo[-2], hi[-2])))
    ev = _Evaluator(line, plan, constraints.flatness_weight)
    x = np.clip(np.asarray(start.params(), dtype=float), lo, hi)
    j_cur = ev(x)
    if not np.isfinite(j_cur):
        x, j_cur = _find_feasible(ev, x, lo, hi, k_amps)
    history = [j_cur]
    sweeps = 0
    for sweeps in range(1, constraints.max_sweeps + 1):
        j_start, x_start = j_cur, x.copy()
        for i in range(len(x)):
            if hi[i] - lo[i] <= 0:
                continue
            v, fv = _line_search(ev, x, i, lo[i], hi[i], constraints, k_amps)
            y = x.copy()
            y[i] = v
            if _better(fv, y, j_cur, x, k_amps):
                x, j_cur = y, fv
        if sweeps > 1:
            x, j_cur = _pattern_move(ev, x_start, x, j_cur, lo, hi, constraints, k_amps)
        history.append(j_cur)
        if j_cur - j_start < CONVERGENCE_DB:
            break
    cfg = ev.config(x)
    violations = qot.config_violations(line, cfg, plan)
    if violations:
        raise OptimizationError("optimizer produced an invalid config: " + "; ".join(violations))
    spectrum = qot.propagate_gsnr(line, cfg, plan)[-1]
    g = qot.end_gsnr_array(line, cfg, plan)
    g = g[np.isfinite(g)]
    return OptimizationResult(
        config=cfg,
        spectrum=spectrum,
        objective_db=float(j_cur),
        iterations=sweeps,
        flatness_db=float(g.max() - g.min()),
        min_gsnr_db=float(g.min()),
        history=[float(h) for h in history],
        evaluations=len(ev.cache),
    )


def _pattern_move(ev, x_old, x_new, j_new, lo, hi, constraints, k_amps):
    """Line search along the displacement of the last sweep, inside the box."""
    d = x_new - x_old
    if not np.any(d):
        return x_new, j_new
    with np.errstate(divide="ignore", invalid="ignore"):
        room = np.where(d > 0, (hi - x_new) / d, np.where(d < 0, (lo - x_new) / d, np.inf))
    t_max = float(min(np.min(room), 4.0))
    if t_max <= 1e-9:
        return x_new, j_new

    def f(t):
        return ev(np.clip(x_new + t * d, lo, hi))

    ts = np.linspace(0.0, t_max, constraints.scan_points)
    vals = [f(t) for t in ts]
    j = int(np.argmax(vals))
    a, b = ts[max(j - 1, 0)], ts[min(j + 1, len(ts) - 1)]
    t, ft = _golden(f, a, b, 1e-4)
    if ft < vals[j]:
        t, ft = ts[j], vals[j]
    y = np.clip(x_new + t * d, lo, hi)
    if _better(ft, y, j_new, x_new, k_amps):
        return y, ft
    return x_new, j_new


def _find_feasible(ev, x, lo, hi, k_amps):
    """Lower the launch offset, then pull gains toward the bottom of their range."""
    y = x.copy()
    for v in np.linspace(y[-2], lo[-2], 41):
        y[-2] = v
        j = ev(y)
        if np.isfinite(j):
            return y, j
    for frac in np.linspace(0.0, 1.0, 21):
        z = y.copy()
        z[:k_amps] = x[:k_amps] + frac * (lo[:k_amps] - x[:k_amps])
        j = ev(z)
        if np.isfinite(j):
            return z, j
    raise OptimizationError("no feasible configuration: gain ranges and output limits cannot be met")


# --- lightpath design ------------------------------------------------------------


@dataclass(frozen=True)
class LightpathDesign:
    demand_id: str
    port_pair: tuple
    slot_index: int
    width_slots: int
    format: str
    launch_power_dbm: float
    predicted_gsnr_db: float
    required_gsnr_db: float
    margin_db: float

    def __post_init__(self):
        if self.predicted_gsnr_db < self.required_gsnr_db + self.margin_db - 1e-9:
            raise DesignError(f"{self.demand_id}: predicted GSNR below required plus margin")

    @property
    def slots(self):
        return tuple(range(self.slot_index, self.slot_index + self.width_slots))

    @property
    def port_id(self):
        return self.port_pair[1].split(":", 1)[1]

    def to_dict(self):
        return {
            "demand_id": self.demand_id, "port_pair": list(self.port_pair), "slot_index": self.slot_index,
            "width_slots": self.width_slots, "format": self.format, "launch_power_dbm": self.launch_power_dbm,
            "predicted_gsnr_db": self.predicted_gsnr_db, "required_gsnr_db": self.required_gsnr_db,
            "margin_db": self.margin_db,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["demand_id"], tuple(d["port_pair"]), d["slot_index"], d["width_slots"], d["format"],
                   d["launch_power_dbm"], d["predicted_gsnr_db"], d["required_gsnr_db"], d["margin_db"])


def design_lightpaths(demands, gsnr: qot.GsnrSpectrum, ports, trx_estimates: dict, line: LineSystem,
                      config: qot.LineConfig, margin_db=DEFAULT_MARGIN_DB, fec_limit=qot.DEFAULT_FEC_LIMIT,
                      available_slots=None) -> list:
    """Assign each demand a port and the lowest free block of slots that closes with margin.

    Demands are handled by descending rate, then id.  Each takes the first
    unused port (by id) supporting its format, and the lowest-index block of
    contiguous available slots whose GSNR, combined with the port's estimated
    transceiver SNR, reaches the required GSNR plus ``margin_db``.
    """
    grid = line.grid
    by_slot = gsnr.by_slot()
    free = set(range(grid.slot_count) if available_slots is None else available_slots)
    free &= set(by_slot)
    used_ports = set()
    profile = config.launch_profile(grid)
    ordered = sorted(demands, key=lambda d: (-d.rate_gbps, d.id))
    designs = []
    for demand in ordered:
        fmt = get_format(demand.format)
        width = Channel(0, fmt.symbol_rate_gbd, TRAFFIC).width_slots(grid)
        candidates = sorted((p for p in ports if demand.format in p.supported_formats and p.id not in used_ports),
                            key=lambda p: p.id)
        if not candidates:
            raise DesignError(f"{demand.id}: no free transceiver port supports {demand.format}")
        port = candidates[0]
        if port.id not in trx_estimates:
            raise DesignError(f"{demand.id}: no transceiver estimate for port {port.id}")
        snr_trx = trx_estimates[port.id]
        required = qot.required_gsnr(fmt, fec_limit)
        best_short = -math.inf
        chosen = None
        for start in range(grid.slot_count - width + 1):
            block = range(start, start + width)
            if not all(s in free for s in block):
                continue
            combined = qot.combine_with_transceiver(qot.block_gsnr(by_slot, block), snr_trx)
            slack = combined - required - margin_db
            best_short = max(best_short, slack)
            if slack >= -1e-12:
                chosen = (start, combined)
                break
        if chosen is None:
            if best_short == -math.inf:
                raise DesignError(f"{demand.id}: no block of {width} free slot(s) left")
            raise DesignError(f"{demand.id}: infeasible, best block falls {-best_short:.2f} dB short "
                              f"of required {required:.2f} dB + {margin_db:.2f} dB margin")
        start, combined = chosen
        launch_ref = float(np.mean(profile[start:start + width]))
        launch = launch_ref + 10.0 * math.log10(fmt.symbol_rate_gbd / DUMMY_BANDWIDTH_GHZ)
        designs.append(LightpathDesign(
            demand_id=demand.id,
            port_pair=(f"{line.endpoints[0]}:{port.id}", f"{line.endpoints[1]}:{port.id}"),
            slot_index=start,
            width_slots=width,
            format=demand.format,
            launch_power_dbm=float(launch),
            predicted_gsnr_db=float(combined),
            required_gsnr_db=float(required),
            margin_db=float(margin_db),
        ))
        free -= set(range(start, start + width))
        used_ports.add(port.id)
    return designs


def designed_plan(line: LineSystem, designs, base: ChannelPlan = None) -> ChannelPlan:
    """Dummy comb with the designed carriers in place of the dummies they cover."""
    base = base or ChannelPlan.fully_loaded(line.grid)
    chans = [Channel(d.slot_index, get_format(d.format).symbol_rate_gbd, TRAFFIC, format=d.format,
                     id=d.demand_id) for d in designs]
    return base.replace(chans)


__all__ = [
    "Constraints",
    "DesignError",
    "LightpathDesign",
    "OptimizationError",
    "OptimizationResult",
    "design_lightpaths",
    "designed_plan",
    "objective",
    "optimize_line",
]
