"""Scenario file reading, validation and serialization (UTF-8 JSON)."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from .model import (
    DEFAULT_DURATIONS_MIN,
    WORKFLOW_STEPS,
    DataCenter,
    Dataset,
    Demand,
    Disaster,
    Edfa,
    FiberSpan,
    InvariantError,
    LineSystem,
    LumpedLoss,
    ModelError,
    Node,
    Operator,
    DanglingReferenceError,
    Response,
    Scenario,
    SchemaError,
    SpectrumGrid,
    TransceiverPort,
    get_format,
)

TOP_LEVEL_KEYS = (
    "operators", "nodes", "line_systems", "grids", "transceivers",
    "data_centers", "disaster", "workflow_durations", "seed",
)

FUEL_HOURS_BOUNDS = (8.0, 24.0)

_NUMBER = (int, float)


def _obj(doc, where, required, optional=()):
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: expected an object")
    unknown = set(doc) - set(required) - set(optional)
    if unknown:
        raise SchemaError(f"{where}: unknown keys {sorted(unknown)}")
    missing = [k for k in required if k not in doc]
    if missing:
        raise SchemaError(f"{where}: missing keys {missing}")
    return doc


def _get(doc, key, kind, where, default=None):
    if key not in doc:
        return default
    value = doc[key]
    if kind is float:
        ok = isinstance(value, _NUMBER) and not isinstance(value, bool)
        if ok:
            value = float(value)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is bool:
        ok = isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise SchemaError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    return value


def _list(doc, key, where):
    value = _get(doc, key, list, where)
    if value is None:
        raise SchemaError(f"{where}: missing list {key!r}")
    return value


def _num_list(values, where):
    if not isinstance(values, list) or not all(isinstance(v, _NUMBER) and not isinstance(v, bool) for v in values):
        raise SchemaError(f"{where}: expected a list of numbers")
    return tuple(float(v) for v in values)


def _parse_grid(doc, where):
    _obj(doc, where, ("id", "anchor_freq_thz", "slot_spacing_ghz", "slot_count"))
    return SpectrumGrid(
        _get(doc, "id", str, where),
        _get(doc, "anchor_freq_thz", float, where),
        _get(doc, "slot_spacing_ghz", float, where),
        _get(doc, "slot_count", int, where),
    )


def _parse_amp(doc, where):
    _obj(
        doc, where,
        ("id", "gain_db", "noise_figure_db", "gain_range_db"),
        ("type", "tilt_db", "gain_ripple_db", "max_total_output_dbm", "tilt_range_db"),
    )
    kwargs = {}
    if "tilt_range_db" in doc:
        kwargs["tilt_range_db"] = _num_list(doc["tilt_range_db"], where + ".tilt_range_db")
    if "max_total_output_dbm" in doc:
        kwargs["max_total_output_dbm"] = _get(doc, "max_total_output_dbm", float, where)
    gain_range = _num_list(doc["gain_range_db"], where + ".gain_range_db")
    if len(gain_range) != 2 or gain_range[0] > gain_range[1]:
        raise SchemaError(f"{where}.gain_range_db: expected [min, max]")
    return Edfa(
        id=_get(doc, "id", str, where),
        gain_db=_get(doc, "gain_db", float, where),
        noise_figure_db=_get(doc, "noise_figure_db", float, where),
        gain_range_db=gain_range,
        tilt_db=_get(doc, "tilt_db", float, where, 0.0),
        gain_ripple_db=_num_list(doc.get("gain_ripple_db", []), where + ".gain_ripple_db"),
        **kwargs,
    )


def _parse_span(doc, where):
    _obj(
        doc, where, ("id", "length_km"),
        ("type", "attenuation_db_per_km", "dispersion_ps2_per_km", "gamma_per_w_per_km", "lumped_losses"),
    )
    losses = []
    for i, ll in enumerate(doc.get("lumped_losses", [])):
        w = f"{where}.lumped_losses[{i}]"
        _obj(ll, w, ("position_km", "loss_db"))
        losses.append(LumpedLoss(_get(ll, "position_km", float, w), _get(ll, "loss_db", float, w)))
    return FiberSpan(
        id=_get(doc, "id", str, where),
        length_km=_get(doc, "length_km", float, where),
        attenuation_db_per_km=_get(doc, "attenuation_db_per_km", float, where, 0.20),
        dispersion_ps2_per_km=_get(doc, "dispersion_ps2_per_km", float, where, 21.7),
        gamma_per_w_per_km=_get(doc, "gamma_per_w_per_km", float, where, 1.3),
        lumped_losses=tuple(sorted(losses, key=lambda l: l.position_km)),
    )


def _parse_line(doc, where, grids, node_ids, operator_ids):
    _obj(doc, where, ("id", "endpoints", "grid", "owner", "elements"), ("endpoint_instruments",))
    endpoints = doc["endpoints"]
    if not (isinstance(endpoints, list) and len(endpoints) == 2 and all(isinstance(e, str) for e in endpoints)):
        raise SchemaError(f"{where}.endpoints: expected two node ids")
    for node in endpoints:
        if node not in node_ids:
            raise DanglingReferenceError(f"{where}: unknown endpoint node {node!r}")
    grid_id = _get(doc, "grid", str, where)
    if grid_id not in grids:
        raise DanglingReferenceError(f"{where}: unknown grid {grid_id!r}")
    owner = _get(doc, "owner", str, where)
    if owner not in operator_ids:
        raise DanglingReferenceError(f"{where}: unknown owner {owner!r}")

    elements = _list(doc, "elements", where)
    kinds = []
    for i, el in enumerate(elements):
        if not isinstance(el, dict) or el.get("type") not in ("amp", "span"):
            raise SchemaError(f"{where}.elements[{i}]: element needs type 'amp' or 'span'")
        kinds.append(el["type"])
    n_spans = kinds.count("span")
    n_amps = kinds.count("amp")
    if n_spans < 1:
        raise InvariantError(f"{where}: a line needs at least one span")
    if n_amps != n_spans + 1:
        raise InvariantError(
            f"{where}: ILA count = span count - 1 violated ({n_spans} spans, {max(n_amps - 2, 0)} ILAs)"
        )
    expected = ["amp"] + ["span", "amp"] * n_spans
    if kinds != expected:
        raise InvariantError(f"{where}: elements must alternate booster, span, amp, ..., span, preamp")
    amps = [_parse_amp(el, f"{where}.elements[{i}]") for i, el in enumerate(elements) if el["type"] == "amp"]
    spans = [_parse_span(el, f"{where}.elements[{i}]") for i, el in enumerate(elements) if el["type"] == "span"]

    instruments = {}
    for node, flags in (doc.get("endpoint_instruments") or {}).items():
        w = f"{where}.endpoint_instruments.{node}"
        if node not in endpoints:
            raise DanglingReferenceError(f"{w}: not an endpoint of this line")
        _obj(flags, w, (), ("osa", "ase_source"))
        instruments[node] = {
            "osa": _get(flags, "osa", bool, w, False),
            "ase_source": _get(flags, "ase_source", bool, w, False),
        }

    return LineSystem(
        id=_get(doc, "id", str, where),
        endpoints=tuple(endpoints),
        grid=grids[grid_id],
        booster=amps[0],
        spans=tuple(spans),
        ilas=tuple(amps[1:-1]),
        preamp=amps[-1],
        owner=owner,
        endpoint_instruments=instruments,
    )


def _parse_response(doc, where, scenario_ids):
    _obj(
        doc, where,
        ("tenant", "lessor", "line_system", "source_dc", "target_dc", "dataset", "demands", "leased_slots"),
        ("lease_hours", "parameters"),
    )
    demands = []
    for i, d in enumerate(_list(doc, "demands", where)):
        w = f"{where}.demands[{i}]"
        _obj(d, w, ("id", "format"))
        fmt = _get(d, "format", str, w)
        try:
            get_format(fmt)
        except ModelError as exc:
            raise DanglingReferenceError(f"{w}: {exc}") from None
        demands.append(Demand(_get(d, "id", str, w), fmt))
    slots = doc["leased_slots"]
    if not isinstance(slots, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in slots):
        raise SchemaError(f"{where}.leased_slots: expected a list of integers")
    params = doc.get("parameters", {})
    if not isinstance(params, dict):
        raise SchemaError(f"{where}.parameters: expected an object")
    resp = Response(
        tenant=_get(doc, "tenant", str, where),
        lessor=_get(doc, "lessor", str, where),
        line_system=_get(doc, "line_system", str, where),
        source_dc=_get(doc, "source_dc", str, where),
        target_dc=_get(doc, "target_dc", str, where),
        dataset=_get(doc, "dataset", str, where),
        demands=tuple(demands),
        leased_slots=tuple(slots),
        lease_hours=_get(doc, "lease_hours", float, where, 24.0),
        parameters=dict(params),
    )
    for attr, kind in (("tenant", "operators"), ("lessor", "operators"), ("line_system", "line_systems"),
                       ("source_dc", "data_centers"), ("target_dc", "data_centers")):
        if getattr(resp, attr) not in scenario_ids[kind]:
            raise DanglingReferenceError(f"{where}.{attr}: unknown id {getattr(resp, attr)!r}")
    return resp


def parse_scenario(doc: dict) -> Scenario:
    """Build a cross-linked :class:`Scenario` from a decoded JSON document."""
    _obj(doc, "scenario", TOP_LEVEL_KEYS)

    operators = []
    for i, o in enumerate(_list(doc, "operators", "scenario")):
        w = f"operators[{i}]"
        _obj(o, w, ("id", "token"))
        operators.append(Operator(_get(o, "id", str, w), _get(o, "token", str, w)))
    operator_ids = {o.id for o in operators}
    _unique([o.id for o in operators], "operator")
    _unique([o.token for o in operators], "operator token")

    nodes = []
    for i, n in enumerate(_list(doc, "nodes", "scenario")):
        w = f"nodes[{i}]"
        _obj(n, w, ("id", "site", "operator"))
        node = Node(_get(n, "id", str, w), _get(n, "site", str, w), _get(n, "operator", str, w))
        if node.operator not in operator_ids:
            raise DanglingReferenceError(f"{w}: unknown operator {node.operator!r}")
        nodes.append(node)
    node_ids = {n.id for n in nodes}
    _unique([n.id for n in nodes], "node")

    grids = {}
    for i, g in enumerate(_list(doc, "grids", "scenario")):
        grid = _parse_grid(g, f"grids[{i}]")
        grids[grid.id] = grid

    lines = [
        _parse_line(l, f"line_systems[{i}]", grids, node_ids, operator_ids)
        for i, l in enumerate(_list(doc, "line_systems", "scenario"))
    ]
    line_ids = {l.id for l in lines}
    _unique([l.id for l in lines], "line system")

    ports = []
    for i, t in enumerate(_list(doc, "transceivers", "scenario")):
        w = f"transceivers[{i}]"
        _obj(t, w, ("id", "owner_operator", "node", "line_system", "supported_formats", "snr_trx_true_db"))
        fmts = t["supported_formats"]
        if not isinstance(fmts, list) or not fmts or not all(isinstance(f, str) for f in fmts):
            raise SchemaError(f"{w}.supported_formats: expected a non-empty list of format ids")
        for f in fmts:
            try:
                get_format(f)
            except ModelError as exc:
                raise DanglingReferenceError(f"{w}: {exc}") from None
        port = TransceiverPort(
            _get(t, "id", str, w), _get(t, "owner_operator", str, w), _get(t, "node", str, w),
            _get(t, "line_system", str, w), tuple(fmts), _get(t, "snr_trx_true_db", float, w),
        )
        if port.owner_operator not in operator_ids:
            raise DanglingReferenceError(f"{w}: unknown operator {port.owner_operator!r}")
        if port.node not in node_ids:
            raise DanglingReferenceError(f"{w}: unknown node {port.node!r}")
        if port.line_system not in line_ids:
            raise DanglingReferenceError(f"{w}: unknown line system {port.line_system!r}")
        ports.append(port)
    _unique([p.id for p in ports], "transceiver")

    disaster_doc = _obj(doc["disaster"], "disaster",
                        ("affected_site", "outage_duration_hours", "fuel_hours", "response"),
                        ("fuel_override",))
    fuel_hours = _get(disaster_doc, "fuel_hours", float, "disaster")
    fuel_override = _get(disaster_doc, "fuel_override", bool, "disaster", False)
    if fuel_hours <= 0:
        raise InvariantError("disaster.fuel_hours must be positive")
    lo, hi = FUEL_HOURS_BOUNDS
    if not fuel_override and not lo <= fuel_hours <= hi:
        raise InvariantError(f"disaster.fuel_hours {fuel_hours} outside [{lo}, {hi}] h without fuel_override")
    affected_site = _get(disaster_doc, "affected_site", str, "disaster")

    dcs = []
    for i, d in enumerate(_list(doc, "data_centers", "scenario")):
        w = f"data_centers[{i}]"
        _obj(d, w, ("id", "operator", "site", "power_state"), ("datasets",))
        datasets = []
        for j, ds in enumerate(d.get("datasets", [])):
            wj = f"{w}.datasets[{j}]"
            _obj(ds, wj, ("id", "size_gb"))
            datasets.append(Dataset(_get(ds, "id", str, wj), _get(ds, "size_gb", float, wj)))
        state = _get(d, "power_state", str, w)
        site = _get(d, "site", str, w)
        # the generator's fuel is the disaster's fuel budget
        fuel = fuel_hours if state == "generator" else 0.0
        dc = DataCenter(_get(d, "id", str, w), _get(d, "operator", str, w), site, state, fuel, tuple(datasets))
        if dc.operator not in operator_ids:
            raise DanglingReferenceError(f"{w}: unknown operator {dc.operator!r}")
        dcs.append(dc)
    _unique([d.id for d in dcs], "data center")
    if affected_site not in {n.site for n in nodes} | {d.site for d in dcs}:
        raise DanglingReferenceError(f"disaster.affected_site: unknown site {affected_site!r}")

    ids = {
        "operators": operator_ids,
        "line_systems": line_ids,
        "data_centers": {d.id for d in dcs},
    }
    response = _parse_response(disaster_doc["response"], "disaster.response", ids)
    line = next(l for l in lines if l.id == response.line_system)
    for s in response.leased_slots:
        if not 0 <= s < line.grid.slot_count:
            raise InvariantError(f"disaster.response.leased_slots: slot {s} outside grid {line.grid.id}")
    source = next(d for d in dcs if d.id == response.source_dc)
    try:
        source.dataset(response.dataset)
    except KeyError:
        raise DanglingReferenceError(f"disaster.response.dataset: {response.dataset!r} not at {source.id}") from None

    disaster = Disaster(
        affected_site,
        _get(disaster_doc, "outage_duration_hours", float, "disaster"),
        fuel_hours,
        fuel_override,
        response,
    )

    durations_doc = _obj(doc["workflow_durations"], "workflow_durations", (), WORKFLOW_STEPS)
    durations = dict(DEFAULT_DURATIONS_MIN)
    for step in WORKFLOW_STEPS:
        value = _get(durations_doc, step, float, "workflow_durations")
        if value is not None:
            if value < 0:
                raise InvariantError(f"workflow_durations.{step} must be non-negative")
            durations[step] = value

    seed = _get(doc, "seed", int, "scenario")
    if seed < 0:
        raise InvariantError("seed must be non-negative")

    return Scenario(
        operators=tuple(operators),
        nodes=tuple(nodes),
        line_systems=tuple(lines),
        grids=tuple(grids.values()),
        transceivers=tuple(ports),
        data_centers=tuple(dcs),
        disaster=disaster,
        workflow_durations=durations,
        seed=seed,
    )


def _unique(ids, kind):
    seen = set()
    for i in ids:
        if i in seen:
            raise InvariantError(f"duplicate {kind} {i!r}")
        seen.add(i)


def validate_scenario(document: str) -> Scenario:
    """Parse scenario JSON text and check every invariant."""
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"scenario is not valid JSON: {exc}") from None
    return parse_scenario(doc)


def load_scenario(path) -> Scenario:
    return validate_scenario(Path(path).read_text(encoding="utf-8"))


def default_scenario_text() -> str:
    return resources.files("agile_twin.data").joinpath("field_trial.json").read_text(encoding="utf-8")


def default_scenario() -> Scenario:
    return validate_scenario(default_scenario_text())


def _amp_dict(amp: Edfa) -> dict:
    d = {
        "type": "amp",
        "id": amp.id,
        "gain_db": amp.gain_db,
        "tilt_db": amp.tilt_db,
        "noise_figure_db": amp.noise_figure_db,
        "gain_range_db": list(amp.gain_range_db),
        "tilt_range_db": list(amp.tilt_range_db),
        "max_total_output_dbm": amp.max_total_output_dbm,
    }
    if amp.gain_ripple_db:
        d["gain_ripple_db"] = list(amp.gain_ripple_db)
    return d


def _span_dict(span: FiberSpan) -> dict:
    return {
        "type": "span",
        "id": span.id,
        "length_km": span.length_km,
        "attenuation_db_per_km": span.attenuation_db_per_km,
        "dispersion_ps2_per_km": span.dispersion_ps2_per_km,
        "gamma_per_w_per_km": span.gamma_per_w_per_km,
        "lumped_losses": [{"position_km": l.position_km, "loss_db": l.loss_db} for l in span.lumped_losses],
    }


def scenario_to_dict(sc: Scenario) -> dict:
    lines = []
    for line in sc.line_systems:
        elements = [_amp_dict(line.booster)]
        for span, amp in zip(line.spans, line.ilas + (line.preamp,)):
            elements += [_span_dict(span), _amp_dict(amp)]
        lines.append({
            "id": line.id,
            "endpoints": list(line.endpoints),
            "grid": line.grid.id,
            "owner": line.owner,
            "elements": elements,
            "endpoint_instruments": {k: dict(v) for k, v in line.endpoint_instruments.items()},
        })
    r = sc.disaster.response
    return {
        "operators": [{"id": o.id, "token": o.token} for o in sc.operators],
        "nodes": [{"id": n.id, "site": n.site, "operator": n.operator} for n in sc.nodes],
        "grids": [
            {"id": g.id, "anchor_freq_thz": g.anchor_freq_thz, "slot_spacing_ghz": g.slot_spacing_ghz,
             "slot_count": g.slot_count}
            for g in sc.grids
        ],
        "line_systems": lines,
        "transceivers": [
            {"id": p.id, "owner_operator": p.owner_operator, "node": p.node, "line_system": p.line_system,
             "supported_formats": list(p.supported_formats), "snr_trx_true_db": p.snr_trx_true_db}
            for p in sc.transceivers
        ],
        "data_centers": [
            {"id": d.id, "operator": d.operator, "site": d.site, "power_state": d.power_state,
             "datasets": [{"id": ds.id, "size_gb": ds.size_gb} for ds in d.datasets]}
            for d in sc.data_centers
        ],
        "disaster": {
            "affected_site": sc.disaster.affected_site,
            "outage_duration_hours": sc.disaster.outage_duration_hours,
            "fuel_hours": sc.disaster.fuel_hours,
            "fuel_override": sc.disaster.fuel_override,
            "response": {
                "tenant": r.tenant, "lessor": r.lessor, "line_system": r.line_system,
                "source_dc": r.source_dc, "target_dc": r.target_dc, "dataset": r.dataset,
                "demands": [{"id": d.id, "format": d.format} for d in r.demands],
                "leased_slots": list(r.leased_slots),
                "lease_hours": r.lease_hours,
                "parameters": dict(r.parameters),
            },
        },
        "workflow_durations": dict(sc.workflow_durations),
        "seed": sc.seed,
    }


def serialize_scenario(sc: Scenario) -> str:
    return json.dumps(scenario_to_dict(sc), indent=2, sort_keys=True)


def with_overrides(sc: Scenario, *, seed=None, fuel_hours=None) -> Scenario:
    """Re-validate ``sc`` with a different seed and/or fuel budget.

    An explicit fuel budget outside the usual 8-24 h bounds sets the override flag.
    """
    doc = scenario_to_dict(sc)
    if seed is not None:
        doc["seed"] = int(seed)
    if fuel_hours is not None:
        doc["disaster"]["fuel_hours"] = float(fuel_hours)
        lo, hi = FUEL_HOURS_BOUNDS
        if not lo <= fuel_hours <= hi:
            doc["disaster"]["fuel_override"] = True
    return parse_scenario(doc)
