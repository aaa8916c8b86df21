"""Multi-operator control plane: leases, per-port delegation and configuration.

All state lives in one :class:`ControlPlane`.  Every public operation takes
the instance lock, so concurrent callers observe some serial order.  Each
accepted mutation is appended to an audit log; replaying that log on a fresh
instance built from the same inventory reproduces the state exactly.

Resources are named by strings:

* ``slot/<line>/<index>``: one spectrum slot of a line system
* ``port/<id>``: one transceiver port
* ``compute/<data center>``: storage and vCPU of a data center
"""

from __future__ import annotations

import json
import math
import socketserver
import threading
from dataclasses import dataclass, field

from .model import ModelError, Scenario, get_format

VERBS = ("read-state", "configure", "read-telemetry")
DELEGABLE_VERBS = frozenset(VERBS)
LEASE_STATES = ("requested", "granted", "active", "released", "expired")
_TRANSITIONS = {
    "requested": {"granted"},
    "granted": {"active"},
    "active": {"released", "expired"},
    "released": set(),
    "expired": set(),
}


class ControlPlaneError(ModelError):
    code = "INVALID"


class AuthError(ControlPlaneError):
    code = "AUTH"


class AccessDenied(ControlPlaneError):
    code = "DENIED"


class ConflictError(ControlPlaneError):
    code = "CONFLICT"


class InvalidRequest(ControlPlaneError):
    code = "INVALID"


class NotFound(ControlPlaneError):
    code = "NOTFOUND"


def slot_resource(line_id: str, slot: int) -> str:
    return f"slot/{line_id}/{int(slot)}"


def port_resource(port_id: str) -> str:
    return f"port/{port_id}"


def compute_resource(dc_id: str) -> str:
    return f"compute/{dc_id}"


@dataclass(frozen=True)
class OperatorSession:
    operator: str
    token: str
    capabilities: frozenset  # of (resource, verb)

    def can(self, resource: str, verb: str) -> bool:
        return (resource, verb) in self.capabilities


@dataclass
class Lease:
    id: str
    lessor: str
    lessee: str
    resources: tuple
    duration_hours: float
    state: str = "requested"
    requested_at: float = 0.0
    expires_at: float = None
    compute: dict = field(default_factory=dict)

    def to_dict(self):
        return {"id": self.id, "lessor": self.lessor, "lessee": self.lessee, "resources": list(self.resources),
                "duration_hours": self.duration_hours, "state": self.state, "requested_at": self.requested_at,
                "expires_at": self.expires_at, "compute": dict(self.compute)}


@dataclass(frozen=True)
class DelegationContext:
    id: str
    port: str
    owner: str
    tenant: str
    verbs: frozenset
    lease_id: str

    def to_dict(self):
        return {"id": self.id, "port": self.port, "owner": self.owner, "tenant": self.tenant,
                "verbs": sorted(self.verbs), "lease_id": self.lease_id}


@dataclass(frozen=True)
class PortInfo:
    id: str
    owner: str
    line_system: str
    formats: tuple


class ControlPlane:
    """Authoritative inventory, lease and delegation state for one scenario."""

    def __init__(self, operators: dict, resources: dict, ports: dict, line_slots: dict, audit_path=None):
        # operators: id -> token; resources: name -> owner; ports: id -> PortInfo;
        # line_slots: line id -> (slot count, slot spacing GHz)
        self._lock = threading.RLock()
        self._tokens = {tok: op for op, tok in operators.items()}
        if len(self._tokens) != len(operators):
            raise InvalidRequest("operator tokens must be unique")
        self._operators = dict(operators)
        self._revoked = set()
        self._owner = dict(resources)
        self._ports = dict(ports)
        self._line_slots = dict(line_slots)
        self._leases = {}
        self._delegations = {}
        self._port_config = {}
        self._clock = 0.0
        self._seq = 0
        self._audit = []
        self._audit_path = audit_path
        if audit_path is not None:
            open(audit_path, "w", encoding="utf-8").close()

    @classmethod
    def from_scenario(cls, scenario: Scenario, audit_path=None) -> "ControlPlane":
        operators = {op.id: op.token for op in scenario.operators}
        resources, ports, line_slots = {}, {}, {}
        for line in scenario.line_systems:
            line_slots[line.id] = (line.grid.slot_count, line.grid.slot_spacing_ghz)
            for i in range(line.grid.slot_count):
                resources[slot_resource(line.id, i)] = line.owner
        for p in scenario.transceivers:
            resources[port_resource(p.id)] = p.owner_operator
            ports[p.id] = PortInfo(p.id, p.owner_operator, p.line_system, tuple(p.supported_formats))
        for dc in scenario.data_centers:
            resources[compute_resource(dc.id)] = dc.operator
        return cls(operators, resources, ports, line_slots, audit_path=audit_path)

    def fresh_copy(self, audit_path=None) -> "ControlPlane":
        """Same inventory, empty lease/delegation/config state."""
        return ControlPlane(self._operators, self._owner, self._ports, self._line_slots, audit_path=audit_path)

    # --- sessions and capabilities ---------------------------------------------

    def authenticate(self, token: str) -> OperatorSession:
        with self._lock:
            op = self._tokens.get(token)
            if op is None or op in self._revoked:
                raise AuthError("unknown or revoked token")
            return OperatorSession(op, token, frozenset(self._capabilities(op)))

    def revoke_token(self, operator: str):
        with self._lock:
            if operator not in self._operators:
                raise NotFound(f"unknown operator {operator!r}")
            self._revoked.add(operator)
            self._record("revoke_token", operator, {"operator": operator})

    def _active_leases(self):
        return [l for l in self._leases.values() if l.state == "active"]

    def _delegation_for(self, port_id):
        for d in self._delegations.values():
            if d.port == port_resource(port_id):
                return d
        return None

    def _capabilities(self, op: str) -> set:
        """(resource, verb) pairs ``op`` holds right now.

        Owners always read and lease what they own; they use owned slots and
        compute that are not leased out and configure owned ports that are not
        delegated.  Lessees read and use what they lease.  Port configuration
        by a tenant needs a delegation context.
        """
        active = self._active_leases()
        leased_out = {r for l in active if l.lessor == op for r in l.resources}
        leased_in = {r for l in active if l.lessee == op for r in l.resources}
        delegated = {d.port for d in self._delegations.values()}
        caps = set()
        for res, owner in self._owner.items():
            if owner != op:
                continue
            caps.update({(res, "read-state"), (res, "read-telemetry"), (res, "lease")})
            if res.startswith("port/"):
                if res not in delegated:
                    caps.add((res, "configure"))
            elif res not in leased_out:
                caps.add((res, "use"))
        for res in leased_in:
            caps.add((res, "read-state"))
            if not res.startswith("port/"):
                caps.add((res, "use"))
        for d in self._delegations.values():
            if d.tenant == op:
                caps.update((d.port, verb) for verb in d.verbs)
        return caps

    def _session(self, session: OperatorSession) -> str:
        """Re-validate a session; capabilities are always recomputed from current state."""
        op = self._tokens.get(session.token)
        if op is None or op != session.operator or op in self._revoked:
            raise AuthError("session is no longer valid")
        return op

    # --- clock -------------------------------------------------------------------

    @property
    def clock_hours(self) -> float:
        return self._clock

    def advance_clock(self, hours: float) -> list:
        """Move simulated time forward; expire leases whose time is up."""
        with self._lock:
            if hours < 0:
                raise InvalidRequest("time cannot move backwards")
            self._clock += float(hours)
            expired = []
            for lease in sorted(self._leases.values(), key=lambda l: l.id):
                if lease.state == "active" and lease.expires_at is not None and lease.expires_at <= self._clock + 1e-12:
                    self._end_lease(lease, "expired")
                    expired.append(lease.id)
            self._record("advance_clock", None, {"hours": float(hours)})
            return expired

    # --- leases ------------------------------------------------------------------

    def request_lease(self, session: OperatorSession, resources, duration_hours: float, compute=None) -> Lease:
        with self._lock:
            op = self._session(session)
            resources = tuple(sorted(set(resources)))
            if not resources:
                raise InvalidRequest("a lease needs at least one resource")
            if not duration_hours > 0:
                raise InvalidRequest("lease duration must be positive")
            owners = set()
            for res in resources:
                if res not in self._owner:
                    raise NotFound(f"unknown resource {res!r}")
                owners.add(self._owner[res])
            if len(owners) != 1:
                raise InvalidRequest("all resources in one lease must have the same owner")
            lessor = owners.pop()
            if lessor == op:
                raise InvalidRequest("an operator cannot lease its own resources")
            self._check_free(resources)
            lease_id = f"lease-{len(self._leases) + 1}"
            lease = Lease(lease_id, lessor, op, resources, float(duration_hours), requested_at=self._clock,
                          compute=dict(compute or {}))
            self._leases[lease_id] = lease
            self._record("request_lease", op, {"resources": list(resources), "duration_hours": float(duration_hours),
                                               "compute": dict(compute or {})})
            return _copy_lease(lease)

    def _check_free(self, resources):
        for lease in self._active_leases():
            clash = set(resources) & set(lease.resources)
            if clash:
                raise ConflictError(f"{sorted(clash)[0]} is already in active lease {lease.id}")

    def grant_lease(self, session: OperatorSession, lease_id: str) -> Lease:
        with self._lock:
            op = self._session(session)
            lease = self._lease(lease_id)
            if lease.lessor != op:
                raise AccessDenied(f"{op} does not own the resources of {lease_id}")
            if lease.state != "requested":
                raise InvalidRequest(f"{lease_id} is {lease.state}, not requested")
            if any(not (r, "lease") in self._capabilities(op) for r in lease.resources):
                raise AccessDenied(f"{op} cannot lease every resource of {lease_id}")
            self._check_free(lease.resources)
            self._transition(lease, "granted")
            self._transition(lease, "active")
            lease.expires_at = self._clock + lease.duration_hours
            self._record("grant_lease", op, {"lease_id": lease_id})
            return _copy_lease(lease)

    def release_lease(self, session: OperatorSession, lease_id: str) -> Lease:
        with self._lock:
            op = self._session(session)
            lease = self._lease(lease_id)
            if op not in (lease.lessor, lease.lessee):
                raise AccessDenied(f"{op} is not a party to {lease_id}")
            if lease.state != "active":
                raise InvalidRequest(f"{lease_id} is {lease.state}, not active")
            self._end_lease(lease, "released")
            self._record("release_lease", op, {"lease_id": lease_id})
            return _copy_lease(lease)

    def _end_lease(self, lease: Lease, state: str):
        self._transition(lease, state)
        for did in sorted(self._delegations):
            if self._delegations[did].lease_id == lease.id:
                del self._delegations[did]
        # configurations made under the lease go with it
        for port_id in sorted(self._port_config):
            cfg = self._port_config[port_id]
            if cfg["lease_id"] == lease.id:
                del self._port_config[port_id]

    def _transition(self, lease: Lease, state: str):
        if state not in _TRANSITIONS[lease.state]:
            raise InvalidRequest(f"lease {lease.id}: {lease.state} -> {state} is not allowed")
        lease.state = state

    def _lease(self, lease_id) -> Lease:
        if lease_id not in self._leases:
            raise NotFound(f"unknown lease {lease_id!r}")
        return self._leases[lease_id]

    def lease(self, lease_id) -> Lease:
        with self._lock:
            return _copy_lease(self._lease(lease_id))

    # --- delegation and configuration --------------------------------------------

    def delegate_port(self, session: OperatorSession, port_id: str, tenant: str, verbs) -> DelegationContext:
        with self._lock:
            op = self._session(session)
            port = self._port(port_id)
            verbs = frozenset(verbs)
            if not verbs or not verbs <= DELEGABLE_VERBS:
                raise InvalidRequest(f"verbs must be a non-empty subset of {sorted(DELEGABLE_VERBS)}")
            if port.owner != op:
                raise AccessDenied(f"{op} does not own port {port_id}")
            if tenant == op:
                raise InvalidRequest("cannot delegate a port to its owner")
            if tenant not in self._operators:
                raise NotFound(f"unknown operator {tenant!r}")
            if self._delegation_for(port_id) is not None:
                raise ConflictError(f"port {port_id} is already delegated")
            res = port_resource(port_id)
            covering = [l for l in self._active_leases() if res in l.resources and l.lessee == tenant]
            if not covering:
                raise InvalidRequest(f"no active lease covers port {port_id} for {tenant}")
            ctx_id = f"ctx-{self._seq + 1}"
            ctx = DelegationContext(ctx_id, res, op, tenant, verbs, covering[0].id)
            self._delegations[ctx_id] = ctx
            if port_id in self._port_config:
                del self._port_config[port_id]
            self._record("delegate_port", op, {"port_id": port_id, "tenant": tenant, "verbs": sorted(verbs)})
            return ctx

    def _port(self, port_id) -> PortInfo:
        if port_id not in self._ports:
            raise NotFound(f"unknown port {port_id!r}")
        return self._ports[port_id]

    def configure_port(self, session: OperatorSession, port_id: str, slot: int, format: str,
                       launch_power_dbm: float) -> dict:
        """Apply a slot/format/power setting to a port; returns an acknowledgment."""
        with self._lock:
            op = self._session(session)
            port = self._port(port_id)
            res = port_resource(port_id)
            caps = self._capabilities(op)
            if (res, "configure") not in caps:
                raise AccessDenied(f"{op} may not configure port {port_id}")
            if format not in port.formats:
                raise InvalidRequest(f"port {port_id} does not support {format}")
            n_slots, spacing_ghz = self._line_slots[port.line_system]
            width = max(1, math.ceil(get_format(format).symbol_rate_gbd / spacing_ghz - 1e-9))
            slot = int(slot)
            if slot < 0 or slot + width > n_slots:
                raise InvalidRequest(f"slot {slot} (+{width}) outside line {port.line_system}")
            slots = [slot_resource(port.line_system, s) for s in range(slot, slot + width)]
            for s in slots:
                if (s, "use") not in caps:
                    raise AccessDenied(f"{op} may not use {s}")
            for other, cfg in self._port_config.items():
                if other != port_id and set(cfg["slots"]) & set(slots):
                    raise ConflictError(f"{sorted(set(cfg['slots']) & set(slots))[0]} is used by port {other}")
            deleg = self._delegation_for(port_id)
            entry = {"slot": slot, "slots": slots, "format": format, "launch_power_dbm": float(launch_power_dbm),
                     "configured_by": op, "lease_id": deleg.lease_id if deleg else None}
            self._port_config[port_id] = entry
            self._record("configure_port", op, {"port_id": port_id, "slot": slot, "format": format,
                                                "launch_power_dbm": float(launch_power_dbm)})
            return {"port": port_id, "status": "applied", "slot": slot, "width_slots": width}

    def port_state(self, session: OperatorSession, port_id: str) -> dict:
        with self._lock:
            op = self._session(session)
            self._port(port_id)
            if (port_resource(port_id), "read-state") not in self._capabilities(op):
                raise AccessDenied(f"{op} may not read port {port_id}")
            cfg = self._port_config.get(port_id)
            return {"port": port_id, "config": None if cfg is None else
                    {k: v for k, v in cfg.items() if k not in ("lease_id",)}}

    def port_configs(self) -> dict:
        with self._lock:
            return {k: dict(v) for k, v in self._port_config.items()}

    def delegations(self) -> list:
        with self._lock:
            return [self._delegations[k] for k in sorted(self._delegations)]

    def owner_of(self, resource: str) -> str:
        return self._owner[resource]

    # --- audit and snapshots -----------------------------------------------------

    def _record(self, op_name, operator, params):
        self._seq += 1
        rec = {"seq": self._seq, "clock_hours": self._clock, "op": op_name, "operator": operator, "params": params}
        self._audit.append(rec)
        if self._audit_path is not None:
            with open(self._audit_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @property
    def audit_log(self) -> list:
        with self._lock:
            return [dict(r) for r in self._audit]

    def snapshot(self) -> str:
        """Canonical JSON of all mutable state."""
        with self._lock:
            state = {
                "clock_hours": self._clock,
                "revoked": sorted(self._revoked),
                "leases": [self._leases[k].to_dict() for k in sorted(self._leases)],
                "delegations": [self._delegations[k].to_dict() for k in sorted(self._delegations)],
                "port_config": {k: self._port_config[k] for k in sorted(self._port_config)},
            }
            return json.dumps(state, sort_keys=True)

    def _impersonate(self, operator: str) -> OperatorSession:
        return OperatorSession(operator, self._operators[operator], frozenset())

    @classmethod
    def replay(cls, base: "ControlPlane", records) -> "ControlPlane":
        """Apply audit records to a fresh copy of ``base``'s inventory."""
        cp = base.fresh_copy()
        for rec in records:
            op, p = rec["operator"], rec["params"]
            name = rec["op"]
            if name == "advance_clock":
                cp.advance_clock(p["hours"])
            elif name == "revoke_token":
                cp.revoke_token(p["operator"])
            elif name == "request_lease":
                cp.request_lease(cp._impersonate(op), p["resources"], p["duration_hours"], p.get("compute"))
            elif name == "grant_lease":
                cp.grant_lease(cp._impersonate(op), p["lease_id"])
            elif name == "release_lease":
                cp.release_lease(cp._impersonate(op), p["lease_id"])
            elif name == "delegate_port":
                cp.delegate_port(cp._impersonate(op), p["port_id"], p["tenant"], p["verbs"])
            elif name == "configure_port":
                cp.configure_port(cp._impersonate(op), p["port_id"], p["slot"], p["format"], p["launch_power_dbm"])
            else:
                raise InvalidRequest(f"unknown audit op {name!r}")
        return cp


def _copy_lease(lease: Lease) -> Lease:
    return Lease(**{**lease.__dict__, "compute": dict(lease.compute)})


# --- wire protocol ---------------------------------------------------------------


def _lease_view(lease: Lease) -> dict:
    return lease.to_dict()


_OPS = {
    "session": lambda cp, s, p: {"operator": s.operator,
                                 "capabilities": sorted([list(c) for c in s.capabilities])},
    "get-state": lambda cp, s, p: cp.port_state(s, p["port"]),
    "edit-config": lambda cp, s, p: cp.configure_port(s, p["port"], p["slot"], p["format"], p["launch_power_dbm"]),
    "request-lease": lambda cp, s, p: _lease_view(cp.request_lease(s, p["resources"], p["duration_hours"],
                                                                   p.get("compute"))),
    "grant-lease": lambda cp, s, p: _lease_view(cp.grant_lease(s, p["lease_id"])),
    "release-lease": lambda cp, s, p: _lease_view(cp.release_lease(s, p["lease_id"])),
    "delegate-port": lambda cp, s, p: cp.delegate_port(s, p["port"], p["tenant"], p["verbs"]).to_dict(),
}


def handle_message(cp: ControlPlane, line: str) -> str:
    """Answer one request line ``{id, token, op, params}`` with one response line."""
    msg_id = None
    try:
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InvalidRequest(f"malformed JSON: {exc.msg}") from None
        if not isinstance(msg, dict):
            raise InvalidRequest("request must be a JSON object")
        msg_id = msg.get("id")
        op = msg.get("op")
        params = msg.get("params", {})
        if op not in _OPS:
            raise InvalidRequest(f"unknown op {op!r}")
        if not isinstance(params, dict):
            raise InvalidRequest("params must be an object")
        session = cp.authenticate(msg.get("token", ""))
        try:
            result = _OPS[op](cp, session, params)
        except KeyError as exc:
            raise InvalidRequest(f"missing parameter {exc.args[0]!r}") from None
        except TypeError as exc:
            raise InvalidRequest(str(exc)) from None
        resp = {"id": msg_id, "status": "ok", "result": result}
    except ControlPlaneError as exc:
        resp = {"id": msg_id, "status": "error", "error": {"code": exc.code, "detail": str(exc)}}
    except ModelError as exc:
        resp = {"id": msg_id, "status": "error", "error": {"code": "INVALID", "detail": str(exc)}}
    return json.dumps(resp, sort_keys=True)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            text = raw.decode("utf-8").strip()
            if not text:
                continue
            reply = handle_message(self.server.control_plane, text)
            self.wfile.write((reply + "\n").encode("utf-8"))
            self.wfile.flush()


class ControlPlaneServer(socketserver.ThreadingTCPServer):
    """Line-oriented TCP front end; bind to port 0 to let the OS pick one."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, control_plane: ControlPlane, address=("127.0.0.1", 0)):
        self.control_plane = control_plane
        super().__init__(address, _Handler)

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t
