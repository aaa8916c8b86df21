import json
import socket
import threading

import pytest

from agile_twin.control_plane import (
    AccessDenied,
    AuthError,
    ConflictError,
    ControlPlane,
    ControlPlaneServer,
    InvalidRequest,
    NotFound,
    handle_message,
    port_resource,
    slot_resource,
)

import cp_fuzz

LINE = "galway-dublin"
PORTS = ("p400-1", "p400-2", "p400-3", "p400-4", "p800-1", "p800-2")
A_TOKEN, B_TOKEN = "token-operator-a", "token-operator-b"


@pytest.fixture
def cp(scenario):
    return ControlPlane.from_scenario(scenario)


def slots(*idx):
    return [slot_resource(LINE, i) for i in idx]


def ports(*ids):
    return [port_resource(p) for p in ids]


@pytest.fixture
def leased(cp):
    """A leases 6 slots and B's 6 ports for 24 h; B grants."""
    a, b = cp.authenticate(A_TOKEN), cp.authenticate(B_TOKEN)
    lease = cp.request_lease(a, slots(20, 21, 22, 23, 24, 25) + ports(*PORTS), 24.0)
    assert lease.state == "requested"
    granted = cp.grant_lease(b, lease.id)
    return cp, a, b, granted


# --- sessions --------------------------------------------------------------------


def test_authenticate_lists_own_ports(cp):
    b = cp.authenticate(B_TOKEN)
    assert b.operator == "B"
    for p in PORTS:
        assert b.can(port_resource(p), "configure")
    a = cp.authenticate(A_TOKEN)
    assert not any(a.can(port_resource(p), "read-state") for p in PORTS)


def test_unknown_and_revoked_tokens(cp):
    with pytest.raises(AuthError):
        cp.authenticate("nope")
    cp.revoke_token("A")
    with pytest.raises(AuthError):
        cp.authenticate(A_TOKEN)


def test_stale_session_rejected_after_revoke(cp):
    a = cp.authenticate(A_TOKEN)
    cp.revoke_token("A")
    with pytest.raises(AuthError):
        cp.request_lease(a, slots(1), 1.0)


def test_capabilities_after_grant(leased):
    cp, *_ = leased
    a = cp.authenticate(A_TOKEN)
    for r in slots(20, 21, 22, 23, 24, 25):
        assert a.can(r, "use")
    assert not a.can(slot_resource(LINE, 30), "use")


# --- leases ----------------------------------------------------------------------


def test_lease_lifecycle(leased):
    cp, a, b, lease = leased
    assert lease.state == "active"
    assert lease.expires_at == pytest.approx(24.0)
    assert cp.release_lease(a, lease.id).state == "released"


def test_overlapping_lease_conflict(cp):
    a, b = cp.authenticate(A_TOKEN), cp.authenticate(B_TOKEN)
    first = cp.request_lease(a, slots(20, 21, 22, 23, 24, 25), 24.0)
    second = cp.request_lease(a, slots(25, 26), 1.0)
    cp.grant_lease(b, first.id)
    with pytest.raises(ConflictError, match=slot_resource(LINE, 25)):
        cp.grant_lease(b, second.id)
    assert cp.lease(second.id).state == "requested"


def test_request_conflicts_with_active_lease(leased):
    cp, a, *_ = leased
    with pytest.raises(ConflictError, match=slot_resource(LINE, 21)):
        cp.request_lease(a, slots(21), 1.0)


def test_grant_by_non_owner(cp):
    a = cp.authenticate(A_TOKEN)
    lease = cp.request_lease(a, slots(3), 1.0)
    with pytest.raises(AccessDenied):
        cp.grant_lease(a, lease.id)


def test_lease_request_validation(cp):
    a, b = cp.authenticate(A_TOKEN), cp.authenticate(B_TOKEN)
    with pytest.raises(InvalidRequest):
        cp.request_lease(a, [], 1.0)
    with pytest.raises(InvalidRequest):
        cp.request_lease(a, slots(1), 0.0)
    with pytest.raises(NotFound):
        cp.request_lease(a, ["slot/nowhere/0"], 1.0)
    with pytest.raises(InvalidRequest):
        cp.request_lease(b, slots(1), 1.0)  # own resources
    with pytest.raises(InvalidRequest):
        cp.request_lease(a, slots(1) + ["compute/dc-x"], 1.0)  # mixed owners


def test_double_release_and_unknown_lease(leased):
    cp, a, b, lease = leased
    cp.release_lease(b, lease.id)
    with pytest.raises(InvalidRequest):
        cp.release_lease(a, lease.id)
    with pytest.raises(NotFound):
        cp.release_lease(a, "lease-99")


def test_expiry_revokes_like_release(leased):
    cp, a, b, lease = leased
    cp.delegate_port(b, "p400-1", "A", {"configure"})
    assert cp.advance_clock(23.0) == []
    assert cp.advance_clock(1.0) == [lease.id]
    assert cp.lease(lease.id).state == "expired"
    assert cp.delegations() == []
    with pytest.raises(AccessDenied):
        cp.configure_port(a, "p400-1", 20, "400G", 0.0)


def test_clock_cannot_go_back(cp):
    with pytest.raises(InvalidRequest):
        cp.advance_clock(-1.0)


# --- delegation and configuration ------------------------------------------------


def test_delegate_and_configure(leased):
    cp, a, b, _ = leased
    ctx = cp.delegate_port(b, "p400-1", "A", {"configure", "read-telemetry"})
    assert ctx.port == port_resource("p400-1") and ctx.tenant == "A"
    ack = cp.configure_port(a, "p400-1", 24, "400G", 1.0)
    assert ack["status"] == "applied"
    assert cp.port_configs()["p400-1"]["configured_by"] == "A"


def test_second_delegation_rejected(leased):
    cp, a, b, _ = leased
    cp.delegate_port(b, "p400-1", "A", {"configure"})
    with pytest.raises(ConflictError):
        cp.delegate_port(b, "p400-1", "A", {"read-state"})


def test_delegation_without_lease(cp):
    b = cp.authenticate(B_TOKEN)
    with pytest.raises(InvalidRequest, match="no active lease"):
        cp.delegate_port(b, "p400-1", "A", {"configure"})


def test_delegation_validation(leased):
    cp, a, b, _ = leased
    with pytest.raises(InvalidRequest):
        cp.delegate_port(b, "p400-1", "A", {"reboot"})
    with pytest.raises(InvalidRequest):
        cp.delegate_port(b, "p400-1", "B", {"configure"})
    with pytest.raises(AccessDenied):
        cp.delegate_port(a, "p400-1", "A", {"configure"})
    with pytest.raises(NotFound):
        cp.delegate_port(b, "p400-1", "Z", {"configure"})


def test_isolation_between_ports(leased):
    cp, a, b, _ = leased
    cp.delegate_port(b, "p400-1", "A", {"configure"})
    with pytest.raises(AccessDenied):
        cp.configure_port(a, "p400-2", 24, "400G", 0.0)


def test_wrong_verb_denied(leased):
    cp, a, b, _ = leased
    cp.delegate_port(b, "p400-1", "A", {"read-telemetry"})
    with pytest.raises(AccessDenied):
        cp.configure_port(a, "p400-1", 24, "400G", 0.0)
    assert cp.port_state(a, "p400-1")["port"] == "p400-1"  # lessee reads leased ports


def test_owner_configures_own_port(cp):
    b = cp.authenticate(B_TOKEN)
    assert cp.configure_port(b, "p400-3", 5, "400G", 0.0)["status"] == "applied"


def test_owner_loses_configure_while_delegated(leased):
    cp, a, b, _ = leased
    cp.delegate_port(b, "p400-1", "A", {"configure"})
    with pytest.raises(AccessDenied):
        cp.configure_port(b, "p400-1", 2, "400G", 0.0)


def test_tenant_needs_leased_slots(leased):
    cp, a, b, _ = leased
    cp.delegate_port(b, "p400-1", "A", {"configure"})
    with pytest.raises(AccessDenied):
        cp.configure_port(a, "p400-1", 30, "400G", 0.0)


def test_invalid_configs(leased):
    cp, a, b, _ = leased
    cp.delegate_port(b, "p400-1", "A", {"configure"})
    cp.delegate_port(b, "p800-1", "A", {"configure"})
    cp.delegate_port(b, "p400-2", "A", {"configure"})
    with pytest.raises(InvalidRequest, match="support"):
        cp.configure_port(a, "p400-1", 20, "800G", 0.0)
    with pytest.raises(InvalidRequest):
        cp.configure_port(a, "p400-1", 48, "400G", 0.0)
    assert cp.configure_port(a, "p800-1", 20, "800G", 0.0)["width_slots"] == 2
    with pytest.raises(ConflictError):
        cp.configure_port(a, "p400-2", 21, "400G", 0.0)


def test_release_revokes_tenant(leased):
    cp, a, b, lease = leased
    cp.delegate_port(b, "p400-1", "A", {"configure", "read-state"})
    cp.configure_port(a, "p400-1", 24, "400G", 0.0)
    cp.release_lease(b, lease.id)
    with pytest.raises(AccessDenied):
        cp.configure_port(a, "p400-1", 24, "400G", 0.0)
    fresh = cp.authenticate(A_TOKEN)
    assert not any(r in {c[0] for c in fresh.capabilities} for r in lease.resources)
    assert "p400-1" not in cp.port_configs()


# --- audit -----------------------------------------------------------------------


def test_audit_file_and_replay(scenario, tmp_path):
    path = tmp_path / "audit.jsonl"
    cp = ControlPlane.from_scenario(scenario, audit_path=path)
    a, b = cp.authenticate(A_TOKEN), cp.authenticate(B_TOKEN)
    lease = cp.request_lease(a, slots(20, 21) + ports("p800-1"), 2.0)
    cp.grant_lease(b, lease.id)
    cp.delegate_port(b, "p800-1", "A", {"configure"})
    cp.configure_port(a, "p800-1", 20, "800G", 2.0)
    cp.advance_clock(3.0)
    rows = [json.loads(x) for x in path.read_text().splitlines()]
    assert rows == cp.audit_log
    assert [r["seq"] for r in rows] == list(range(1, len(rows) + 1))
    assert ControlPlane.replay(cp, rows).snapshot() == cp.snapshot()


def test_rejected_operations_are_not_audited(cp):
    a = cp.authenticate(A_TOKEN)
    with pytest.raises(AccessDenied):
        cp.configure_port(a, "p400-1", 1, "400G", 0.0)
    assert cp.audit_log == []


def test_randomized_operations_are_justified():
    stats = cp_fuzz.run(10_000, seed=0)
    assert stats["unjustified"] == []
    assert stats["exclusivity_violations"] == 0
    assert stats["residual_capabilities"] == 0
    assert stats["post_release_attempts"] > 100
    assert stats["post_release_denied"] == stats["post_release_attempts"]
    assert stats["tenant_configures"] > 50
    assert stats["replay_equal"]


# --- wire protocol ---------------------------------------------------------------


def msg(cp, op, token=A_TOKEN, **params):
    return json.loads(handle_message(cp, json.dumps({"id": 7, "token": token, "op": op, "params": params})))


def test_wire_round_trip(cp):
    r = msg(cp, "request-lease", resources=slots(24) + ports("p400-1"), duration_hours=24.0)
    assert r["status"] == "ok" and r["id"] == 7
    lid = r["result"]["id"]
    assert msg(cp, "grant-lease", B_TOKEN, lease_id=lid)["result"]["state"] == "active"
    assert msg(cp, "delegate-port", B_TOKEN, port="p400-1", tenant="A",
               verbs=["configure", "read-state"])["status"] == "ok"
    ack = msg(cp, "edit-config", port="p400-1", slot=24, format="400G", launch_power_dbm=0.5)
    assert ack["result"]["status"] == "applied"
    state = msg(cp, "get-state", port="p400-1")["result"]
    assert state["config"]["slot"] == 24
    assert "A" == msg(cp, "session")["result"]["operator"]


@pytest.mark.parametrize("payload, code", [
    ("{bad json", "INVALID"),
    ("[1]", "INVALID"),
    (json.dumps({"id": 1, "token": "x", "op": "session"}), "AUTH"),
    (json.dumps({"id": 1, "token": A_TOKEN, "op": "reboot"}), "INVALID"),
    (json.dumps({"id": 1, "token": A_TOKEN, "op": "get-state", "params": {}}), "INVALID"),
    (json.dumps({"id": 1, "token": A_TOKEN, "op": "get-state", "params": {"port": "zz"}}), "NOTFOUND"),
    (json.dumps({"id": 1, "token": A_TOKEN, "op": "get-state", "params": {"port": "p400-1"}}), "DENIED"),
])
def test_wire_error_codes(cp, payload, code):
    r = json.loads(handle_message(cp, payload))
    assert r["status"] == "error"
    assert r["error"]["code"] == code
    assert r["error"]["detail"]


def test_wire_conflict_code(cp):
    msg(cp, "grant-lease", B_TOKEN, lease_id=msg(cp, "request-lease", resources=slots(3), duration_hours=1.0)
        ["result"]["id"])
    r = msg(cp, "request-lease", resources=slots(3), duration_hours=1.0)
    assert r["error"]["code"] == "CONFLICT"


def test_tcp_server(cp):
    server = ControlPlaneServer(cp)
    server.start()
    try:
        host, port = server.server_address
        with socket.create_connection((host, port), timeout=5) as sock:
            f = sock.makefile("rw", encoding="utf-8", newline="\n")
            for i, op in enumerate(["session", "session"]):
                f.write(json.dumps({"id": i, "token": B_TOKEN, "op": op}) + "\n")
            f.flush()
            replies = [json.loads(f.readline()) for _ in range(2)]
        assert [r["id"] for r in replies] == [0, 1]
        assert all(r["result"]["operator"] == "B" for r in replies)
    finally:
        server.shutdown()
        server.server_close()


def test_concurrent_clients_are_serialized(cp):
    """Many threads race to lease the same slot; exactly one grant succeeds."""
    a, b = cp.authenticate(A_TOKEN), cp.authenticate(B_TOKEN)
    ids = [cp.request_lease(a, slots(40), 1.0).id for _ in range(16)]
    wins = []

    def grant(lid):
        try:
            cp.grant_lease(b, lid)
            wins.append(lid)
        except ConflictError:
            pass

    threads = [threading.Thread(target=grant, args=(lid,)) for lid in ids]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(wins) == 1
