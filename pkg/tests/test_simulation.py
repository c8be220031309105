"""End-to-end runs of the shipped scenarios."""
from dataclasses import replace
from pathlib import Path

import pytest

from roadmesh.aggregation import verify_signature
from roadmesh.events import EventKind
from roadmesh.scenario import load_scenario, run_scenario
from roadmesh.trace import verify_trace

SCENARIOS = Path(__file__).resolve().parent.parent / "data" / "scenarios"
AUTH_CODES = {"D1", "D2", "D3", "D4", "D5", "Z2", "Z3", "Z4", "E1", "E2", "E3", "E4", "E5", "E6"}


def simulate(name, seed=0, until=None, **channel):
    scenario = load_scenario(SCENARIOS / name)
    if channel:
        scenario.channel = replace(scenario.channel, **channel)
    return run_scenario(scenario, seed, until)


def of_kind(sim, kind, node=None):
    return [r for r in sim.trace.records if r.kind == kind and (node is None or r.node == node)]


def assert_clean(sim):
    assert verify_trace(sim.trace.records, sim.config.max_resends) == []
    assert sim.audit()["balanced"] == 1


@pytest.mark.parametrize("name", sorted(p.name for p in SCENARIOS.glob("*.scn")))
def test_every_scenario_runs_clean(name):
    """Test each shipped scenario produces a trace without violations."""
    assert_clean(simulate(name))


def test_two_nodes_authenticate():
    """Test two parked vehicles sharing an acquaintance run one full handshake."""
    sim = simulate("two_node_auth.scn")
    assert_clean(sim)
    auth_sends = [r.get("hdr") for r in of_kind(sim, "send") if r.get("hdr") in AUTH_CODES]
    assert auth_sends == [
        "D1", "D2", "D3", "D4", "D5", "Z2", "Z3", "Z4", "E1", "E2", "E3", "E4", "E5", "E6",
    ]
    a, b = sim.nodes["a"], sim.nodes["b"]
    assert a.db.get(102).authenticated and b.db.get(101).authenticated
    for node in ("a", "b"):
        states = [r for r in of_kind(sim, "state", node) if r.get("sess")]
        assert states[-1].get("state") == "Done"
        assert any(r.get("peer") for r in states)


def test_parking_events_are_shared_after_authentication():
    """Test each side ends up holding the other's freed spot."""
    sim = simulate("two_node_auth.scn")
    for node in sim.nodes.values():
        rows = node.table_rows()
        assert len(rows) == 2
        assert all("kind=parking" in line for _, line in rows)


def test_runs_are_reproducible():
    """Test the same scenario and seed give byte-identical traces."""
    first = simulate("aggregation.scn", seed=3).trace.text()
    assert simulate("aggregation.scn", seed=3).trace.text() == first
    assert simulate("aggregation.scn", seed=4).trace.text() != first


def test_jam_is_corroborated():
    """Test stuck neighbours confirm a jam and the passing car never signs."""
    sim = simulate("aggregation.scn")
    assert_clean(sim)
    confirms = [r for r in of_kind(sim, "event") if r.get("op") == "confirm" and r.get("ev") == "jam"]
    assert all(int(r.get("sigs")) >= 2 for r in confirms)
    for name in ("a", "b", "c"):
        node = sim.nodes[name]
        keyring = {**node.db.keyring(), node.identity.real_id: node.identity.public}
        jams = [e for e in node.agg.table if e.kind is EventKind.JAM]
        assert jams, name
        for event in jams:
            valid = {
                sig[0] for sig in event.signatures
                if verify_signature(node.provider, keyring, event, sig)
            }
            assert len(valid) >= sim.config.threshold, name
    witness_replies = [r for r in of_kind(sim, "recv") if r.get("sub") == "F"]
    assert witness_replies
    assert all(r.get("from") != "d" for r in witness_replies)
    assert not any(r.get("op") == "insert" and r.get("table") == "possible" for r in of_kind(sim, "event", "d"))


def test_forged_signature_never_confirms():
    """Test a corrupted witness signature leads to a reject and no confirmation."""
    sim = simulate("forged.scn")
    assert_clean(sim)
    events = of_kind(sim, "event")
    assert not any(r.get("op") == "confirm" for r in events)
    assert any(r.get("op") == "reject" and r.node == "o" for r in events)
    assert len(sim.nodes["o"].agg.possible) == 0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_no_common_acquaintance_never_authenticates(seed):
    """Test strangers abort every attempt, by error or by running out of resends."""
    sim = simulate("no_common.scn", seed=seed)
    assert_clean(sim)
    states = [r for r in of_kind(sim, "state") if r.get("sess")]
    assert not any(r.get("peer") for r in states)
    reasons = {r.get("reason") for r in states if r.get("state") == "Aborted"}
    assert reasons
    assert reasons <= {"NoCommonAcquaintance", "resend_limit", "tie_break"}
    assert not sim.nodes["a"].db.authenticated_peers()


def test_strangers_never_authenticate_over_many_seeds():
    """Test disjoint acquaintance lists keep every peer unauthenticated for 100 seeds."""
    for seed in range(100):
        sim = simulate("no_common.scn", seed=seed)
        assert not any(r.get("peer") for r in of_kind(sim, "state") if r.get("sess")), seed
        assert not any(n.db.authenticated_peers() for n in sim.nodes.values()), seed


def test_parking_follows_the_car():
    """Test the freed spots reach the peer and the parked location is remembered."""
    sim = simulate("parking.scn")
    assert_clean(sim)
    lines = [line for _, line in sim.nodes["b"].table_rows()]
    for spot in ("x=0.0 y=0.0", "x=300.0 y=0.0", "x=0.0 y=20.0"):
        assert any(spot in line and "kind=parking" in line for line in lines), spot
    assert sim.nodes["a"].find_parked() == (300.0, 0.0)
    parks = [r for r in of_kind(sim, "event", "a") if r.get("op") == "park"]
    assert [(r.t, r.get("x")) for r in parks] == [(40.0, "300.0")]


def test_lossy_channel_stays_consistent():
    """Test thirty percent loss keeps the counters balanced and the trace valid."""
    sim = simulate("two_node_auth.scn", until=120.0, loss=0.3)
    assert_clean(sim)
    audit = sim.audit()
    assert 0.1 < audit["lost"] / audit["copies"] < 0.5
    resends = [r for r in of_kind(sim, "timer") if r.get("action") == "resend"]
    assert all(int(r.get("count")) <= sim.config.max_resends for r in resends)


def test_sessions_terminate_under_loss():
    """Test 100 lossy runs keep resends bounded and every early session ends."""
    for seed in range(100):
        sim = simulate("two_node_auth.scn", seed=seed, until=90.0, loss=0.3)
        assert verify_trace(sim.trace.records, sim.config.max_resends) == [], seed
        started, last = {}, {}
        for r in of_kind(sim, "state"):
            if r.get("sess"):
                started.setdefault(r.get("sess"), r.t)
                last[r.get("sess")] = r.get("state")
        for sess, t in started.items():
            if t < 30.0:
                assert last[sess] in ("Done", "Aborted"), (seed, sess)


def test_duplicating_channel_keeps_sessions_single():
    """Test duplicated frames are absorbed without opening extra sessions."""
    sim = simulate("two_node_auth.scn", duplicate=0.5, seed=5)
    assert_clean(sim)
    assert sim.nodes["a"].db.get(102).authenticated


def test_rotation_retires_the_old_pseudonym():
    """Test that after a rotation only the change notices still use the old pseudonym."""
    sim = simulate("two_node_auth.scn", until=200.0)
    assert_clean(sim)
    rotations = [r for r in of_kind(sim, "timer") if r.get("action") == "rotate"]
    assert rotations and all(r.get("peers") == "1" for r in rotations)
    for rot in rotations:
        old = rot.get("old")
        later = [r for r in of_kind(sim, "send", rot.node) if r.t_ms >= rot.t_ms and r.get("pseu") == old]
        assert len(later) == int(rot.get("peers"))
        assert all(r.t_ms == rot.t_ms and r.get("hdr") == "01" and r.get("to") != "*" for r in later)
    a, b = sim.nodes["a"], sim.nodes["b"]
    assert b.db.get(a.identity.real_id).current_pseu == a.pseu
    assert a.db.get(b.identity.real_id).current_pseu == b.pseu
    assert b.db.is_authenticated(a.pseu) and a.db.is_authenticated(b.pseu)


def test_aborted_sessions_leave_no_binding():
    """Test 100 lossy runs never keep a peer that only an aborted session vouched for."""
    for seed in range(100):
        sim = simulate("two_node_auth.scn", seed=seed, until=90.0, loss=0.3)
        for name, node in sim.nodes.items():
            bound, last = {}, {}
            for r in of_kind(sim, "state", name):
                if not r.get("sess"):
                    continue
                if r.get("peer"):
                    bound[r.get("sess")] = r.get("peer")
                last[r.get("sess")] = r
            for sess, peer in bound.items():
                if last[sess].get("state") == "Aborted":
                    assert last[sess].get("unbound") == peer, (seed, sess)
            kept = {int(peer) for sess, peer in bound.items() if last[sess].get("state") != "Aborted"}
            held = {entry.real_id for entry in node.db.entries if entry.authenticated}
            assert held == kept, (seed, name)
