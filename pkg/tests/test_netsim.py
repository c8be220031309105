"""Tests for the discrete-event simulator, the channel and mobility."""
import pytest

from roadmesh.config import ChannelConfig
from roadmesh.exceptions import NonAlternatingEdge, SchedulingInPast, SimulationError
from roadmesh.netsim import MobilityTrack, Simulator, Waypoint, stream
from roadmesh.node import Datagram, NodeOutput
from roadmesh.wire import FrameCode


class EchoNode:
    """Stands in for a vehicle: records what it hears and never sends."""

    def __init__(self, node_id, pseu, due=None):
        self.node_id = node_id
        self.pseu = pseu
        self.powered = False
        self.received = []
        self.due = due

    def dispatch(self, data, now):
        self.received.append((now, data))
        return NodeOutput(receipt=("recv", {"len": len(data)}))

    def next_due(self):
        return self.due if self.powered else None

    def tick(self, now):
        return NodeOutput()

    def boot(self, now):
        self.powered = True
        return NodeOutput()

    def shutdown(self, now):
        self.powered = False
        return NodeOutput()


def make_sim(n=3, **channel):
    sim = Simulator(channel=ChannelConfig(**channel), seed=7)
    nodes = [EchoNode(name, f"0000000{name}") for name in "abc"[:n]]
    for node in nodes:
        node.powered = True
        sim.add_node(node)
    return sim, nodes


def datagram(to=None):
    return Datagram(b"D1,0000000a,ab*", to, FrameCode.D1, "0000000a")


def kinds(sim, kind):
    return [r for r in sim.trace.records if r.kind == kind]


def test_events_run_in_time_then_insertion_order():
    """Test equal times keep scheduling order and earlier times go first."""
    sim = Simulator()
    order = []
    sim.schedule(2.0, "x", lambda: order.append("late"))
    sim.schedule(1.0, "x", lambda: order.append("first"))
    sim.schedule(1.0, "x", lambda: order.append("second"))
    sim.run_until(5.0)
    assert order == ["first", "second", "late"]
    assert sim.now == 5.0


def test_no_scheduling_into_the_past():
    """Test the clock only moves forward."""
    sim = Simulator()
    sim.run_until(5.0)
    with pytest.raises(SchedulingInPast):
        sim.schedule(4.999, "x", lambda: None)
    with pytest.raises(SchedulingInPast):
        sim.run_until(3.0)


def test_broadcast_reaches_every_other_node():
    """Test a lossless broadcast arrives once per receiver after the latency."""
    sim, (a, b, c) = make_sim()
    sim.send(a, datagram())
    sim.run_until(1.0)
    assert a.received == []
    assert [t for t, _ in b.received] == [0.01]
    assert len(c.received) == 1
    (send,) = kinds(sim, "send")
    assert send.get("to") == "*" and send.get("hdr") == "D1"
    assert {r.get("from") for r in kinds(sim, "recv")} == {"a"}
    assert sim.audit()["balanced"] == 1
    assert sim.audit()["delivered"] == 2


def test_unicast_resolves_pseudonyms():
    """Test a unicast reaches only the node currently using that pseudonym."""
    sim, (a, b, c) = make_sim()
    sim.send(a, datagram(to="0000000c"))
    sim.send(a, datagram(to="deadbeef"))
    sim.run_until(1.0)
    assert b.received == [] and len(c.received) == 1
    (drop,) = kinds(sim, "drop")
    assert drop.get("reason") == "unreachable"
    assert sim.audit()["unreachable"] == 1


def test_total_loss():
    """Test loss 1 drops every copy and the counters still reconcile."""
    sim, (a, b, c) = make_sim(loss=1.0)
    for _ in range(5):
        sim.send(a, datagram())
    sim.run_until(1.0)
    assert b.received == [] and c.received == []
    assert len(kinds(sim, "drop")) == 10
    audit = sim.audit()
    assert audit["lost"] == 10 and audit["balanced"] == 1


def test_partial_loss_is_seeded():
    """Test the same seed loses the same copies."""
    def run():
        sim, (a, _, _) = make_sim(loss=0.3)
        for _ in range(200):
            sim.send(a, datagram())
        sim.run_until(1.0)
        return sim.trace.lines(), sim.audit()

    first, audit = run()
    assert first == run()[0]
    assert 0 < audit["lost"] < 400
    assert audit["balanced"] == 1


def test_duplication():
    """Test duplicate 1 delivers every copy twice."""
    sim, (a, b) = make_sim(n=2, duplicate=1.0)
    sim.send(a, datagram())
    sim.run_until(1.0)
    assert len(b.received) == 2
    assert len(kinds(sim, "dup")) == 1
    assert sim.audit()["balanced"] == 1


def test_powered_off_receiver_drops():
    """Test a datagram in flight to a node that turns off is dropped."""
    sim, (a, b) = make_sim(n=2)
    sim.send(a, datagram())
    b.powered = False
    sim.run_until(1.0)
    assert kinds(sim, "drop")[0].get("reason") == "off"
    assert sim.audit()["off"] == 1 and sim.audit()["balanced"] == 1


def test_in_flight_datagrams_count_as_pending():
    """Test an audit taken before delivery still balances."""
    sim, (a, _, _) = make_sim(latency=5.0)
    sim.send(a, datagram())
    sim.run_until(1.0)
    audit = sim.audit()
    assert audit["pending"] == 2 and audit["balanced"] == 1


def test_ignition_edges_must_alternate():
    """Test two ignition-on edges in a row are refused."""
    sim = Simulator()
    node = EchoNode("a", "0000000a")
    sim.add_node(node)
    sim.ignition("a", True, 0.0)
    with pytest.raises(NonAlternatingEdge):
        sim.ignition("a", True, 5.0)
    sim.ignition("a", False, 5.0)
    with pytest.raises(NonAlternatingEdge):
        sim.ignition("a", True, 4.0)
    with pytest.raises(NonAlternatingEdge):
        sim.gps("a", True, 1.0)
    sim.run_until(10.0)
    assert [r.get("state") for r in kinds(sim, "ign")] == ["on", "off"]
    assert not node.powered


def test_unknown_and_duplicate_nodes():
    """Test directives for missing nodes and repeated ids fail."""
    sim = Simulator()
    sim.add_node(EchoNode("a", "0000000a"))
    with pytest.raises(SimulationError):
        sim.add_node(EchoNode("a", "0000000b"))
    with pytest.raises(SimulationError):
        sim.ignition("z", True, 0.0)


def test_stuck_timer_is_detected():
    """Test a node that keeps asking for the same instant stops the run."""
    sim = Simulator()
    sim.add_node(EchoNode("a", "0000000a", due=1.0))
    sim.ignition("a", True, 0.0)
    with pytest.raises(SimulationError):
        sim.run_until(2.0)


def test_streams_are_independent_and_reproducible():
    """Test named streams repeat for a seed and differ across names and seeds."""
    assert stream(1, "x").random() == stream(1, "x").random()
    assert stream(1, "x").random() != stream(1, "y").random()
    assert stream(1, "x").random() != stream(2, "x").random()


def test_mobility_track():
    """Test interpolation, speed in km/h, heading and road class."""
    track = MobilityTrack([
        Waypoint(10.0, 0.0, 0.0, "urban"),
        Waypoint(40.0, 300.0, 0.0, "highway"),
    ])
    assert track.position(0.0) == (0.0, 0.0)
    assert track.position(25.0) == (150.0, 0.0)
    assert track.position(100.0) == (300.0, 0.0)
    assert track.speed(20.0) == pytest.approx(36.0)
    assert track.speed(50.0) == 0.0
    assert track.heading(20.0) == pytest.approx(90.0)
    assert track.road_class(20.0) == "urban"
    assert track.road_class(45.0) == "highway"
    assert MobilityTrack.stationary(1.0, 2.0).speed(5.0) == 0.0


@pytest.mark.parametrize(
    "waypoints",
    [
        [],
        [Waypoint(1.0, 0.0, 0.0), Waypoint(1.0, 1.0, 0.0)],
        [Waypoint(0.0, 0.0, 0.0, "dirt")],
    ],
)
def test_bad_tracks(waypoints):
    """Test empty tracks, repeated times and unknown road classes."""
    with pytest.raises(SimulationError):
        MobilityTrack(waypoints)
