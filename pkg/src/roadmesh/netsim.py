"""Deterministic discrete-event simulator for one broadcast domain.

Events run in strict ``(at_ms, seq)`` order from a heap. Every random draw
comes from a per-purpose numpy stream split off the master seed, so the
trace is a pure function of ``(scenario, seed)``.
"""

import heapq
import logging
import math
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ROAD_CLASSES, ChannelConfig, SimConfig
from .events import to_ms
from .exceptions import NonAlternatingEdge, SchedulingInPast, SimulationError
from .trace import TraceWriter
from .utils import monitor_memory

if TYPE_CHECKING:
    from .node import Datagram, NodeOutput, NodeRuntime

logger = logging.getLogger(__name__)


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; adding streams never shifts others."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode("utf-8")),)))


@dataclass(frozen=True)
class Waypoint:
    t: float
    x: float
    y: float
    road_class: str = "urban"


class MobilityTrack:
    """Piecewise-linear motion through time-ordered waypoints.

    Before the first and after the last waypoint the vehicle stands still.
    """

    def __init__(self, waypoints: Sequence[Waypoint]):
        if not waypoints:
            raise SimulationError("a track needs at least one waypoint")
        times = [w.t for w in waypoints]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise SimulationError("waypoint times must be strictly increasing")
        for w in waypoints:
            if w.road_class not in ROAD_CLASSES:
                raise SimulationError(f"unknown road class {w.road_class!r}")
        self.waypoints = tuple(waypoints)
        self._t = np.array(times, dtype=float)
        self._x = np.array([w.x for w in waypoints], dtype=float)
        self._y = np.array([w.y for w in waypoints], dtype=float)

    @classmethod
    def stationary(cls, x: float, y: float, road_class: str = "urban") -> "MobilityTrack":
        return cls([Waypoint(0.0, x, y, road_class)])

    def position(self, t: float) -> Tuple[float, float]:
        return float(np.interp(t, self._t, self._x)), float(np.interp(t, self._t, self._y))

    def _segment(self, t: float) -> Optional[int]:
        i = int(np.searchsorted(self._t, t, side="right")) - 1
        if i < 0 or i >= len(self._t) - 1:
            return None
        return i

    def speed(self, t: float) -> float:
        """km/h on the active segment."""
        i = self._segment(t)
        if i is None:
            return 0.0
        dist = math.hypot(self._x[i + 1] - self._x[i], self._y[i + 1] - self._y[i])
        return float(dist / (self._t[i + 1] - self._t[i]) * 3.6)

    def heading(self, t: float) -> float:
        """Compass degrees, 0 = +y; 0 while standing."""
        i = self._segment(t)
        if i is None:
            return 0.0
        dx, dy = self._x[i + 1] - self._x[i], self._y[i + 1] - self._y[i]
        if dx == 0 and dy == 0:
            return 0.0
        return float(math.degrees(math.atan2(dx, dy)) % 360.0)

    def road_class(self, t: float) -> str:
        i = int(np.searchsorted(self._t, t, side="right")) - 1
        return self.waypoints[max(i, 0)].road_class


@dataclass(order=True)
class SimEvent:
    at_ms: int
    seq: int
    kind: str = field(compare=False)
    action: Callable[[], None] = field(compare=False, repr=False)
    node: str = field(default="", compare=False)


class Simulator:
    """Virtual clock, channel and node lifecycle for one scenario run."""

    def __init__(
        self,
        config: Optional[SimConfig] = None,
        channel: Optional[ChannelConfig] = None,
        seed: int = 0,
    ):
        self.config = config or SimConfig()
        self.channel = channel or ChannelConfig()
        self.seed = seed
        self.now_ms = 0
        self.trace = TraceWriter()
        self.nodes: Dict[str, "NodeRuntime"] = {}
        self.counters: Counter = Counter()
        self._queue: List[SimEvent] = []
        self._seq = 0
        self._dg = 0
        self._tick_token: Dict[str, int] = {}
        self._ticks_here: Dict[Tuple[str, int], int] = {}
        self._edges: Dict[Tuple[str, str], Tuple[int, bool]] = {}
        self._channel_rng = stream(seed, "channel")

    @property
    def now(self) -> float:
        return self.now_ms / 1000

    def rng(self, name: str) -> np.random.Generator:
        return stream(self.seed, name)

    def schedule(self, at: float, kind: str, action: Callable[[], None], node: str = "") -> SimEvent:
        at_ms = to_ms(at)
        if at_ms < self.now_ms:
            raise SchedulingInPast(f"{kind} at {at:.3f} s is before now ({self.now:.3f} s)")
        event = SimEvent(at_ms, self._seq, kind, action, node)
        self._seq += 1
        heapq.heappush(self._queue, event)
        return event

    def pending(self) -> int:
        return len(self._queue)

    # nodes and scenario directives

    def add_node(self, node: "NodeRuntime") -> None:
        if node.node_id in self.nodes:
            raise SimulationError(f"duplicate node id {node.node_id}")
        self.nodes[node.node_id] = node

    def _node(self, node_id: str) -> "NodeRuntime":
        if node_id not in self.nodes:
            raise SimulationError(f"unknown node {node_id}")
        return self.nodes[node_id]

    def _check_edge(self, node_id: str, signal: str, value: bool, at: float, initial: bool) -> None:
        last_ms, last_value = self._edges.get((node_id, signal), (-1, initial))
        if to_ms(at) < last_ms:
            raise NonAlternatingEdge(f"{signal} edges of {node_id} must be scheduled in time order")
        if value == last_value:
            state = "on" if value else "off"
            raise NonAlternatingEdge(f"{signal} of {node_id} is already {state} at {at:.3f} s")
        self._edges[(node_id, signal)] = (to_ms(at), value)

    def ignition(self, node_id: str, on: bool, t: float) -> None:
        node = self._node(node_id)
        self._check_edge(node_id, "ignition", on, t, initial=False)

        def fire():
            self.trace.emit(self.now_ms, "ign", node_id, state="on" if on else "off")
            output = node.boot(self.now) if on else node.shutdown(self.now)
            self._apply(node, output)

        self.schedule(t, "ign", fire, node_id)

    def gps(self, node_id: str, available: bool, t: float) -> None:
        node = self._node(node_id)
        self._check_edge(node_id, "gps", available, t, initial=True)

        def fire():
            self.trace.emit(self.now_ms, "gps", node_id, state="available" if available else "lost")
            node.gps_available = available

        self.schedule(t, "gps", fire, node_id)

    def battery(self, node_id: str, level: float, t: float) -> None:
        node = self._node(node_id)
        self.schedule(t, "battery", lambda: self._apply(node, node.low_battery(level, self.now)), node_id)

    def publicity(self, node_id: str, text: str, t: float) -> None:
        node = self._node(node_id)
        self.schedule(t, "publicity", lambda: self._apply(node, node.publish(text, self.now)), node_id)

    # channel

    def _resolve(self, pseu: str) -> Optional["NodeRuntime"]:
        for node in self.nodes.values():
            if node.powered and node.pseu == pseu:
                return node
        return None

    def send(self, sender: "NodeRuntime", datagram: "Datagram") -> None:
        """Put one datagram on the channel; loss and duplication are per receiver."""
        self._dg += 1
        dg = self._dg
        self.counters["sent"] += 1
        if datagram.to is None:
            receivers = [n for n in self.nodes.values() if n.powered and n is not sender]
            to = "*"
        else:
            target = self._resolve(datagram.to)
            receivers = [target] if target is not None and target is not sender else []
            to = target.node_id if receivers else "?"
        self.trace.emit(
            self.now_ms, "send", sender.node_id,
            dg=dg, hdr=datagram.code.value, pseu=datagram.pseu, to=to, len=len(datagram.payload),
        )
        if datagram.to is not None and not receivers:
            self.counters["unreachable"] += 1
            self.trace.emit(self.now_ms, "drop", sender.node_id, dg=dg, reason="unreachable")
            return

        for receiver in receivers:
            self.counters["copies"] += 1
            if self._channel_rng.random() < self.channel.loss:
                self.counters["lost"] += 1
                self.trace.emit(self.now_ms, "drop", receiver.node_id, dg=dg, reason="loss")
                continue
            self._schedule_delivery(dg, sender, receiver, datagram.payload)
            if self.channel.duplicate and self._channel_rng.random() < self.channel.duplicate:
                self.counters["duplicated"] += 1
                self.trace.emit(self.now_ms, "dup", receiver.node_id, dg=dg)
                self._schedule_delivery(dg, sender, receiver, datagram.payload)

    def _schedule_delivery(self, dg: int, sender, receiver, payload: bytes) -> None:
        delay = self.channel.latency
        if self.channel.jitter:
            delay += self.channel.jitter * float(self._channel_rng.random())
        self.counters["scheduled"] += 1
        self.schedule(
            self.now + delay,
            "deliver",
            lambda: self._deliver(dg, sender.node_id, receiver, payload),
            receiver.node_id,
        )

    def _deliver(self, dg: int, sender_id: str, receiver: "NodeRuntime", payload: bytes) -> None:
        if not receiver.powered:
            self.counters["off"] += 1
            self.trace.emit(self.now_ms, "drop", receiver.node_id, dg=dg, reason="off")
            return
        self.counters["delivered"] += 1
        output = receiver.dispatch(payload, self.now)
        kind, fields = output.receipt
        self.trace.emit(self.now_ms, kind, receiver.node_id, dg=dg, **{"from": sender_id}, **fields)
        self._apply(receiver, output)

    # node outputs and timers

    def _apply(self, node: "NodeRuntime", output: "NodeOutput") -> None:
        for kind, fields in output.records:
            self.trace.emit(self.now_ms, kind, node.node_id, **fields)
        for datagram in output.sends:
            self.send(node, datagram)
        self._reschedule(node)

    def _reschedule(self, node: "NodeRuntime") -> None:
        due = node.next_due()
        if due is None:
            self._tick_token.pop(node.node_id, None)
            return
        due = max(due, self.now)
        event = self.schedule(due, "tick", lambda: None, node.node_id)
        event.action = lambda: self._tick(node, event.seq)
        self._tick_token[node.node_id] = event.seq

    def _tick(self, node: "NodeRuntime", token: int) -> None:
        if self._tick_token.get(node.node_id) != token:
            return
        key = (node.node_id, self.now_ms)
        self._ticks_here[key] = self._ticks_here.get(key, 0) + 1
        if self._ticks_here[key] > 100:
            raise SimulationError(f"node {node.node_id} keeps asking for a tick at {self.now:.3f} s")
        self._apply(node, node.tick(self.now))

    @monitor_memory(threshold_mb=200.0)
    def run_until(self, t: float) -> TraceWriter:
        """Execute every event with ``at <= t`` in ``(at, seq)`` order."""
        until_ms = to_ms(t)
        if until_ms < self.now_ms:
            raise SchedulingInPast(f"cannot run back to {t:.3f} s")
        while self._queue and self._queue[0].at_ms <= until_ms:
            event = heapq.heappop(self._queue)
            self.now_ms = event.at_ms
            event.action()
        self.now_ms = until_ms
        return self.trace

    def audit(self) -> Dict[str, int]:
        """Datagram conservation counters; ``balanced`` is 1 when they reconcile."""
        c = self.counters
        pending = sum(1 for e in self._queue if e.kind == "deliver")
        balanced = (
            c["copies"] == c["lost"] + c["scheduled"] - c["duplicated"]
            and c["scheduled"] == c["delivered"] + c["off"] + pending
        )
        report = {key: c[key] for key in (
            "sent", "copies", "lost", "duplicated", "scheduled", "delivered", "off", "unreachable"
        )}
        report["pending"] = pending
        report["balanced"] = int(balanced)
        if not balanced:
            logger.warning(f"datagram counters do not reconcile: {report}")
        return report
