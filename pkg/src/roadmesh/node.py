"""Per-vehicle runtime: frame dispatch, timers, and the databases a node owns.

A node is driven by the simulator. Each entry point (``dispatch``, ``tick``,
``boot``, ``shutdown``, ``low_battery``, ``publish``) returns a
``NodeOutput`` with the datagrams to send and the trace records to emit; the
node never touches the channel or the trace itself.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from . import wire
from .aggregation import (
    AggregationContext,
    AggregationState,
    AggregationStep,
    TableChange,
    diff_changes,
    decode_t1,
    encode_t1,
    expire_all,
    on_local_jam,
    on_receive_A,
    on_receive_F,
    on_receive_I,
    on_receive_P,
    stored_event_frames,
)
from .auth import (
    AcquaintanceDb,
    AuthContext,
    AuthSession,
    AuthStep,
    LocalEvent,
    PseudonymManager,
    RetransmitAction,
    SessionState,
    make_beacon,
    on_frame,
    release_binding,
    retransmit_policy,
    rotate,
)
from .config import SimConfig
from .crypto import CryptoProvider, Identity, IdentityPublic, SessionKeys
from .events import (
    EventKind,
    EventTable,
    ParkedStore,
    Position,
    SpeedSample,
    TrafficEvent,
    decode_placed,
    detect_jam,
    encode_placed,
    make_publicity,
    on_ignition_off,
    on_ignition_on,
    placed_code,
    quantize,
    to_ms,
)
from .exceptions import (
    AggregationError,
    EventError,
    NoGpsFix,
    SenderNotAuthenticated,
    SimulationError,
)
from .netsim import MobilityTrack
from .wire import Frame, FrameCode, Outbound

logger = logging.getLogger(__name__)

Fields = Dict[str, Any]

_T1_HANDLERS = {"I": on_receive_I, "F": on_receive_F, "A": on_receive_A}


@dataclass
class NodeSpec:
    """Everything a scenario says about one vehicle."""

    node_id: str
    identity: Identity
    acquaintances: List[IdentityPublic] = field(default_factory=list)
    battery: float = 100.0
    forge: bool = False
    track: Optional[MobilityTrack] = None


@dataclass(frozen=True)
class Datagram:
    payload: bytes
    to: Optional[str]
    code: FrameCode
    pseu: str


@dataclass
class NodeOutput:
    sends: List[Datagram] = field(default_factory=list)
    records: List[Tuple[str, Fields]] = field(default_factory=list)
    receipt: Optional[Tuple[str, Fields]] = None


class NodeRuntime:
    """One vehicle's protocol stack, multiplexed on the simulator loop."""

    def __init__(
        self,
        spec: NodeSpec,
        config: SimConfig,
        keys: SessionKeys,
        provider: CryptoProvider,
        rng: np.random.Generator,
        zkp_rng: np.random.Generator,
    ):
        self.spec = spec
        self.node_id = spec.node_id
        self.identity = spec.identity
        self.config = config
        self.keys = keys
        self.provider = provider
        self.rng = rng
        self.zkp_rng = zkp_rng

        self.db = AcquaintanceDb.from_identities(spec.acquaintances)
        self.pseudonyms = PseudonymManager(rng, config.rotation_period)
        self.session: Optional[AuthSession] = None
        self.session_id: Optional[str] = None
        self.cooldowns: Dict[str, float] = {}
        self.agg = AggregationState(EventTable(dedup_radius=config.dedup_radius))
        self.parked = ParkedStore()
        self.samples: List[SpeedSample] = []

        self.powered = False
        self.gps_available = True
        self.battery = spec.battery
        self.next_beacon: Optional[float] = None
        self.next_sample: Optional[float] = None
        self.last_jam_announce: Optional[float] = None
        self.parse_failures = 0
        self._sessions_started = 0

    @property
    def pseu(self) -> str:
        """Pseudonym currently used on the air."""
        return self.pseudonyms.current

    def position(self, now: float) -> Optional[Position]:
        """GPS fix at ``now``; None without GPS or track."""
        if not self.gps_available or self.spec.track is None:
            return None
        return self.spec.track.position(now)

    def next_due(self) -> Optional[float]:
        """Earliest time the node wants a tick, or None while off."""
        if not self.powered:
            return None
        times = [self.next_beacon, self.next_sample, self.agg.next_expiry()]
        if self.session is not None and self.session.active:
            times.append(self.session.deadline)
        return min((t for t in times if t is not None), default=None)

    # receiving

    def dispatch(self, data: bytes, now: float) -> NodeOutput:
        """Handle one received datagram; the receipt is always set."""
        out = NodeOutput()
        try:
            frame = wire.parse(data)
        except ValueError as exc:
            self.parse_failures += 1
            logger.debug(f"{self.node_id}: unparseable datagram ({exc})")
            out.receipt = ("drop", {"reason": "parse"})
            return out

        fields: Fields = {"hdr": frame.code.value, "pseu": frame.pseu}
        if frame.code is FrameCode.BEACON or frame.code.is_auth:
            self._dispatch_auth(frame, now, out, fields)
        else:
            self._dispatch_event(frame, now, out, fields)
        return out

    def _dispatch_auth(self, frame: Frame, now: float, out: NodeOutput, fields: Fields) -> None:
        """Beacons and D/Z/E frames go through the session state machine."""
        before = self.session
        step = on_frame(before, self.db, frame, now, self._auth_ctx(now))
        self.db = step.db
        out.receipt = ("recv", self._with_ignored(fields, step.ignored))
        if step.ignored:
            logger.debug(f"{self.node_id}: {frame.code.value} from {frame.pseu} ignored ({step.ignored})")
        self._apply_auth(before, step, now, out, frame.code.value)

    def _dispatch_event(self, frame: Frame, now: float, out: NodeOutput, fields: Fields) -> None:
        """T1 and P frames go to aggregation; only authenticated senders count."""
        entry = self.db.by_pseu(frame.pseu)
        sender = entry.real_id if entry is not None and entry.authenticated else None
        ctx = self._agg_ctx(now, sender)
        try:
            if frame.code is FrameCode.T1:
                notice = decode_t1(frame.info, frame.pseu)
                fields["sub"] = notice.subtype
                step = _T1_HANDLERS[notice.subtype](self.agg, notice, ctx)
            else:
                step = on_receive_P(self.agg, decode_placed(frame.code, frame.info, frame.pseu), ctx)
        except SenderNotAuthenticated:
            logger.warning(f"{self.node_id}: {frame.code.value} from unauthenticated {frame.pseu} dropped")
            out.receipt = ("drop", {**fields, "reason": "unauth"})
            return
        except (AggregationError, EventError, ValueError) as exc:
            logger.warning(f"{self.node_id}: {frame.code.value} from {frame.pseu} rejected: {exc}")
            out.receipt = ("drop", {**fields, "reason": type(exc).__name__})
            return
        out.receipt = ("recv", self._with_ignored(fields, step.ignored))
        self._apply_aggregation(step, out)

    @staticmethod
    def _with_ignored(fields: Fields, ignored: Optional[str]) -> Fields:
        return {**fields, "ignored": ignored} if ignored else fields

    # auth bookkeeping

    def _auth_ctx(self, now: float) -> AuthContext:
        return AuthContext(
            self.identity,
            self.keys,
            self.provider,
            self.config,
            self.zkp_rng,
            self.pseu,
            stored_events=len(self.agg.table.live(now)),
            cooldowns=self.cooldowns,
        )

    def _is_new_session(self, before: Optional[AuthSession], after: Optional[AuthSession]) -> bool:
        if after is None or after.state not in (SessionState.SENT_D1, SessionState.SENT_D2):
            return False
        return before is None or before.state is not after.state or before.role is not after.role

    def _apply_auth(
        self, before: Optional[AuthSession], step: AuthStep, now: float, out: NodeOutput, code: str
    ) -> None:
        """Record the transition, number new sessions and send what the step produced."""
        after = step.session
        prev = step.prev_state.value if step.prev_state else "Idle"
        if self._is_new_session(before, after):
            if before is not None and before.active:
                # replaced by the peer's own initiation
                out.records.append(
                    ("state", {"sess": self.session_id, "prev": before.state.value,
                               "state": SessionState.ABORTED.value, "reason": "tie_break"})
                )
            self._sessions_started += 1
            self.session_id = f"{self.node_id}.{self._sessions_started}"
            prev = "Idle"
        self.session = after

        if step.transitioned:
            record: Fields = {
                "sess": self.session_id, "prev": prev, "state": after.state.value, "frame": code
            }
            if after.state is SessionState.ABORTED:
                record["reason"] = after.reason
                if after.bound:
                    record["unbound"] = after.peer_identity.real_id
                self.cooldowns[after.peer_pseu] = quantize(now + self.config.retry_cooldown)
            if LocalEvent.AUTHENTICATED in step.events and after.peer_identity is not None:
                record["peer"] = after.peer_identity.real_id
            out.records.append(("state", record))

        for outbound in step.outgoing:
            self._send(out, outbound)
        if LocalEvent.SEND_EVENTS in step.events and after is not None:
            self._share_events(after.peer_pseu, now, out)

    def _share_events(self, peer: str, now: float, out: NodeOutput) -> None:
        """Hand a freshly authenticated peer the stored events and pending jams."""
        for outbound in stored_event_frames(self.agg, self.pseu, peer, now):
            self._send(out, outbound)
        own_id = self.identity.real_id
        for entry in self.agg.possible:
            if not entry.own or not entry.event.is_live(now):
                continue
            own = {sig for sig in entry.collected if sig[0] == own_id}
            info = encode_t1("I", entry.event, own)
            self._send(out, Outbound(wire.info_frame(FrameCode.T1, self.pseu, info), to=peer))

    # aggregation bookkeeping

    def _agg_ctx(self, now: float, sender: Optional[int] = None) -> AggregationContext:
        """Aggregation view of this node at ``now``; the keyring includes ourselves."""
        keyring = {**self.db.keyring(), self.identity.real_id: self.identity.public}
        return AggregationContext(
            self.identity,
            self.provider,
            self.config,
            self.pseu,
            now,
            position=self.position(now),
            jam_ok=detect_jam(self.samples, self.config),
            keyring=keyring,
            sender_real_id=sender,
            forge=self.spec.forge,
        )

    def _apply_aggregation(self, step: AggregationStep, out: NodeOutput) -> None:
        self.agg = step.state
        for change in step.changes:
            out.records.append(("event", self._event_fields(change)))
        for outbound in step.outgoing:
            self._send(out, outbound)

    def _event_fields(self, change: TableChange) -> Fields:
        e = change.event
        fields: Fields = {
            "op": change.op,
            "table": change.table,
            "ev": e.kind.value,
            "x": f"{e.position[0]:.1f}",
            "y": f"{e.position[1]:.1f}",
            "det": f"{e.detected_at:.3f}",
            "exp": f"{e.expires_at:.3f}",
            "sigs": len(e.signatures),
            "sub": e.subtype or "-",
        }
        if change.op == "confirm":
            fields["need"] = self.config.threshold
        return fields

    # sending

    def _send(self, out: NodeOutput, outbound: Outbound) -> None:
        frame = outbound.frame
        payload = wire.serialize(frame)
        if self.config.debug_reparse and wire.parse(payload) != frame:
            raise SimulationError(f"{self.node_id}: {frame.code.value} frame does not survive a re-parse")
        out.sends.append(Datagram(payload, outbound.to, frame.code, frame.pseu))

    # timers

    def tick(self, now: float) -> NodeOutput:
        """Fire everything due at ``now``: retransmissions, expiry, sampling, beacons."""
        out = NodeOutput()
        if not self.powered:
            return out
        self._retransmit(now, out)
        self._expire(now, out)
        if self.next_sample is not None and to_ms(now) >= to_ms(self.next_sample):
            self._sample(now)
            self._announce_jam(now, out)
        if self.next_beacon is not None and to_ms(now) >= to_ms(self.next_beacon):
            self._beacon(now, out)
        return out

    def _retransmit(self, now: float, out: NodeOutput) -> None:
        """Resend on a missed deadline; past the limit abort and drop any binding."""
        if self.session is None or not self.session.active:
            return
        prev = self.session.state
        action, self.session = retransmit_policy(self.session, now, self.config)
        if action is RetransmitAction.RESEND:
            out.records.append(
                ("timer", {"action": "resend", "sess": self.session_id, "count": self.session.resend_count})
            )
            self._send(out, Outbound(self.session.last_sent, to=self.session.peer_pseu))
        elif action is RetransmitAction.ABORT:
            out.records.append(("timer", {"action": "abort", "sess": self.session_id}))
            out.records.append(("state", self._aborted_record(prev, self.session.reason)))
            self.db = release_binding(self.db, self.session)
            self.cooldowns[self.session.peer_pseu] = quantize(now + self.config.retry_cooldown)

    def _aborted_record(self, prev: SessionState, reason: str) -> Fields:
        record: Fields = {"sess": self.session_id, "prev": prev.value,
                          "state": SessionState.ABORTED.value, "reason": reason}
        if self.session.bound:
            record["unbound"] = self.session.peer_identity.real_id
        return record

    def _expire(self, now: float, out: NodeOutput) -> None:
        self.agg, changes = expire_all(self.agg, now)
        for change in changes:
            out.records.append(("event", self._event_fields(change)))

    def _sample(self, now: float) -> None:
        """Take a speed sample and keep only the last jam window."""
        self.next_sample = quantize(now + self.config.sample_interval)
        track = self.spec.track
        if track is None or self.position(now) is None:
            self.samples = []
            return
        self.samples.append(SpeedSample(track.speed(now), track.road_class(now), track.heading(now), now))
        horizon = to_ms(now) - to_ms(self.config.jam_window)
        self.samples = [s for s in self.samples if to_ms(s.at) >= horizon]

    def _announce_jam(self, now: float, out: NodeOutput) -> None:
        """Announce a locally detected jam to the authenticated peers."""
        cfg = self.config
        if self.spec.forge or not cfg.jam_detection:
            return
        if self.last_jam_announce is not None and now - self.last_jam_announce < cfg.jam_window:
            return
        peers = [p.current_pseu for p in self.db.authenticated_peers()]
        if cfg.threshold > 1 and not peers:
            return
        if not detect_jam(self.samples, cfg):
            return
        position = self.position(now)
        event = TrafficEvent(EventKind.JAM, position, now, now + cfg.jam_validity, self.pseu)
        self.last_jam_announce = now
        step = on_local_jam(self.agg, event, self._agg_ctx(now), peers)
        if step.ignored:
            logger.debug(f"{self.node_id}: local jam not announced ({step.ignored})")
            return
        logger.info(f"{self.node_id}: jam detected at ({position[0]:.1f}, {position[1]:.1f})")
        self._apply_aggregation(step, out)

    def _beacon(self, now: float, out: NodeOutput) -> None:
        """Send a beacon, rotating the pseudonym first when due and idle."""
        date = self.config.wall_clock(now)
        if self.pseudonyms.rotation_due and not (self.session is not None and self.session.active):
            peers = [p.current_pseu for p in self.db.authenticated_peers()]
            old = self.pseu
            new, changes = rotate(self.pseudonyms, self.keys, self.provider, peers, date)
            out.records.append(("timer", {"action": "rotate", "old": old, "new": new, "peers": len(peers)}))
            for outbound in changes:
                self._send(out, outbound)
            # a finished session still answers duplicates under the old pseudonym
            self.session = None
        frame = make_beacon(self.pseudonyms, self.identity, self.keys, self.provider, date)
        out.records.append(("timer", {"action": "beacon", "pseu": frame.pseu}))
        self._send(out, Outbound(frame))
        interval = float(self.rng.uniform(self.config.beacon_min, self.config.beacon_max))
        self.next_beacon = quantize(now + interval)

    # lifecycle

    def boot(self, now: float) -> NodeOutput:
        """Ignition on: join the channel unless the battery is already too low."""
        out = NodeOutput()
        if self.battery <= self.config.battery_threshold:
            logger.warning(f"{self.node_id}: battery at {self.battery}%, staying off")
            out.records.append(("state", {"state": "off", "reason": "battery"}))
            return out
        self.powered = True
        self.samples = []
        self.next_sample = quantize(now)
        interval = float(self.rng.uniform(self.config.beacon_min, self.config.beacon_max))
        self.next_beacon = quantize(now + interval)
        out.records.append(("state", {"state": "on", "pseu": self.pseu, "net": self.config.network_name}))

        before = self.agg
        outcome = on_ignition_on(
            self.gps_available,
            self.position(now),
            now,
            self.config,
            self.agg.table,
            self.pseu,
            has_peers=bool(self.db.authenticated_peers()),
        )
        self.agg = replace(self.agg, table=outcome.table)
        for change in diff_changes(before, self.agg):
            out.records.append(("event", self._event_fields(change)))
        for outbound in outcome.outgoing:
            self._send(out, outbound)
        return out

    def shutdown(self, now: float, reason: str = "ignition") -> NodeOutput:
        """Leave the channel; on ignition off also remember where the car stands."""
        out = NodeOutput()
        if not self.powered:
            return out
        if self.session is not None and self.session.active:
            out.records.append(("state", self._aborted_record(self.session.state, reason)))
            self.session = replace(self.session, state=SessionState.ABORTED, deadline=None, reason=reason)
            self.db = release_binding(self.db, self.session)
        if reason == "ignition":
            try:
                spot = on_ignition_off(self.position(now), now, self.parked)
                out.records.append(
                    ("event", {"op": "park", "x": f"{spot.position[0]:.1f}", "y": f"{spot.position[1]:.1f}"})
                )
            except NoGpsFix:
                pass
        self.powered = False
        self.next_beacon = None
        self.next_sample = None
        self.samples = []
        out.records.append(("state", {"state": "off", "reason": reason}))
        return out

    def low_battery(self, level: float, now: float) -> NodeOutput:
        """Battery report; at or below the threshold the node shuts down."""
        self.battery = level
        if level <= self.config.battery_threshold and self.powered:
            logger.warning(f"{self.node_id}: battery at {level}%, shutting down")
            return self.shutdown(now, reason="battery")
        return NodeOutput()

    def publish(self, text: str, now: float) -> NodeOutput:
        """Place a publicity event here and send it to the authenticated peers."""
        out = NodeOutput()
        position = self.position(now)
        if not self.powered or position is None:
            logger.warning(f"{self.node_id}: cannot place publicity while off or without GPS")
            return out
        event = make_publicity(position, now, text, self.pseu, self.config)
        table, _ = self.agg.table.insert(event)
        before = self.agg
        self.agg = replace(self.agg, table=table)
        for change in diff_changes(before, self.agg):
            out.records.append(("event", self._event_fields(change)))
        info = wire.info_frame(placed_code(event), self.pseu, encode_placed(event))
        for peer in self.db.authenticated_peers():
            self._send(out, Outbound(info, to=peer.current_pseu))
        return out

    # queries

    def table_rows(self) -> List[Tuple[str, str]]:
        """Both event tables as sorted ``(table, line)`` rows."""
        rows = [("confirmed", e.describe()) for e in self.agg.table]
        rows += [("possible", entry.event.describe()) for entry in self.agg.possible]
        return sorted(rows)

    def find_parked(self) -> Optional[Position]:
        """Where the car was last parked."""
        return self.parked.find_parked()
