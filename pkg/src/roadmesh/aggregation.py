"""Corroboration of traffic jams among authenticated neighbours.

A jam moves through three T1 sub-types: ``I`` announces it to every
authenticated peer, ``F`` returns one nearby witness's signature to the
announcer, and ``A`` broadcasts the confirmed record with its full signature
set (or, flagged as a reject, withdraws a record whose F signature was bad).

T1 INFO layout (big-endian)::

    subtype:1 reject:1 x:8 y:8 detected_ms:8 expires_ms:8 count:2
    count * (real_id:4 sig_len:2 signature)
"""

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from typing import FrozenSet, Iterable, List, Mapping, Optional, Tuple

from .config import SimConfig
from .crypto import CryptoProvider, Identity, IdentityPublic
from .events import (
    EventKind,
    EventTable,
    InsertOutcome,
    Position,
    Signature,
    TrafficEvent,
    distance,
    encode_placed,
    placed_code,
    to_ms,
)
from .exceptions import AggregationError, SenderNotAuthenticated, SignatureReverifyFailed
from .wire import FrameCode, Outbound, info_frame

logger = logging.getLogger(__name__)

_HEAD = struct.Struct(">cBddQQH")
_SIG_HEAD = struct.Struct(">IH")
SUBTYPES = ("I", "F", "A")


@dataclass(frozen=True)
class JamNotice:
    """A decoded T1 payload."""

    subtype: str
    event: TrafficEvent
    signatures: FrozenSet[Signature] = frozenset()
    reject: bool = False


@dataclass(frozen=True)
class UncorroboratedEntry:
    event: TrafficEvent
    collected: FrozenSet[Signature]
    first_seen: float
    own: bool = False

    def signers(self) -> FrozenSet[int]:
        return frozenset(real_id for real_id, _ in self.collected)


@dataclass(frozen=True)
class AggregationState:
    """The confirmed event table plus the possible (uncorroborated) jams."""

    table: EventTable = EventTable()
    possible: Tuple[UncorroboratedEntry, ...] = ()

    def find_possible(self, key) -> Optional[UncorroboratedEntry]:
        for entry in self.possible:
            if entry.event.key == key:
                return entry
        return None

    def possible_duplicate(self, event: TrafficEvent) -> Optional[UncorroboratedEntry]:
        for entry in self.possible:
            if entry.event.same_as(event, self.table.dedup_radius):
                return entry
        return None

    def without_possible(self, event: TrafficEvent, radius: float = 0.0) -> "AggregationState":
        kept = tuple(
            e for e in self.possible
            if e.event.key != event.key and not (radius and e.event.same_as(event, radius))
        )
        return replace(self, possible=kept)

    def next_expiry(self) -> Optional[float]:
        times = [e.event.expires_at for e in self.possible]
        table_next = self.table.next_expiry()
        if table_next is not None:
            times.append(table_next)
        return min(times, default=None)


@dataclass
class AggregationContext:
    identity: Identity
    provider: CryptoProvider
    config: SimConfig
    pseu: str
    now: float
    position: Optional[Position] = None
    jam_ok: bool = False
    keyring: Mapping[int, IdentityPublic] = field(default_factory=dict)
    sender_real_id: Optional[int] = None
    forge: bool = False


@dataclass
class TableChange:
    op: str
    table: str
    event: TrafficEvent


@dataclass
class AggregationStep:
    state: AggregationState
    outgoing: List[Outbound] = field(default_factory=list)
    changes: List[TableChange] = field(default_factory=list)
    ignored: Optional[str] = None


def encode_t1(
    subtype: str,
    event: TrafficEvent,
    signatures: Iterable[Signature] = (),
    reject: bool = False,
) -> bytes:
    if subtype not in SUBTYPES:
        raise AggregationError(f"unknown T1 sub-type {subtype!r}")
    sigs = sorted(signatures)
    parts = [
        _HEAD.pack(
            subtype.encode("ascii"),
            1 if reject else 0,
            event.position[0],
            event.position[1],
            to_ms(event.detected_at),
            to_ms(event.expires_at),
            len(sigs),
        )
    ]
    for real_id, sig in sigs:
        parts.append(_SIG_HEAD.pack(real_id, len(sig)) + sig)
    return b"".join(parts)


def decode_t1(info: bytes, origin_pseu: str) -> JamNotice:
    if len(info) < _HEAD.size:
        raise AggregationError("T1 payload too short")
    sub, reject, x, y, det_ms, exp_ms, count = _HEAD.unpack(info[: _HEAD.size])
    subtype = sub.decode("ascii", errors="replace")
    if subtype not in SUBTYPES or reject not in (0, 1):
        raise AggregationError(f"bad T1 header {sub!r}/{reject}")
    if not (math.isfinite(x) and math.isfinite(y)):
        raise AggregationError("T1 position is not finite")
    offset = _HEAD.size
    sigs = set()
    for _ in range(count):
        if len(info) < offset + _SIG_HEAD.size:
            raise AggregationError("T1 signature list truncated")
        real_id, size = _SIG_HEAD.unpack(info[offset : offset + _SIG_HEAD.size])
        offset += _SIG_HEAD.size
        if len(info) < offset + size:
            raise AggregationError("T1 signature truncated")
        sigs.add((real_id, info[offset : offset + size]))
        offset += size
    if offset != len(info):
        raise AggregationError("T1 payload has trailing bytes")
    event = TrafficEvent(
        EventKind.JAM, (x, y), det_ms / 1000, exp_ms / 1000, origin_pseu, subtype=subtype
    )
    return JamNotice(subtype, event, frozenset(sigs), bool(reject))


def verify_signature(
    provider: CryptoProvider, keyring: Mapping[int, IdentityPublic], event: TrafficEvent, sig: Signature
) -> bool:
    """An unknown signer counts as an invalid signature."""
    real_id, signature = sig
    public = keyring.get(real_id)
    return public is not None and provider.verify(public, event.record_bytes(), signature)


def diff_changes(
    before: AggregationState, after: AggregationState, removed_op: str = "remove"
) -> List[TableChange]:
    """Table changes between two states, removals first."""
    tables = (
        ("possible", [e.event for e in before.possible], [e.event for e in after.possible]),
        ("confirmed", list(before.table), list(after.table)),
    )
    changes = []
    for name, old, new in tables:
        changes += [TableChange(removed_op, name, e) for e in old if e not in new]
    for name, old, new in tables:
        for e in new:
            if e not in old:
                op = "confirm" if name == "confirmed" and e.kind is EventKind.JAM else "insert"
                changes.append(TableChange(op, name, e))
    return changes


def _require_sender(ctx: AggregationContext) -> int:
    if ctx.sender_real_id is None:
        raise SenderNotAuthenticated("T1/P frames are accepted from authenticated peers only")
    return ctx.sender_real_id


def _sign(ctx: AggregationContext, event: TrafficEvent) -> Signature:
    signature = ctx.provider.sign(ctx.identity, event.record_bytes())
    if ctx.forge:
        signature = signature[:-1] + bytes([signature[-1] ^ 0xFF])
    return ctx.identity.real_id, signature


def _confirm(state: AggregationState, event: TrafficEvent, sigs, ctx) -> Tuple[AggregationState, Outbound]:
    confirmed = replace(event, signatures=frozenset(sigs), subtype="A")
    table, _ = state.table.insert(confirmed)
    state = replace(state, table=table).without_possible(confirmed, state.table.dedup_radius)
    logger.info(f"jam at {confirmed.position} confirmed by {len(confirmed.signers())} signer(s)")
    info = encode_t1("A", confirmed, confirmed.signatures)
    return state, Outbound(info_frame(FrameCode.T1, ctx.pseu, info))


def on_local_jam(
    state: AggregationState,
    event: TrafficEvent,
    ctx: AggregationContext,
    peer_pseus: Iterable[str],
) -> AggregationStep:
    """Open a corroboration cycle for a jam this node detected itself."""
    if state.table.find_duplicate(event) is not None:
        return AggregationStep(state, ignored="confirmed")
    if state.possible_duplicate(event) is not None:
        return AggregationStep(state, ignored="pending")
    before = state
    own = _sign(replace(ctx, forge=False), event)
    event = replace(event, subtype="I")
    if ctx.config.threshold <= 1:
        state, out = _confirm(state, event, {own}, ctx)
        return AggregationStep(state, [out], diff_changes(before, state))
    entry = UncorroboratedEntry(event, frozenset({own}), ctx.now, own=True)
    state = replace(state, possible=state.possible + (entry,))
    info = encode_t1("I", event, {own})
    outgoing = [Outbound(info_frame(FrameCode.T1, ctx.pseu, info), to=peer) for peer in peer_pseus]
    return AggregationStep(state, outgoing, diff_changes(before, state))


def on_receive_I(state: AggregationState, notice: JamNotice, ctx: AggregationContext) -> AggregationStep:
    """Sign a nearby announcement when this node is also stuck."""
    sender = _require_sender(ctx)
    event = notice.event
    if not event.is_live(ctx.now):
        return AggregationStep(state, ignored="expired")
    if state.table.find_duplicate(event) is not None:
        return AggregationStep(state, ignored="confirmed")
    if not any(
        real_id == sender
        and verify_signature(ctx.provider, ctx.keyring, event, (real_id, sig))
        for real_id, sig in notice.signatures
    ):
        return AggregationStep(state, ignored="bad_origin_signature")
    if ctx.position is None or distance(ctx.position, event.position) > ctx.config.aggregation_radius:
        return AggregationStep(state, ignored="out_of_range")
    if not ctx.jam_ok:
        return AggregationStep(state, ignored="not_jammed")

    before = state
    existing = state.possible_duplicate(event)
    fresh = UncorroboratedEntry(event, frozenset(), ctx.now)
    if existing is None:
        state = replace(state, possible=state.possible + (fresh,))
    elif existing.event.key != event.key and event.detected_at > existing.event.detected_at:
        # the older record and its signatures give way to the newer one
        state = state.without_possible(existing.event)
        state = replace(state, possible=state.possible + (fresh,))

    reply = info_frame(FrameCode.T1, ctx.pseu, encode_t1("F", event, {_sign(ctx, event)}))
    return AggregationStep(state, [Outbound(reply, to=event.origin_pseu)], diff_changes(before, state))


def on_receive_F(state: AggregationState, notice: JamNotice, ctx: AggregationContext) -> AggregationStep:
    sender = _require_sender(ctx)
    entry = state.find_possible(notice.event.key)
    if entry is None or not entry.own:
        return AggregationStep(state, ignored="unknown_entry")
    before = state
    valid = len(notice.signatures) == 1 and all(
        real_id == sender
        and verify_signature(ctx.provider, ctx.keyring, entry.event, (real_id, sig))
        for real_id, sig in notice.signatures
    )
    if not valid:
        logger.warning(f"invalid F signature from real id {sender}; withdrawing jam")
        state = state.without_possible(entry.event)
        info = encode_t1("A", entry.event, (), reject=True)
        out = Outbound(info_frame(FrameCode.T1, ctx.pseu, info))
        return AggregationStep(state, [out], diff_changes(before, state, "reject"))

    collected = entry.collected | notice.signatures
    if len({real_id for real_id, _ in collected}) >= ctx.config.threshold:
        state, out = _confirm(state, entry.event, collected, ctx)
        return AggregationStep(state, [out], diff_changes(before, state))
    if collected == entry.collected:
        return AggregationStep(state, ignored="duplicate_signer")
    updated = replace(entry, collected=collected)
    possible = tuple(updated if e is entry else e for e in state.possible)
    return AggregationStep(replace(state, possible=possible))


def on_receive_A(state: AggregationState, notice: JamNotice, ctx: AggregationContext) -> AggregationStep:
    _require_sender(ctx)
    event = notice.event
    before = state
    if notice.reject:
        if state.find_possible(event.key) is None:
            return AggregationStep(state, ignored="unknown_entry")
        state = state.without_possible(event)
        return AggregationStep(state, changes=diff_changes(before, state))

    signers = {real_id for real_id, _ in notice.signatures}
    if not all(verify_signature(ctx.provider, ctx.keyring, event, sig) for sig in notice.signatures):
        raise SignatureReverifyFailed("aggregated confirmation carries an invalid signature")
    if len(signers) < ctx.config.threshold:
        raise SignatureReverifyFailed(
            f"aggregated confirmation has {len(signers)} signer(s), {ctx.config.threshold} needed"
        )
    if not event.is_live(ctx.now):
        return AggregationStep(state, ignored="expired")
    confirmed = replace(event, signatures=notice.signatures, subtype="A")
    table, outcome = state.table.insert(confirmed)
    if outcome is InsertOutcome.DUPLICATE:
        return AggregationStep(state, ignored="duplicate")
    state = replace(state, table=table).without_possible(confirmed, state.table.dedup_radius)
    return AggregationStep(state, changes=diff_changes(before, state))


def on_receive_P(state: AggregationState, event: TrafficEvent, ctx: AggregationContext) -> AggregationStep:
    _require_sender(ctx)
    if not event.is_live(ctx.now):
        return AggregationStep(state, ignored="expired")
    table, outcome = state.table.insert(event)
    if outcome is InsertOutcome.DUPLICATE:
        return AggregationStep(state, ignored="duplicate")
    after = replace(state, table=table)
    return AggregationStep(after, changes=diff_changes(state, after))


def expire_all(state: AggregationState, now: float) -> Tuple[AggregationState, List[TableChange]]:
    table, _ = state.table.expire(now)
    possible = tuple(e for e in state.possible if e.event.is_live(now))
    after = AggregationState(table, possible)
    return after, diff_changes(state, after, "expire")


def stored_event_frames(state: AggregationState, pseu: str, peer: str, now: float) -> List[Outbound]:
    """The live events handed to a freshly authenticated peer."""
    frames = []
    for event in state.table.live(now):
        if event.kind is EventKind.JAM:
            info = encode_t1("A", event, event.signatures)
            frames.append(Outbound(info_frame(FrameCode.T1, pseu, info), to=peer))
        else:
            frames.append(Outbound(info_frame(placed_code(event), pseu, encode_placed(event)), to=peer))
    return frames
