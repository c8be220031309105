"""Mutual authentication sessions, the acquaintance database and pseudonyms.

The node that hears a beacon becomes the initiator (the prover); the beacon's
sender is the responder (the verifier). Frame order with two rounds::

    01 D1 D2 D3 D4 D5 Z2 Z3 Z4 E1 E2 E3 E4 E5 E6

Every handler is a pure transition ``(session, db, frame, now) -> AuthStep``;
the node runtime owns the resulting state.
"""

import hmac
import logging
import struct
from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from . import zkp
from .config import SimConfig
from .crypto import CryptoProvider, Identity, IdentityPublic, SessionKeys, validate_public_key
from .events import quantize
from .exceptions import (
    AuthError,
    CryptoError,
    GraphError,
    HashMismatch,
    NoCommonAcquaintance,
    ZkpCheckFailed,
    ZkpError,
)
from .wire import (
    BeaconBody,
    ChangePseuBody,
    Frame,
    FrameCode,
    Outbound,
    format_date,
    info_frame,
)

logger = logging.getLogger(__name__)

_COUNT = struct.Struct(">H")
_ID = struct.Struct(">I")
_PUBKEY = struct.Struct(">H")
_ACK_COUNT = struct.Struct(">BI")
_MARKER = b"\x01"


class Role(str, Enum):
    INITIATOR = "initiator"
    RESPONDER = "responder"


class SessionState(str, Enum):
    IDLE = "Idle"
    SENT_D1 = "SentD1"
    SENT_D2 = "SentD2"
    SENT_D3 = "SentD3"
    SENT_D4 = "SentD4"
    SENT_D5 = "SentD5"
    AWAIT_Z2 = "AwaitZ2"
    AWAIT_Z3 = "AwaitZ3"
    AWAIT_Z4 = "AwaitZ4"
    AWAIT_E1 = "AwaitE1"
    AWAIT_E2 = "AwaitE2"
    AWAIT_E3 = "AwaitE3"
    AWAIT_E4 = "AwaitE4"
    AWAIT_E5 = "AwaitE5"
    AWAIT_E6 = "AwaitE6"
    DONE = "Done"
    ABORTED = "Aborted"

    @property
    def terminal(self) -> bool:
        """Done and Aborted accept no further frames."""
        return self in (SessionState.DONE, SessionState.ABORTED)


class RetransmitAction(str, Enum):
    NONE = "none"
    RESEND = "resend"
    ABORT = "abort"


class LocalEvent(str, Enum):
    AUTHENTICATED = "authenticated"
    SEND_EVENTS = "send_events"


# (role, state) -> the only frame that advances it
_EXPECTED: Dict[Tuple[Role, SessionState], FrameCode] = {
    (Role.INITIATOR, SessionState.SENT_D1): FrameCode.D2,
    (Role.INITIATOR, SessionState.SENT_D3): FrameCode.D4,
    (Role.INITIATOR, SessionState.AWAIT_Z2): FrameCode.Z2,
    (Role.INITIATOR, SessionState.AWAIT_Z4): FrameCode.Z4,
    (Role.INITIATOR, SessionState.AWAIT_E2): FrameCode.E2,
    (Role.INITIATOR, SessionState.AWAIT_E4): FrameCode.E4,
    (Role.INITIATOR, SessionState.AWAIT_E6): FrameCode.E6,
    (Role.RESPONDER, SessionState.SENT_D2): FrameCode.D3,
    (Role.RESPONDER, SessionState.SENT_D4): FrameCode.D5,
    (Role.RESPONDER, SessionState.AWAIT_Z3): FrameCode.Z3,
    (Role.RESPONDER, SessionState.AWAIT_E1): FrameCode.E1,
    (Role.RESPONDER, SessionState.AWAIT_E3): FrameCode.E3,
    (Role.RESPONDER, SessionState.AWAIT_E5): FrameCode.E5,
}


@dataclass(frozen=True)
class AcquaintanceEntry:
    real_id: int
    public_key: int
    current_pseu: Optional[str] = None
    authenticated: bool = False
    last_seen: Optional[float] = None
    verify_key: bytes = b""
    key_uid: int = 0

    def public(self) -> IdentityPublic:
        """The entry as a public identity, for keyrings and signatures."""
        return IdentityPublic(self.real_id, self.key_uid, self.public_key, self.verify_key)


@dataclass(frozen=True)
class AcquaintanceDb:
    """Known identities keyed by real_id; updates return a new database."""

    entries: Tuple[AcquaintanceEntry, ...] = ()

    @classmethod
    def from_identities(cls, publics: Iterable[IdentityPublic]) -> "AcquaintanceDb":
        """Seed a database with acquaintances known before the first drive."""
        db = cls()
        for pub in publics:
            db = db._put(
                AcquaintanceEntry(
                    pub.real_id, pub.public_key, verify_key=pub.verify_key, key_uid=pub.key_uid
                )
            )
        return db

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, real_id: int) -> Optional[AcquaintanceEntry]:
        """Entry for ``real_id``, or None."""
        for entry in self.entries:
            if entry.real_id == real_id:
                return entry
        return None

    def by_pseu(self, pseu: str) -> Optional[AcquaintanceEntry]:
        """Entry currently bound to ``pseu``, or None."""
        for entry in self.entries:
            if entry.current_pseu == pseu:
                return entry
        return None

    def ids(self) -> List[int]:
        """The acquaintance list sent in D3, ascending."""
        return sorted(entry.real_id for entry in self.entries)

    def authenticated_peers(self) -> List[AcquaintanceEntry]:
        """Authenticated entries with a known current pseudonym."""
        return [e for e in self.entries if e.authenticated and e.current_pseu]

    def is_authenticated(self, pseu: str) -> bool:
        """True when ``pseu`` belongs to an authenticated peer."""
        entry = self.by_pseu(pseu)
        return entry is not None and entry.authenticated

    def keyring(self) -> Dict[int, IdentityPublic]:
        """Signature verification keys by real_id."""
        return {e.real_id: e.public() for e in self.entries if e.verify_key}

    def _put(self, entry: AcquaintanceEntry) -> "AcquaintanceDb":
        kept = []
        for other in self.entries:
            if other.real_id == entry.real_id:
                continue
            if entry.current_pseu and other.current_pseu == entry.current_pseu:
                other = replace(other, current_pseu=None)
            kept.append(other)
        kept.append(entry)
        return AcquaintanceDb(tuple(sorted(kept, key=lambda e: e.real_id)))

    def mark_authenticated(self, peer: IdentityPublic, pseu: str, now: float) -> "AcquaintanceDb":
        """Bind ``peer`` to ``pseu`` and flag it authenticated."""
        entry = AcquaintanceEntry(
            peer.real_id,
            peer.public_key,
            current_pseu=pseu,
            authenticated=True,
            last_seen=now,
            verify_key=peer.verify_key,
            key_uid=peer.key_uid,
        )
        return self._put(entry)

    def touch(self, pseu: str, now: float) -> "AcquaintanceDb":
        """Refresh last_seen for whoever holds ``pseu``."""
        entry = self.by_pseu(pseu)
        if entry is None:
            return self
        return self._put(replace(entry, last_seen=now))

    def rebind(self, real_id: int, pseu: str, now: float) -> "AcquaintanceDb":
        """Follow a peer to its new pseudonym."""
        entry = self.get(real_id)
        if entry is None:
            return self
        return self._put(replace(entry, current_pseu=pseu, last_seen=now))

    def restore(self, real_id: int, prior: Optional[AcquaintanceEntry]) -> "AcquaintanceDb":
        """Put back ``prior`` for ``real_id`` (or forget it), keeping the newest last_seen."""
        current = self.get(real_id)
        if prior is None:
            return AcquaintanceDb(tuple(e for e in self.entries if e.real_id != real_id))
        seen = [t for t in (prior.last_seen, current.last_seen if current else None) if t is not None]
        return self._put(replace(prior, last_seen=max(seen, default=None)))


class PseudonymManager:
    """Current pseudonym, the beacon counter and every pseudonym used so far."""

    def __init__(self, rng: np.random.Generator, rotation_period: int = 10):
        self.rng = rng
        self.rotation_period = rotation_period
        self.used = set()
        self.current = self._fresh()
        self.beacons_sent_since_change = 0

    def _fresh(self) -> str:
        while True:
            pseu = f"{int(self.rng.integers(0, 1 << 32)):08x}"
            if pseu not in self.used:
                self.used.add(pseu)
                return pseu

    @property
    def rotation_due(self) -> bool:
        """True once ``rotation_period`` beacons went out under the current pseudonym."""
        return self.beacons_sent_since_change >= self.rotation_period

    def advance(self) -> str:
        """Switch to a fresh pseudonym never used before and return it."""
        self.current = self._fresh()
        self.beacons_sent_since_change = 0
        return self.current


def make_beacon(
    pm: PseudonymManager,
    identity: Identity,
    keys: SessionKeys,
    provider: CryptoProvider,
    date: datetime,
) -> Frame:
    """Beacon under the current pseudonym; CTA encrypts real_id, key uid and date."""
    stamp = format_date(date)
    cta = provider.encrypt(keys, f"{identity.real_id}:{identity.key_uid}:{stamp}".encode("ascii"))
    pm.beacons_sent_since_change += 1
    return Frame(FrameCode.BEACON, pm.current, BeaconBody(date, cta))


def rotate(
    pm: PseudonymManager,
    keys: SessionKeys,
    provider: CryptoProvider,
    peer_pseus: Iterable[str],
    date: datetime,
) -> Tuple[str, List[Outbound]]:
    """Switch to a new pseudonym, telling each authenticated peer by unicast."""
    old = pm.current
    new = pm.advance()
    stamp = format_date(date)
    outgoing = []
    for peer in peer_pseus:
        cta2 = provider.encrypt(keys, f"00:{stamp}:{new}".encode("ascii"))
        outgoing.append(Outbound(Frame(FrameCode.BEACON, old, ChangePseuBody(date, new, cta2)), to=peer))
    logger.info(f"pseudonym {old} -> {new}, notified {len(outgoing)} peer(s)")
    return new, outgoing


@dataclass(frozen=True)
class AuthSession:
    role: Role
    peer_pseu: str
    state: SessionState
    common_id: Optional[int] = None
    peer_list_hash: bytes = b""
    witness: Optional[zkp.Witness] = None
    commitment: Optional[zkp.Commitment] = None
    challenge: Optional[int] = None
    round: int = 0
    resend_count: int = 0
    deadline: Optional[float] = None
    last_sent: Optional[Frame] = None
    last_received: Optional[Frame] = None
    peer_identity: Optional[IdentityPublic] = None
    reason: str = ""
    # the peer entry as it was before E3/E4 bound it; an abort puts it back
    bound: bool = False
    prior_entry: Optional[AcquaintanceEntry] = None

    @property
    def active(self) -> bool:
        return not self.state.terminal


@dataclass
class AuthContext:
    """What a node lends the state machine for one transition."""

    identity: Identity
    keys: SessionKeys
    provider: CryptoProvider
    config: SimConfig
    rng: np.random.Generator
    pseu: str
    stored_events: int = 0
    cooldowns: Mapping[str, float] = field(default_factory=dict)


@dataclass
class AuthStep:
    session: Optional[AuthSession]
    db: AcquaintanceDb
    outgoing: List[Outbound] = field(default_factory=list)
    events: List[LocalEvent] = field(default_factory=list)
    prev_state: Optional[SessionState] = None
    ignored: Optional[str] = None

    @property
    def transitioned(self) -> bool:
        return self.session is not None and self.session.state is not self.prev_state


def encode_ids(ids: Iterable[int]) -> bytes:
    """Canonical acquaintance list: count, then real_ids ascending."""
    ordered = sorted(set(ids))
    return _COUNT.pack(len(ordered)) + b"".join(_ID.pack(i) for i in ordered)


def decode_ids(data: bytes) -> List[int]:
    """Inverse of :func:`encode_ids`; refuses unsorted or duplicated ids."""
    if len(data) < _COUNT.size:
        raise AuthError("acquaintance list too short")
    (count,) = _COUNT.unpack(data[: _COUNT.size])
    body = data[_COUNT.size :]
    if len(body) != count * _ID.size:
        raise AuthError("acquaintance list length does not match its count")
    ids = [_ID.unpack(body[k : k + _ID.size])[0] for k in range(0, len(body), _ID.size)]
    if ids != sorted(set(ids)):
        raise AuthError("acquaintance list is not strictly ascending")
    return ids


def on_frame(
    session: Optional[AuthSession],
    db: AcquaintanceDb,
    frame: Frame,
    now: float,
    ctx: AuthContext,
) -> AuthStep:
    """Advance at most one session by one frame (beacon, change or D/Z/E)."""
    if frame.code is FrameCode.BEACON:
        if isinstance(frame.body, ChangePseuBody):
            return _on_change(session, db, frame, now, ctx)
        return _on_beacon(session, db, frame, now, ctx)
    if not frame.code.is_auth:
        raise ValueError(f"{frame.code.value} is not an authentication frame")

    prev = session.state if session else None
    if session is None or not session.active:
        if frame.code is FrameCode.D1:
            return _start_responder(session, db, frame, now, ctx)
        if (
            session is not None
            and session.state is SessionState.DONE
            and session.peer_pseu == frame.pseu
            and frame == session.last_received
        ):
            return _answer_duplicate(session, db, now, ctx)
        return AuthStep(session, db, prev_state=prev, ignored="no_session")

    if frame.pseu != session.peer_pseu:
        return AuthStep(session, db, prev_state=prev, ignored="busy")
    if frame == session.last_received:
        return _answer_duplicate(session, db, now, ctx)
    if (
        frame.code is FrameCode.D1
        and session.role is Role.INITIATOR
        and session.state is SessionState.SENT_D1
    ):
        # both sides answered each other's beacon
        if ctx.pseu < frame.pseu:
            return AuthStep(session, db, prev_state=prev, ignored="tie_break")
        step = _start_responder(None, db, frame, now, ctx)
        step.prev_state = prev
        return step

    expected = _EXPECTED.get((session.role, session.state))
    if frame.code is not expected:
        logger.debug(f"out-of-order {frame.code.value} in {session.state.value}")
        return AuthStep(session, db, prev_state=prev, ignored="out_of_order")

    received = replace(session, last_received=frame)
    try:
        step = _HANDLERS[frame.code](received, db, frame, now, ctx)
    except (AuthError, CryptoError, ZkpError, GraphError, ValueError, struct.error) as exc:
        logger.warning(f"session with {session.peer_pseu} aborted: {type(exc).__name__}: {exc}")
        aborted = replace(
            received, state=SessionState.ABORTED, deadline=None, reason=type(exc).__name__
        )
        return AuthStep(aborted, release_binding(db, aborted), prev_state=prev)
    step.prev_state = prev
    return step


def retransmit_policy(
    session: AuthSession, now: float, cfg: SimConfig
) -> Tuple[RetransmitAction, AuthSession]:
    """Resend the last frame after a missed deadline, or give up."""
    if not session.active or session.deadline is None or now < session.deadline:
        return RetransmitAction.NONE, session
    if session.resend_count < cfg.max_resends:
        return RetransmitAction.RESEND, replace(
            session, resend_count=session.resend_count + 1, deadline=quantize(now + cfg.answer_timeout)
        )
    logger.warning(f"no answer from {session.peer_pseu} after {cfg.max_resends} resends")
    aborted = replace(session, state=SessionState.ABORTED, deadline=None, reason="resend_limit")
    return RetransmitAction.ABORT, aborted


def release_binding(db: AcquaintanceDb, session: AuthSession) -> AcquaintanceDb:
    """Undo the authentication an aborted session granted; last_seen survives."""
    if session.state is not SessionState.ABORTED or not session.bound:
        return db
    logger.info(f"{session.peer_pseu} (real id {session.peer_identity.real_id}) no longer authenticated")
    return db.restore(session.peer_identity.real_id, session.prior_entry)


def _bind(session: AuthSession, db: AcquaintanceDb, now: float) -> Tuple[AuthSession, AcquaintanceDb]:
    prior = db.get(session.peer_identity.real_id)
    db = db.mark_authenticated(session.peer_identity, session.peer_pseu, now)
    return replace(session, bound=True, prior_entry=prior), db


# transitions

def _send(
    session: AuthSession,
    code: FrameCode,
    info: bytes,
    state: SessionState,
    now: float,
    ctx: AuthContext,
    **changes,
) -> Tuple[AuthSession, Outbound]:
    frame = info_frame(code, ctx.pseu, info)
    deadline = None if state.terminal else quantize(now + ctx.config.answer_timeout)
    session = replace(
        session, state=state, last_sent=frame, resend_count=0, deadline=deadline, **changes
    )
    return session, Outbound(frame, to=session.peer_pseu)


def _answer_duplicate(session: AuthSession, db: AcquaintanceDb, now: float, ctx: AuthContext) -> AuthStep:
    if session.last_sent is None or session.resend_count >= ctx.config.max_resends:
        return AuthStep(session, db, prev_state=session.state, ignored="duplicate")
    session = replace(session, resend_count=session.resend_count + 1)
    resend = Outbound(session.last_sent, to=session.peer_pseu)
    return AuthStep(session, db, [resend], prev_state=session.state)


def _on_beacon(session, db, frame, now, ctx) -> AuthStep:
    """A beacon refreshes a known peer or opens an initiator session with a stranger."""
    prev = session.state if session else None
    db = db.touch(frame.pseu, now)
    try:
        plain = ctx.provider.decrypt(ctx.keys, frame.body.cta).decode("ascii")
        real_id_text, _, _ = plain.split(":", 2)
        real_id = int(real_id_text)
    except (CryptoError, UnicodeDecodeError, ValueError):
        return AuthStep(session, db, prev_state=prev, ignored="bad_cta")

    if real_id == ctx.identity.real_id:
        return AuthStep(session, db, prev_state=prev, ignored="own_beacon")
    known = db.get(real_id)
    if known is not None and known.authenticated:
        if known.current_pseu != frame.pseu:
            db = db.rebind(real_id, frame.pseu, now)
        return AuthStep(session, db, prev_state=prev, ignored="known_peer")
    if session is not None and session.active:
        return AuthStep(session, db, prev_state=prev, ignored="busy")
    if ctx.cooldowns.get(frame.pseu, float("-inf")) > now:
        return AuthStep(session, db, prev_state=prev, ignored="cooldown")

    fresh = AuthSession(Role.INITIATOR, frame.pseu, SessionState.IDLE, last_received=frame)
    d1 = ctx.provider.hash(encode_ids(db.ids()))
    fresh, out = _send(fresh, FrameCode.D1, d1, SessionState.SENT_D1, now, ctx)
    return AuthStep(fresh, db, [out], prev_state=prev)


def _on_change(session, db, frame, now, ctx) -> AuthStep:
    """Rebind an authenticated peer that announced a new pseudonym."""
    prev = session.state if session else None
    body: ChangePseuBody = frame.body
    entry = db.by_pseu(frame.pseu)
    if entry is None or not entry.authenticated:
        return AuthStep(session, db, prev_state=prev, ignored="unknown_peer")
    try:
        plain = ctx.provider.decrypt(ctx.keys, body.cta2).decode("ascii")
    except (CryptoError, UnicodeDecodeError):
        return AuthStep(session, db, prev_state=prev, ignored="bad_cta2")
    marker, _, rest = plain.partition(":")
    if marker != "00" or not rest.endswith(":" + body.new_pseu):
        return AuthStep(session, db, prev_state=prev, ignored="bad_cta2")
    logger.info(f"peer {entry.real_id} now uses pseudonym {body.new_pseu}")
    return AuthStep(session, db.rebind(entry.real_id, body.new_pseu, now), prev_state=prev)


def _start_responder(session, db, frame, now, ctx) -> AuthStep:
    """D1 opens a responder session answered with our own list hash."""
    prev = session.state if session else None
    if ctx.cooldowns.get(frame.pseu, float("-inf")) > now:
        return AuthStep(session, db, prev_state=prev, ignored="cooldown")
    if db.is_authenticated(frame.pseu):
        return AuthStep(session, db, prev_state=prev, ignored="known_peer")
    fresh = AuthSession(
        Role.RESPONDER, frame.pseu, SessionState.IDLE, peer_list_hash=frame.info, last_received=frame
    )
    d2 = ctx.provider.hash(encode_ids(db.ids()))
    fresh, out = _send(fresh, FrameCode.D2, d2, SessionState.SENT_D2, now, ctx)
    return AuthStep(fresh, db, [out], prev_state=prev)


def _on_d2(session, db, frame, now, ctx) -> AuthStep:
    """Reveal our acquaintance list in D3."""
    session, out = _send(session, FrameCode.D3, encode_ids(db.ids()), SessionState.SENT_D3, now, ctx)
    return AuthStep(session, db, [out])


def _on_d3(session, db, frame, now, ctx) -> AuthStep:
    """Check the revealed list against its D1 hash and pick the common acquaintance."""
    if not hmac.compare_digest(ctx.provider.hash(frame.info), session.peer_list_hash):
        raise HashMismatch("D3 list does not match the D1 commitment")
    common = sorted(set(decode_ids(frame.info)) & set(db.ids()))
    if not common:
        raise NoCommonAcquaintance(f"no common acquaintance with {session.peer_pseu}")
    session, out = _send(
        session, FrameCode.D4, _ID.pack(common[0]), SessionState.SENT_D4, now, ctx, common_id=common[0]
    )
    return AuthStep(session, db, [out])


def _on_d4(session, db, frame, now, ctx) -> AuthStep:
    """Commit to the first round for the named acquaintance."""
    if len(frame.info) != _ID.size:
        raise AuthError("D4 must carry one real_id")
    (common_id,) = _ID.unpack(frame.info)
    entry = db.get(common_id)
    if entry is None:
        raise NoCommonAcquaintance(f"{common_id} is not an acquaintance")
    commitment, witness = zkp.commit(entry.public_key, ctx.rng, p_aug=ctx.config.p_aug)
    session, out = _send(
        session,
        FrameCode.D5,
        zkp.encode_commitment(commitment),
        SessionState.AWAIT_Z2,
        now,
        ctx,
        common_id=common_id,
        witness=witness,
        round=1,
    )
    return AuthStep(session, db, [out])


def _challenge(session, db, commitment, now, ctx, code: FrameCode, round_no: int) -> AuthStep:
    """Store ``commitment`` and answer it with a fresh challenge bit."""
    ch = int(ctx.rng.integers(0, 2))
    last = round_no >= ctx.config.zkp_rounds
    state = SessionState.AWAIT_E1 if last else SessionState.AWAIT_Z3
    session, out = _send(
        session,
        code,
        bytes([round_no, ch]),
        state,
        now,
        ctx,
        commitment=commitment,
        challenge=ch,
        round=round_no,
    )
    return AuthStep(session, db, [out])


def _on_d5(session, db, frame, now, ctx) -> AuthStep:
    """First commitment received; challenge it."""
    return _challenge(session, db, zkp.decode_commitment(frame.info), now, ctx, FrameCode.Z2, 1)


def _on_challenge(session, db, frame, now, ctx) -> AuthStep:
    """Answer a challenge and commit to the next round, or open E1 after the last."""
    if len(frame.info) != 2 or frame.info[1] not in (0, 1):
        raise ZkpError("a challenge is a round byte and a 0/1 byte")
    if frame.info[0] != session.round:
        raise ZkpError(f"challenge for round {frame.info[0]}, expected {session.round}")
    answer = zkp.encode_response(zkp.respond(session.witness, frame.info[1]))
    if session.round < ctx.config.zkp_rounds:
        commitment, witness = zkp.commit(
            db.get(session.common_id).public_key, ctx.rng, p_aug=ctx.config.p_aug
        )
        session, out = _send(
            session,
            FrameCode.Z3,
            answer + zkp.encode_commitment(commitment),
            SessionState.AWAIT_Z4,
            now,
            ctx,
            witness=witness,
            round=session.round + 1,
        )
        return AuthStep(session, db, [out])
    blob = ctx.provider.encrypt(ctx.keys, ctx.identity.public.to_bytes())
    session, out = _send(session, FrameCode.E1, answer + blob, SessionState.AWAIT_E2, now, ctx)
    return AuthStep(session, db, [out])


def _check_answer(session, db, info: bytes) -> bytes:
    """Verify the response at the head of ``info``; return what follows it."""
    size = zkp.response_size(info)
    response = zkp.decode_response(info[:size])
    common_key = db.get(session.common_id).public_key
    if not zkp.check(common_key, session.commitment, session.challenge, response):
        raise ZkpCheckFailed(f"round {session.round} failed for {session.peer_pseu}")
    return info[size:]


def _on_z3(session, db, frame, now, ctx) -> AuthStep:
    """Response plus the next commitment; challenge again."""
    rest = _check_answer(session, db, frame.info)
    commitment = zkp.decode_commitment(rest)
    return _challenge(session, db, commitment, now, ctx, FrameCode.Z4, session.round + 1)


def _on_e1(session, db, frame, now, ctx) -> AuthStep:
    """Last response checked; swap encrypted identities."""
    blob = _check_answer(session, db, frame.info)
    peer = IdentityPublic.from_bytes(ctx.provider.decrypt(ctx.keys, blob))
    if not validate_public_key(peer.public_key):
        raise AuthError("peer presented an invalid public key")
    info = _PUBKEY.pack(ctx.identity.public_key) + ctx.provider.encrypt(
        ctx.keys, ctx.identity.public.to_bytes()
    )
    session, out = _send(session, FrameCode.E2, info, SessionState.AWAIT_E3, now, ctx, peer_identity=peer)
    return AuthStep(session, db, [out])


def _on_e2(session, db, frame, now, ctx) -> AuthStep:
    """Take the responder identity and acknowledge with E3."""
    if len(frame.info) <= _PUBKEY.size:
        raise AuthError("E2 too short")
    (public_key,) = _PUBKEY.unpack(frame.info[: _PUBKEY.size])
    peer = IdentityPublic.from_bytes(ctx.provider.decrypt(ctx.keys, frame.info[_PUBKEY.size :]))
    if peer.public_key != public_key or not validate_public_key(public_key):
        raise AuthError("E2 public key does not match the encrypted identity")
    session, out = _send(session, FrameCode.E3, _MARKER, SessionState.AWAIT_E4, now, ctx, peer_identity=peer)
    return AuthStep(session, db, [out])


def _on_e3(session, db, frame, now, ctx) -> AuthStep:
    """The responder authenticates the initiator and announces its stored events."""
    if frame.info != _MARKER:
        raise AuthError("E3 is not an authenticated marker")
    session, db = _bind(session, db, now)
    logger.info(f"{session.peer_pseu} (real id {session.peer_identity.real_id}) authenticated")
    data = ctx.provider.encrypt(ctx.keys, _ID.pack(ctx.stored_events))
    session, out = _send(session, FrameCode.E4, data, SessionState.AWAIT_E5, now, ctx)
    return AuthStep(session, db, [out], [LocalEvent.AUTHENTICATED])


def _on_e4(session, db, frame, now, ctx) -> AuthStep:
    """The initiator authenticates the responder and starts sending its events."""
    (peer_events,) = _ID.unpack(ctx.provider.decrypt(ctx.keys, frame.info))
    session, db = _bind(session, db, now)
    logger.info(
        f"{session.peer_pseu} (real id {session.peer_identity.real_id}) authenticated, "
        f"{peer_events} stored event(s) announced"
    )
    info = _ACK_COUNT.pack(1, ctx.stored_events)
    session, out = _send(session, FrameCode.E5, info, SessionState.AWAIT_E6, now, ctx)
    return AuthStep(session, db, [out], [LocalEvent.AUTHENTICATED, LocalEvent.SEND_EVENTS])


def _on_e5(session, db, frame, now, ctx) -> AuthStep:
    """Acknowledge and send our events; the responder is done."""
    ack, _ = _ACK_COUNT.unpack(frame.info)
    if ack != 1:
        raise AuthError("E5 is not an acknowledgement")
    session, out = _send(session, FrameCode.E6, _MARKER, SessionState.DONE, now, ctx)
    return AuthStep(session, db, [out], [LocalEvent.SEND_EVENTS])


def _on_e6(session, db, frame, now, ctx) -> AuthStep:
    """Final acknowledgement; the initiator is done."""
    if frame.info != _MARKER:
        raise AuthError("E6 is not a final acknowledgement")
    return AuthStep(replace(session, state=SessionState.DONE, deadline=None), db)


_HANDLERS = {
    FrameCode.D2: _on_d2,
    FrameCode.D3: _on_d3,
    FrameCode.D4: _on_d4,
    FrameCode.D5: _on_d5,
    FrameCode.Z2: _on_challenge,
    FrameCode.Z4: _on_challenge,
    FrameCode.Z3: _on_z3,
    FrameCode.E1: _on_e1,
    FrameCode.E2: _on_e2,
    FrameCode.E3: _on_e3,
    FrameCode.E4: _on_e4,
    FrameCode.E5: _on_e5,
    FrameCode.E6: _on_e6,
}
