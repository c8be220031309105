"""Tests for the authentication state machine, acquaintances and pseudonyms."""
from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np
import pytest

from roadmesh.auth import (
    AcquaintanceDb,
    AuthContext,
    AuthSession,
    LocalEvent,
    PseudonymManager,
    RetransmitAction,
    Role,
    SessionState,
    decode_ids,
    encode_ids,
    make_beacon,
    on_frame,
    release_binding,
    retransmit_policy,
    rotate,
)
from roadmesh.config import SimConfig
from roadmesh.crypto import SeededProvider, SessionKeys, generate_identity
from roadmesh.exceptions import AuthError
from roadmesh.wire import Frame, FrameCode, info_frame

CONFIG = SimConfig()
KEYS = SessionKeys.derive(1)
CAROL = generate_identity(np.random.default_rng(3), real_id=900)
DAVE = generate_identity(np.random.default_rng(4), real_id=901)
HANDSHAKE = ["D1", "D2", "D3", "D4", "D5", "Z2", "Z3", "Z4", "E1", "E2", "E3", "E4", "E5", "E6"]


@dataclass
class Party:
    ctx: AuthContext
    db: AcquaintanceDb
    session: Optional[AuthSession] = None

    def receive(self, frame: Frame, now: float = 0.0):
        step = on_frame(self.session, self.db, frame, now, self.ctx)
        self.session = step.session
        self.db = step.db
        return step


def make_party(name: str, seed: int, real_id: int, pseu: str, knows=(CAROL,)) -> Party:
    identity = generate_identity(np.random.default_rng(seed), real_id=real_id)
    ctx = AuthContext(
        identity=identity,
        keys=KEYS,
        provider=SeededProvider(1, stream=name),
        config=CONFIG,
        rng=np.random.default_rng(seed + 100),
        pseu=pseu,
    )
    return Party(ctx, AcquaintanceDb.from_identities([i.public for i in knows]))


def beacon_of(party: Party, keys: SessionKeys = KEYS) -> Frame:
    pm = PseudonymManager(np.random.default_rng(0))
    pm.current = party.ctx.pseu
    return make_beacon(pm, party.ctx.identity, keys, party.ctx.provider, CONFIG.wall_clock(0))


def exchange(first: Party, second: Party, frame: Frame) -> List[str]:
    """Deliver ``frame`` to ``first`` and bounce replies until both go quiet."""
    other = {id(first): second, id(second): first}
    queue = [(first, frame)]
    codes = []
    while queue:
        target, frame = queue.pop(0)
        for out in target.receive(frame).outgoing:
            codes.append(out.frame.code.value)
            queue.append((other[id(target)], out.frame))
    return codes


@pytest.fixture
def alice():
    return make_party("a", 11, 101, "0000000a")


@pytest.fixture
def bob():
    return make_party("b", 12, 102, "0000000b")


def test_full_handshake(alice, bob):
    """Test two nodes sharing an acquaintance run every frame once and finish."""
    codes = exchange(alice, bob, beacon_of(bob))
    assert codes == HANDSHAKE
    assert alice.session.state is SessionState.DONE
    assert bob.session.state is SessionState.DONE
    assert alice.session.role is Role.INITIATOR
    assert bob.session.role is Role.RESPONDER
    assert alice.db.get(102).authenticated and alice.db.get(102).current_pseu == "0000000b"
    assert bob.db.get(101).authenticated and bob.db.get(101).current_pseu == "0000000a"
    assert alice.db.is_authenticated("0000000b")


def test_handshake_with_three_rounds(alice, bob):
    """Test extra rounds add one Z3/Z4 pair each."""
    config = replace(CONFIG, zkp_rounds=3)
    alice.ctx.config = config
    bob.ctx.config = config
    codes = exchange(alice, bob, beacon_of(bob))
    assert codes.count("Z3") == 2 and codes.count("Z4") == 2
    assert alice.session.state is SessionState.DONE


def test_authenticated_events_are_raised(alice, bob):
    """Test each side learns of the peer and is told to share events once."""
    beacon = beacon_of(bob)
    events = []
    queue = [(alice, beacon)]
    while queue:
        target, frame = queue.pop(0)
        step = target.receive(frame)
        events.extend((target is alice, e) for e in step.events)
        other = bob if target is alice else alice
        queue.extend((other, out.frame) for out in step.outgoing)
    assert (True, LocalEvent.AUTHENTICATED) in events
    assert (False, LocalEvent.AUTHENTICATED) in events
    assert [e for e in events if e[1] is LocalEvent.SEND_EVENTS] == [
        (True, LocalEvent.SEND_EVENTS),
        (False, LocalEvent.SEND_EVENTS),
    ]


def test_no_common_acquaintance(alice):
    """Test the responder aborts at D3 when the lists do not intersect."""
    stranger = make_party("s", 13, 103, "0000000c", knows=(DAVE,))
    codes = exchange(alice, stranger, beacon_of(stranger))
    assert codes == ["D1", "D2", "D3"]
    assert stranger.session.state is SessionState.ABORTED
    assert stranger.session.reason == "NoCommonAcquaintance"
    assert alice.session.state is SessionState.SENT_D3
    assert alice.db.get(103) is None


def test_d3_must_match_the_d1_hash(alice, bob):
    """Test a D3 list that differs from the committed one aborts the session."""
    d1 = alice.receive(beacon_of(bob)).outgoing[0].frame
    bob.receive(d1)
    forged = info_frame(FrameCode.D3, "0000000a", encode_ids([900, 5]))
    step = bob.receive(forged)
    assert step.session.state is SessionState.ABORTED
    assert step.session.reason == "HashMismatch"


def test_out_of_order_frame_is_ignored(alice, bob):
    """Test a frame the state does not expect leaves the session alone."""
    d1 = alice.receive(beacon_of(bob)).outgoing[0].frame
    bob.receive(d1)
    step = bob.receive(info_frame(FrameCode.E3, "0000000a", b"\x01"))
    assert step.ignored == "out_of_order"
    assert bob.session.state is SessionState.SENT_D2


def test_second_peer_is_busy(alice, bob):
    """Test a node runs one session at a time."""
    d1 = alice.receive(beacon_of(bob)).outgoing[0].frame
    bob.receive(d1)
    step = bob.receive(info_frame(FrameCode.D1, "0000000c", d1.info))
    assert step.ignored == "busy"
    assert bob.session.peer_pseu == "0000000a"


def test_duplicate_frame_resends_last_answer(alice, bob):
    """Test a repeated D1 is answered with the same D2."""
    d1 = alice.receive(beacon_of(bob)).outgoing[0].frame
    first = bob.receive(d1).outgoing[0].frame
    step = bob.receive(d1)
    assert [o.frame for o in step.outgoing] == [first]
    assert bob.session.resend_count == 1


def test_beacon_filters(alice, bob):
    """Test own beacons, foreign keys and cooldowns do not open sessions."""
    assert alice.receive(beacon_of(alice)).ignored == "own_beacon"
    assert alice.receive(beacon_of(bob, SessionKeys.derive(2))).ignored == "bad_cta"
    alice.ctx.cooldowns = {"0000000b": 10.0}
    assert alice.receive(beacon_of(bob), now=5.0).ignored == "cooldown"
    step = alice.receive(beacon_of(bob), now=10.0)
    assert step.ignored is None and alice.session.state is SessionState.SENT_D1


def test_known_peer_is_not_reauthenticated(alice, bob):
    """Test a beacon from an authenticated peer only refreshes the binding."""
    exchange(alice, bob, beacon_of(bob))
    assert alice.receive(beacon_of(bob), now=30.0).ignored == "known_peer"
    assert alice.db.get(102).last_seen == 30.0


def test_simultaneous_d1_tie_break(alice, bob):
    """Test the larger pseudonym yields and becomes the responder."""
    a_d1 = alice.receive(beacon_of(bob)).outgoing[0].frame
    b_d1 = bob.receive(beacon_of(alice)).outgoing[0].frame
    assert alice.receive(b_d1).ignored == "tie_break"
    step = bob.receive(a_d1)
    assert step.outgoing[0].frame.code is FrameCode.D2
    assert bob.session.role is Role.RESPONDER
    assert step.prev_state is SessionState.SENT_D1


def test_challenge_for_wrong_round_aborts(alice, bob):
    """Test a challenge must name the round being played."""
    codes = []
    queue = [(alice, beacon_of(bob))]
    while queue:
        target, frame = queue.pop(0)
        if frame.code is FrameCode.Z2:
            frame = info_frame(FrameCode.Z2, frame.pseu, bytes([2, frame.info[1]]))
        step = target.receive(frame)
        codes.extend(o.frame.code.value for o in step.outgoing)
        other = bob if target is alice else alice
        queue.extend((other, o.frame) for o in step.outgoing)
    assert codes[-1] == "Z2"
    assert alice.session.state is SessionState.ABORTED
    assert alice.session.reason == "ZkpError"


def test_retransmit_policy():
    """Test resends up to the limit and then an abort."""
    session = AuthSession(Role.INITIATOR, "0000000b", SessionState.SENT_D1, deadline=2.0)
    action, same = retransmit_policy(session, 1.999, CONFIG)
    assert action is RetransmitAction.NONE and same is session
    for count in range(1, CONFIG.max_resends + 1):
        action, session = retransmit_policy(session, session.deadline, CONFIG)
        assert action is RetransmitAction.RESEND
        assert session.resend_count == count
    action, session = retransmit_policy(session, session.deadline, CONFIG)
    assert action is RetransmitAction.ABORT
    assert session.state is SessionState.ABORTED and session.reason == "resend_limit"


def exchange_until(first: Party, second: Party, frame: Frame, stop: str, now: float = 0.0) -> None:
    """Like ``exchange`` but the first ``stop`` frame is lost on the way."""
    other = {id(first): second, id(second): first}
    queue = [(first, frame)]
    while queue:
        target, frame = queue.pop(0)
        for out in target.receive(frame, now).outgoing:
            if out.frame.code.value == stop:
                return
            queue.append((other[id(target)], out.frame))


def give_up(session: AuthSession) -> AuthSession:
    action = RetransmitAction.NONE
    while action is not RetransmitAction.ABORT:
        action, session = retransmit_policy(session, session.deadline, CONFIG)
    return session


def test_abort_after_binding_leaves_db_unchanged(alice, bob):
    """Test both sides forget the peer when E5 never arrives."""
    before = {"a": alice.db, "b": bob.db}
    exchange_until(alice, bob, beacon_of(bob), stop="E5")
    assert bob.session.state is SessionState.AWAIT_E5 and bob.db.is_authenticated("0000000a")
    assert alice.session.state is SessionState.AWAIT_E6 and alice.db.is_authenticated("0000000b")

    for name, party in (("a", alice), ("b", bob)):
        party.session = give_up(party.session)
        party.db = release_binding(party.db, party.session)
        assert party.db == before[name]


def test_abort_restores_a_known_peer_but_keeps_last_seen(alice):
    """Test a peer already in the DB goes back to its old entry with a fresh last_seen."""
    bob = make_party("b", 12, 102, "0000000b", knows=(CAROL, alice.ctx.identity))
    exchange_until(alice, bob, beacon_of(bob), stop="E5", now=5.0)
    assert bob.db.get(101).authenticated
    bob.session = give_up(bob.session)
    bob.db = release_binding(bob.db, bob.session)
    entry = bob.db.get(101)
    assert not entry.authenticated and entry.current_pseu is None
    assert entry.last_seen == 5.0


def test_bad_e5_aborts_and_releases(alice, bob):
    """Test an abort raised by a handler after E3 also undoes the binding."""
    exchange_until(alice, bob, beacon_of(bob), stop="E5")
    step = bob.receive(info_frame(FrameCode.E5, "0000000a", bytes(5)))
    assert step.session.state is SessionState.ABORTED and step.session.reason == "AuthError"
    assert bob.db.get(101) is None


def test_release_ignores_sessions_that_never_bound():
    """Test an early abort or a finished session leaves the DB alone."""
    db = AcquaintanceDb.from_identities([CAROL.public])
    early = AuthSession(Role.INITIATOR, "0000000b", SessionState.ABORTED)
    assert release_binding(db, early) is db


def test_rotation_notifies_peers(alice, bob):
    """Test a pseudonym change is accepted only from an authenticated peer."""
    exchange(alice, bob, beacon_of(bob))
    pm = PseudonymManager(np.random.default_rng(7))
    pm.current = "0000000b"
    new, frames = rotate(pm, KEYS, bob.ctx.provider, ["0000000a"], CONFIG.wall_clock(40))
    assert new != "0000000b" and pm.current == new
    assert [f.to for f in frames] == ["0000000a"]
    alice.receive(frames[0].frame, now=40.0)
    assert alice.db.by_pseu(new).real_id == 102

    stranger = make_party("s", 13, 103, "0000000c")
    assert stranger.receive(frames[0].frame).ignored == "unknown_peer"


def test_pseudonym_manager_rotation_due():
    """Test the counter reaches the rotation period and fresh names never repeat."""
    pm = PseudonymManager(np.random.default_rng(0), rotation_period=3)
    first = pm.current
    for _ in range(3):
        make_beacon(pm, CAROL, KEYS, SeededProvider(0), CONFIG.wall_clock(0))
    assert pm.rotation_due
    assert pm.advance() != first
    assert not pm.rotation_due
    assert len(pm.used) == 2


def test_id_lists():
    """Test acquaintance lists are sorted, counted and strictly ascending."""
    assert decode_ids(encode_ids([5, 1, 5])) == [1, 5]
    with pytest.raises(AuthError):
        decode_ids(b"\x00")
    with pytest.raises(AuthError):
        decode_ids(b"\x00\x02\x00\x00\x00\x01")
    with pytest.raises(AuthError):
        decode_ids(b"\x00\x02\x00\x00\x00\x05\x00\x00\x00\x01")


def test_db_keeps_pseudonyms_unique():
    """Test binding a pseudonym to one entry unbinds it from any other."""
    db = AcquaintanceDb.from_identities([CAROL.public, DAVE.public])
    db = db.mark_authenticated(CAROL.public, "0000000f", 1.0)
    db = db.mark_authenticated(DAVE.public, "0000000f", 2.0)
    assert db.by_pseu("0000000f").real_id == 901
    assert db.get(900).current_pseu is None
    assert db.ids() == [900, 901]
    assert set(db.keyring()) == {900, 901}
