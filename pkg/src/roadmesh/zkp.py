"""Interactive graph-based zero-knowledge identification.

One round: the prover commits to a relabeled, augmented copy of the common
acquaintance's key graph; the verifier flips a coin; the prover either opens
the relabeling (challenge 0) or shows a Hamiltonian cycle of the commitment
(challenge 1). Every round uses a fresh commitment.
"""

import logging
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np

from .crypto import validate_public_key
from .exceptions import GraphError, InvalidKey, VariantMismatch, ZkpError
from .keygraph import (
    Adjacency6,
    Cycle6,
    Permutation6,
    apply_perm_to_cycle,
    augment,
    augment_positions,
    conjugate,
    find_hamiltonian,
    graph_to_key,
    key_to_graph,
    verify_hamiltonian,
)

logger = logging.getLogger(__name__)

_PACKED_GRAPH = struct.Struct(">H")


class Challenge(IntEnum):
    ISOMORPHISM = 0
    CYCLE = 1


@dataclass(frozen=True)
class Commitment:
    h: Adjacency6

    def packed(self) -> int:
        return graph_to_key(self.h)


@dataclass(frozen=True)
class Witness:
    base_aug: Adjacency6
    perm: Permutation6
    cycle: Cycle6


@dataclass(frozen=True)
class IsomorphismResponse:
    """Opens the relabeling; carries no cycle."""

    perm: Permutation6
    base_aug: Adjacency6

    @property
    def challenge(self) -> Challenge:
        return Challenge.ISOMORPHISM


@dataclass(frozen=True)
class CycleResponse:
    """A Hamiltonian cycle of the committed graph; carries no permutation."""

    cycle: Cycle6

    @property
    def challenge(self) -> Challenge:
        return Challenge.CYCLE


Response = Union[IsomorphismResponse, CycleResponse]


def commit(
    common_key: int,
    rng: Optional[np.random.Generator] = None,
    *,
    p_aug: float = 0.5,
    flips: Optional[Iterable[int]] = None,
    perm: Optional[Permutation6] = None,
) -> Tuple[Commitment, Witness]:
    """Build a fresh commitment for ``common_key``.

    ``flips`` and ``perm`` pin the otherwise random augmentation and
    relabeling; ``rng`` is required for whichever of them is left out.
    """
    if not validate_public_key(common_key):
        raise InvalidKey(f"not a single Hamiltonian 6-cycle: {common_key}")
    if rng is None and (flips is None or perm is None):
        raise ValueError("commit needs an rng unless both flips and perm are given")

    g = key_to_graph(common_key)
    cycle = find_hamiltonian(g)
    base_aug = augment_positions(g, flips) if flips is not None else augment(g, rng, p_aug)
    if perm is None:
        perm = Permutation6.random(rng)
    return Commitment(conjugate(base_aug, perm)), Witness(base_aug, perm, cycle)


def respond(w: Witness, ch: int) -> Response:
    ch = Challenge(ch)
    if ch is Challenge.ISOMORPHISM:
        return IsomorphismResponse(w.perm, w.base_aug)
    return CycleResponse(apply_perm_to_cycle(w.cycle, w.perm))


def check(common_key: int, c: Commitment, ch: int, r: Response) -> bool:
    ch = Challenge(ch)
    if r.challenge is not ch:
        raise VariantMismatch(f"response answers challenge {int(r.challenge)}, not {int(ch)}")
    if isinstance(r, IsomorphismResponse):
        if conjugate(r.base_aug, r.perm) != c.h:
            return False
        return r.base_aug.contains(key_to_graph(common_key))
    return verify_hamiltonian(c.h, r.cycle)


class HonestProver:
    """Knows the common acquaintance's key and commits to it."""

    def __init__(self, common_key: int, rng: np.random.Generator, p_aug: float = 0.5):
        self.common_key = common_key
        self.rng = rng
        self.p_aug = p_aug
        self._witness: Optional[Witness] = None

    def commit(self) -> Commitment:
        commitment, self._witness = commit(self.common_key, self.rng, p_aug=self.p_aug)
        return commitment

    def respond(self, ch: int) -> Response:
        if self._witness is None:
            raise ZkpError("respond called before commit")
        return respond(self._witness, ch)


class ImpostorProver(HonestProver):
    """Commits to a different valid key.

    Its cycle openings always verify and its isomorphism openings never
    cover the real key graph, so it survives a round exactly when the
    challenge is 1.
    """

    def __init__(self, wrong_key: int, rng: np.random.Generator):
        super().__init__(wrong_key, rng, p_aug=0.0)


class Verifier:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.transcript: List[str] = []

    def challenge(self) -> Challenge:
        return Challenge(int(self.rng.integers(0, 2)))

    def check(self, common_key: int, commitment: Commitment, ch: int, response: Response) -> bool:
        ok = check(common_key, commitment, ch, response)
        self.transcript.append(transcript_line(len(self.transcript) + 1, commitment, ch, ok))
        return ok


def run_rounds(prover: HonestProver, verifier: Verifier, common_key: int, rounds: int) -> bool:
    """True iff every round checks; stops at the first failed round."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    for _ in range(rounds):
        commitment = prover.commit()
        ch = verifier.challenge()
        if not verifier.check(common_key, commitment, ch, prover.respond(ch)):
            logger.debug(f"zkp round failed after {len(verifier.transcript)} round(s)")
            return False
    return True


def transcript_line(round_no: int, commitment: Commitment, ch: int, ok: bool) -> str:
    return f"round={round_no} commit={commitment.packed():04x} ch={int(ch)} ok={str(ok).lower()}"


# wire encodings used inside D5 / Z3 / E1 payloads

def encode_commitment(c: Commitment) -> bytes:
    return _PACKED_GRAPH.pack(c.packed())


def decode_commitment(data: bytes) -> Commitment:
    if len(data) != _PACKED_GRAPH.size:
        raise ZkpError("commitment must be 2 bytes")
    (packed,) = _PACKED_GRAPH.unpack(data)
    try:
        return Commitment(key_to_graph(packed))
    except GraphError as exc:
        raise ZkpError(f"bad commitment: {exc}")


def encode_response(r: Response) -> bytes:
    if isinstance(r, IsomorphismResponse):
        return bytes([0, *r.perm.order]) + _PACKED_GRAPH.pack(graph_to_key(r.base_aug))
    return bytes([1, *r.cycle.vertices])


def response_size(data: bytes) -> int:
    """Length of the response at the start of ``data``."""
    if not data:
        raise ZkpError("empty response")
    if data[0] == 0:
        return 9
    if data[0] == 1:
        return 7
    raise ZkpError(f"unknown response variant {data[0]}")


def decode_response(data: bytes) -> Response:
    if len(data) != response_size(data):
        raise ZkpError("response has the wrong length")
    try:
        if data[0] == 0:
            (packed,) = _PACKED_GRAPH.unpack(data[7:9])
            return IsomorphismResponse(Permutation6(tuple(data[1:7])), key_to_graph(packed))
        return CycleResponse(Cycle6(tuple(data[1:7])))
    except GraphError as exc:
        raise ZkpError(f"bad response: {exc}")
