"""Identity material and pluggable hash / encrypt / sign primitives.

Two providers satisfy the same contracts:

* :class:`SeededProvider` - deterministic, keyed by a seed; the default for
  simulations so that traces are reproducible byte for byte.
* :class:`SystemProvider` - plain SHA-256 and OS randomness for nonces.

Both sign with Ed25519 and encrypt with AES-GCM from ``cryptography``.
"""

import hashlib
import hmac
import os
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional

import numpy as np
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .exceptions import DecryptFailure
from .keygraph import (
    KEY_SPACE,
    Adjacency6,
    Cycle6,
    Permutation6,
    find_hamiltonian,
    graph_to_key,
    key_to_graph,
)

NONCE_SIZE = 12
K1_SIZE = 16
_IDENTITY_RECORD = struct.Struct(">IIH32s")


@dataclass(frozen=True)
class IdentityPublic:
    """The part of an identity other nodes may hold."""

    real_id: int
    key_uid: int
    public_key: int
    verify_key: bytes

    def to_bytes(self) -> bytes:
        return _IDENTITY_RECORD.pack(self.real_id, self.key_uid, self.public_key, self.verify_key)

    @classmethod
    def from_bytes(cls, data: bytes) -> "IdentityPublic":
        if len(data) != _IDENTITY_RECORD.size:
            raise ValueError(f"identity record must be {_IDENTITY_RECORD.size} bytes")
        real_id, key_uid, public_key, verify_key = _IDENTITY_RECORD.unpack(data)
        return cls(real_id, key_uid, public_key, verify_key)


@dataclass(frozen=True)
class Identity:
    real_id: int
    key_uid: int
    public_key: int
    signing_secret: bytes

    @cached_property
    def public(self) -> IdentityPublic:
        return IdentityPublic(
            self.real_id, self.key_uid, self.public_key, _verify_key_bytes(self.signing_secret)
        )


@dataclass(frozen=True)
class SessionKeys:
    """K1: the symmetric key producing CTA, CTA2 and E-phase blobs."""

    k1: bytes

    def __post_init__(self):
        if len(self.k1) not in (16, 24, 32):
            raise ValueError("k1 must be an AES key (16, 24 or 32 bytes)")

    @classmethod
    def derive(cls, seed: int) -> "SessionKeys":
        digest = hashlib.sha256(b"roadmesh-k1:" + str(seed).encode("ascii")).digest()
        return cls(digest[:K1_SIZE])


def _verify_key_bytes(signing_secret: bytes) -> bytes:
    private = Ed25519PrivateKey.from_private_bytes(signing_secret)
    return private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def cycle_to_key(cycle: Cycle6) -> int:
    m = np.zeros((6, 6), dtype=np.uint8)
    for u, v in cycle.edges():
        m[u - 1, v - 1] = m[v - 1, u - 1] = 1
    return graph_to_key(Adjacency6(m))


def generate_identity(
    rng: np.random.Generator,
    real_id: Optional[int] = None,
    key_uid: Optional[int] = None,
) -> Identity:
    """Draw a uniformly random cyclic ordering of the 6 vertices as the key."""
    ordering = Permutation6.random(rng)
    public_key = cycle_to_key(Cycle6(ordering.order))
    if real_id is None:
        real_id = int(rng.integers(0, 1 << 32))
    if key_uid is None:
        key_uid = int(rng.integers(0, 1 << 32))
    signing_secret = rng.bytes(32)
    return Identity(real_id, key_uid, public_key, signing_secret)


def validate_public_key(key) -> bool:
    """True iff ``key`` (int or 15-char bit string) encodes one Hamiltonian 6-cycle."""
    if isinstance(key, str):
        if len(key) != 15 or set(key) - {"0", "1"}:
            return False
        key = int(key, 2)
    if not isinstance(key, int) or not 0 <= key < KEY_SPACE:
        return False
    g = key_to_graph(key)
    if g.degrees() != [2] * 6:
        return False
    # 2-regular on 6 vertices is either one 6-cycle or two triangles
    return find_hamiltonian(g) is not None


def enumerate_valid_keys() -> List[int]:
    return [k for k in range(KEY_SPACE) if validate_public_key(k)]


class CryptoProvider(ABC):
    """Hash, symmetric encryption and signatures behind one interface."""

    @abstractmethod
    def hash(self, data: bytes) -> bytes:
        """Deterministic digest."""

    @abstractmethod
    def _nonce(self, keys: SessionKeys, data: bytes) -> bytes:
        """12-byte AES-GCM nonce for encrypting ``data`` under ``keys``."""

    def encrypt(self, keys: SessionKeys, data: bytes) -> bytes:
        nonce = self._nonce(keys, bytes(data))
        return nonce + AESGCM(keys.k1).encrypt(nonce, bytes(data), None)

    def decrypt(self, keys: SessionKeys, blob: bytes) -> bytes:
        if len(blob) < NONCE_SIZE + 16:
            raise DecryptFailure("ciphertext too short")
        try:
            return AESGCM(keys.k1).decrypt(blob[:NONCE_SIZE], blob[NONCE_SIZE:], None)
        except InvalidTag:
            raise DecryptFailure("ciphertext failed authentication")

    def sign(self, identity: Identity, data: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(identity.signing_secret).sign(bytes(data))

    def verify(self, public: IdentityPublic, data: bytes, signature: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public.verify_key).verify(bytes(signature), bytes(data))
            return True
        except (InvalidSignature, ValueError):
            return False


class SeededProvider(CryptoProvider):
    """Keyed SHA-256 and nonces derived from key and plaintext.

    Holds no mutable state. Equal inputs give equal ciphertexts; distinct
    plaintexts under one key get distinct nonces.
    """

    def __init__(self, seed: int = 0, stream: str = ""):
        self._key = hashlib.sha256(b"roadmesh-provider:" + str(seed).encode("ascii")).digest()
        self._nonce_key = hashlib.sha256(self._key + b"nonce:" + stream.encode("utf-8")).digest()

    def hash(self, data: bytes) -> bytes:
        return hmac.new(self._key, bytes(data), hashlib.sha256).digest()

    def _nonce(self, keys: SessionKeys, data: bytes) -> bytes:
        block = hmac.new(self._nonce_key, keys.k1 + data, hashlib.sha256)
        return block.digest()[:NONCE_SIZE]


class SystemProvider(CryptoProvider):
    def hash(self, data: bytes) -> bytes:
        return hashlib.sha256(bytes(data)).digest()

    def _nonce(self, keys: SessionKeys, data: bytes) -> bytes:
        return os.urandom(NONCE_SIZE)
