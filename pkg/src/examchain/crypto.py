"""Hashing, Ed25519 identities, signatures and address derivation."""
from __future__ import annotations

import hashlib
import os
import builtins
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

DIGEST_SIZE = 32
ADDRESS_SIZE = 20
PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64
SEED_SIZE = 32

ZERO_DIGEST = bytes(DIGEST_SIZE)
ZERO_ADDRESS = bytes(ADDRESS_SIZE)

_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw


class MalformedKey(ValueError):
    """A seed, private key or public key has the wrong length or encoding."""


def hash(data: bytes) -> bytes:  # noqa: A001 - mirrors the domain name
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    private_key: bytes = field(repr=False)

    def __hash__(self) -> int:
        # the generated hash would resolve the module-level sha256 ``hash``
        return builtins.hash(self.public_key)

    @property
    def address(self) -> bytes:
        return derive_address(self.public_key)

    def sign(self, message: bytes) -> bytes:
        return sign(self.private_key, message)


def generate_identity(seed: bytes | None = None) -> KeyPair:
    """Deterministic keypair from a 32-byte seed; OS entropy when seed is None."""
    if seed is None:
        seed = os.urandom(SEED_SIZE)
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != SEED_SIZE:
        raise MalformedKey(f"seed must be {SEED_SIZE} bytes")
    sk = Ed25519PrivateKey.from_private_bytes(bytes(seed))
    return KeyPair(sk.public_key().public_bytes(_RAW, _RAW_PUB), bytes(seed))


def identity_from_label(label: str) -> KeyPair:
    """Test and scenario helper: a keypair whose seed is hash(label)."""
    return generate_identity(hash(b"examchain-identity:" + label.encode("utf-8")))


@lru_cache(maxsize=4096)
def _private(private_key: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(private_key)


@lru_cache(maxsize=4096)
def _public(public_key: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(public_key)


def sign(private_key: bytes, message: bytes) -> bytes:
    if not isinstance(private_key, (bytes, bytearray)) or len(private_key) != SEED_SIZE:
        raise MalformedKey("private key must be 32 bytes")
    return _private(bytes(private_key)).sign(message)


# Ed25519 verification dominates simulation time and every replica checks the
# same messages; results are pure so they are memoized.
@lru_cache(maxsize=1 << 17)
def _verify_cached(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        _public(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is a valid signature over exactly ``message``."""
    if (
        not isinstance(public_key, bytes)
        or len(public_key) != PUBLIC_KEY_SIZE
        or not isinstance(signature, bytes)
        or len(signature) != SIGNATURE_SIZE
        or not isinstance(message, bytes)
    ):
        return False
    return _verify_cached(public_key, message, signature)


def derive_address(public_key: bytes) -> bytes:
    """Last 20 bytes of the SHA-256 of the raw public key."""
    if not isinstance(public_key, (bytes, bytearray)) or len(public_key) != PUBLIC_KEY_SIZE:
        raise MalformedKey("public key must be 32 bytes")
    return hash(bytes(public_key))[-ADDRESS_SIZE:]


def load_seeds(path: str | os.PathLike) -> list[bytes]:
    """Read a key file: one 32-byte seed in hex per line, ``#`` comments allowed."""
    seeds = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            seed = bytes.fromhex(line)
        except ValueError as exc:
            raise MalformedKey(f"{path}:{lineno}: not hex") from exc
        if len(seed) != SEED_SIZE:
            raise MalformedKey(f"{path}:{lineno}: seed must be {SEED_SIZE} bytes")
        seeds.append(seed)
    return seeds
