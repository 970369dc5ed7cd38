"""Hashing, sub-chain assignment, and the signature scheme shared by all modules.

Every hash in the system is double SHA-256. Sub-chain assignment takes the
top bits of a script hash, most significant bit first; that bit order is a
protocol constant. Signatures are Ed25519 with deterministic key generation
from a seed, standing in for any scheme with the usual sign/verify contract.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

__all__ = [
    "Digest256",
    "KeyPair",
    "ConfigError",
    "MAX_SPLIT_DEPTH",
    "ADDRESS_HASH_LEN",
    "double_sha256",
    "hash_utxo",
    "assign_subchain",
    "address_hash",
    "keygen",
    "sign",
    "verify",
]

# A Digest256 is exactly 32 bytes; bytes ordering is big-endian integer
# ordering for equal lengths, so plain comparisons give the total order.
Digest256 = bytes

MAX_SPLIT_DEPTH = 16
ADDRESS_HASH_LEN = 20


class ConfigError(ValueError):
    """A consensus or simulator parameter is outside its supported range."""


def double_sha256(data: bytes) -> Digest256:
    """SHA-256 applied twice."""
    return hashlib.sha256(hashlib.sha256(data).digest()).digest()


def hash_utxo(script_pubkey: bytes) -> Digest256:
    """Hash of a canonically serialized locking script.

    All outputs with byte-identical scripts share this digest, which is the
    sole input to sub-chain routing.
    """
    return double_sha256(script_pubkey)


def assign_subchain(h: Digest256, depth: int) -> int:
    """Sub-chain index of a script hash after `depth` splits.

    Reads the top `depth` bits of `h` as an integer in [0, 2**depth).
    Depth 0 always maps to sub-chain 0.
    """
    if not 0 <= depth <= MAX_SPLIT_DEPTH:
        raise ConfigError(f"split depth {depth} outside [0, {MAX_SPLIT_DEPTH}]")
    if len(h) != 32:
        raise ValueError("digest must be 32 bytes")
    if depth == 0:
        return 0
    return int.from_bytes(h, "big") >> (256 - depth)


def address_hash(public: bytes) -> bytes:
    """20-byte address hash of a verification key."""
    return double_sha256(public)[:ADDRESS_HASH_LEN]


@dataclass(frozen=True)
class KeyPair:
    secret: bytes
    public: bytes
    address_hash: bytes


def keygen(seed: bytes) -> KeyPair:
    """Deterministic keypair from arbitrary seed bytes."""
    secret = double_sha256(seed)
    sk = Ed25519PrivateKey.from_private_bytes(secret)
    public = sk.public_key().public_bytes_raw()
    return KeyPair(secret=secret, public=public, address_hash=address_hash(public))


# Key objects are deterministic wrappers around their bytes; rebuilding them
# per call dominates signing cost, so keep small object caches.
_SK_CACHE: dict[bytes, Ed25519PrivateKey] = {}
_PK_CACHE: dict[bytes, Ed25519PublicKey] = {}
_KEY_CACHE_MAX = 1 << 16


def sign(secret: bytes, sighash: Digest256) -> bytes:
    sk = _SK_CACHE.get(secret)
    if sk is None:
        sk = Ed25519PrivateKey.from_private_bytes(secret)
        if len(_SK_CACHE) >= _KEY_CACHE_MAX:
            _SK_CACHE.clear()
        _SK_CACHE[secret] = sk
    return sk.sign(sighash)


# Repeated verifications of the same (key, message, signature) triple are
# common when one process hosts many simulated nodes; memoize them.
_VERIFY_CACHE: dict[tuple[bytes, bytes, bytes], bool] = {}
_VERIFY_CACHE_MAX = 1 << 20


def verify(public: bytes, sighash: Digest256, signature: bytes) -> bool:
    """True iff `signature` is valid for `sighash` under `public`.

    Malformed keys or signatures yield False, never an exception.
    """
    key = (public, sighash, signature)
    cached = _VERIFY_CACHE.get(key)
    if cached is not None:
        return cached
    try:
        pk = _PK_CACHE.get(public)
        if pk is None:
            pk = Ed25519PublicKey.from_public_bytes(public)
            if len(_PK_CACHE) >= _KEY_CACHE_MAX:
                _PK_CACHE.clear()
            _PK_CACHE[public] = pk
        pk.verify(signature, sighash)
        ok = True
    except (InvalidSignature, ValueError):
        ok = False
    if len(_VERIFY_CACHE) >= _VERIFY_CACHE_MAX:
        _VERIFY_CACHE.clear()
    _VERIFY_CACHE[key] = ok
    return ok
