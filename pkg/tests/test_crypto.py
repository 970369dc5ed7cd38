import hashlib

import pytest
from hypothesis import given, strategies as st

from splitscale import crypto
from splitscale.crypto import (
    ConfigError,
    address_hash,
    assign_subchain,
    double_sha256,
    hash_utxo,
    keygen,
    sign,
    verify,
)


def oracle_dsha(data: bytes) -> bytes:
    # independent composition straight from hashlib
    return hashlib.sha256(hashlib.sha256(data).digest()).digest()


class TestDoubleSha256:
    def test_empty_input_matches_known_vector(self):
        d = double_sha256(b"")
        assert d == oracle_dsha(b"")
        assert d.hex() == "5df6e0e2761359d30a8275058e299fcc0381534545f55cf43e41983f5d4c9456"

    def test_deterministic(self):
        data = b"split-scale"
        assert double_sha256(data) == double_sha256(data)

    def test_distinct_single_bytes_distinct_digests(self):
        assert double_sha256(b"\x00") == oracle_dsha(b"\x00")
        assert double_sha256(b"\x01") == oracle_dsha(b"\x01")
        assert double_sha256(b"\x00") != double_sha256(b"\x01")

    @given(st.binary(max_size=64))
    def test_matches_oracle(self, data):
        assert double_sha256(data) == oracle_dsha(data)


class TestHashUtxo:
    def test_same_script_bytes_same_digest(self):
        script = bytes.fromhex("76a914") + b"\xab" * 20 + bytes.fromhex("88ac")
        assert hash_utxo(script) == hash_utxo(bytes(script))

    def test_different_addresses_differ(self):
        s1 = bytes.fromhex("76a914") + b"\x01" * 20 + bytes.fromhex("88ac")
        s2 = bytes.fromhex("76a914") + b"\x02" * 20 + bytes.fromhex("88ac")
        assert hash_utxo(s1) == oracle_dsha(s1)
        assert hash_utxo(s2) == oracle_dsha(s2)
        assert hash_utxo(s1) != hash_utxo(s2)


class TestAssignSubchain:
    def test_depth_zero_always_zero(self):
        assert assign_subchain(b"\xff" * 32, 0) == 0
        assert assign_subchain(b"\x00" * 32, 0) == 0

    def test_top_bit_one_depth_one(self):
        assert assign_subchain(b"\x80" + b"\x00" * 31, 1) == 1
        assert assign_subchain(b"\x7f" + b"\xff" * 31, 1) == 0

    def test_top_two_bits_depth_two(self):
        assert assign_subchain(b"\xc0" + b"\x00" * 31, 2) == 3

    def test_depth_bound(self):
        with pytest.raises(ConfigError):
            assign_subchain(b"\x00" * 32, 17)
        with pytest.raises(ConfigError):
            assign_subchain(b"\x00" * 32, -1)

    def test_bad_digest_length(self):
        with pytest.raises(ValueError):
            assign_subchain(b"\x00" * 31, 1)

    @given(st.binary(min_size=32, max_size=32), st.integers(0, 15))
    def test_tree_structure(self, h, k):
        # a sub-chain at depth k splits into exactly its two children
        assert assign_subchain(h, k) == assign_subchain(h, k + 1) // 2

    @given(st.binary(min_size=32, max_size=32), st.integers(0, 16))
    def test_total_and_in_range(self, h, k):
        s = assign_subchain(h, k)
        assert 0 <= s < (1 << k)


class TestSignatures:
    def test_keygen_deterministic(self):
        a, b = keygen(b"seed"), keygen(b"seed")
        assert a == b
        assert keygen(b"other") != a
        assert len(a.address_hash) == 20
        assert a.address_hash == address_hash(a.public)

    def test_sign_verify_roundtrip(self):
        kp = keygen(b"alice")
        msg = double_sha256(b"payload")
        assert verify(kp.public, msg, sign(kp.secret, msg))

    def test_verify_other_key_fails(self):
        kp, other = keygen(b"alice"), keygen(b"bob")
        msg = double_sha256(b"payload")
        assert not verify(other.public, msg, sign(kp.secret, msg))

    def test_malformed_inputs_return_false(self):
        kp = keygen(b"alice")
        msg = double_sha256(b"payload")
        sig = sign(kp.secret, msg)
        assert not verify(b"short", msg, sig)
        assert not verify(kp.public, msg, b"not-a-signature")

    @given(st.integers(0, 255))
    def test_flipped_sighash_bit_fails(self, bit):
        kp = keygen(b"alice")
        msg = bytearray(double_sha256(b"payload"))
        sig = sign(kp.secret, bytes(msg))
        msg[bit // 8] ^= 1 << (bit % 8)
        assert not verify(kp.public, bytes(msg), sig)
