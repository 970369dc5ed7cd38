"""Canonical byte encoding helpers.

Fixed-width big-endian integers and length-prefixed byte strings. Every
structure that gets hashed serializes through these, so the encoding must
stay injective and byte-stable.
"""

from __future__ import annotations

__all__ = [
    "ser_u8",
    "ser_u16",
    "ser_u32",
    "ser_u64",
    "ser_bytes",
    "Reader",
    "DecodeError",
]


class DecodeError(ValueError):
    """Input bytes do not parse as the expected structure."""


def ser_u8(v: int) -> bytes:
    return v.to_bytes(1, "big")


def ser_u16(v: int) -> bytes:
    return v.to_bytes(2, "big")


def ser_u32(v: int) -> bytes:
    return v.to_bytes(4, "big")


def ser_u64(v: int) -> bytes:
    return v.to_bytes(8, "big")


def ser_bytes(b: bytes) -> bytes:
    return ser_u32(len(b)) + b


class Reader:
    """Sequential decoder over a byte string."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError("truncated input")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "big")

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "big")

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "big")

    def bytes_(self) -> bytes:
        return self.take(self.u32())

    def done(self) -> bool:
        return self.pos == len(self.data)

    def expect_done(self) -> None:
        if not self.done():
            raise DecodeError("trailing bytes")
