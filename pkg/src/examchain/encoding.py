"""Canonical byte encoding shared by transactions, blocks, state entries and
consensus messages.

Integers are fixed-width big-endian, byte strings and text carry a 4-byte
big-endian length prefix. Fields are always written in declaration order, so
two values encode identically only if every field is equal.
"""
from __future__ import annotations

import struct

U8 = struct.Struct(">B")
U32 = struct.Struct(">I")
U64 = struct.Struct(">Q")
I64 = struct.Struct(">q")


class DecodeError(ValueError):
    """Raised when a byte string is not a well-formed canonical encoding."""


def u8(value: int) -> bytes:
    if not 0 <= value < 256:
        raise ValueError(f"u8 out of range: {value}")
    return U8.pack(value)


def u32(value: int) -> bytes:
    if not 0 <= value < 1 << 32:
        raise ValueError(f"u32 out of range: {value}")
    return U32.pack(value)


def u64(value: int) -> bytes:
    if not 0 <= value < 1 << 64:
        raise ValueError(f"u64 out of range: {value}")
    return U64.pack(value)


def i64(value: int) -> bytes:
    if not -(1 << 63) <= value < 1 << 63:
        raise ValueError(f"i64 out of range: {value}")
    return I64.pack(value)


def blob(data: bytes) -> bytes:
    return U32.pack(len(data)) + data


def text(value: str) -> bytes:
    return blob(value.encode("utf-8"))


def seq(items, encode_item) -> bytes:
    """Length-prefixed list: u32 count followed by each item's encoding."""
    parts = [U32.pack(len(items))]
    parts.extend(encode_item(item) for item in items)
    return b"".join(parts)


class Reader:
    """Cursor over an encoding; every read raises DecodeError on truncation."""

    __slots__ = ("data", "pos")

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def _take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise DecodeError("truncated input")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def u8(self) -> int:
        return U8.unpack(self._take(1))[0]

    def u32(self) -> int:
        return U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return U64.unpack(self._take(8))[0]

    def i64(self) -> int:
        return I64.unpack(self._take(8))[0]

    def fixed(self, n: int) -> bytes:
        return self._take(n)

    def blob(self) -> bytes:
        return self._take(self.u32())

    def text(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid utf-8 text") from exc

    def seq(self, read_item) -> list:
        count = self.u32()
        if count > len(self.data) - self.pos:
            raise DecodeError("sequence count exceeds remaining input")
        return [read_item(self) for _ in range(count)]

    def done(self) -> bool:
        return self.pos == len(self.data)

    def expect_done(self) -> None:
        if not self.done():
            raise DecodeError(f"{len(self.data) - self.pos} trailing bytes")
