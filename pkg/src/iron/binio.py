"""Little-endian helpers shared by the IRNT / IRND / IRNW file formats."""

from __future__ import annotations

import struct

from .errors import FormatError


class Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated file (need {n} bytes at offset {self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def expect_magic(self, magic: bytes, version: int):
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {magic!r}")
        (ver,) = self.unpack("I")
        if ver != version:
            raise FormatError(f"{self.what}: unsupported version {ver}, expected {version}")

    def finish(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")


def header(magic: bytes, version: int) -> bytes:
    return magic + struct.pack("<I", version)
