"""Bounds-checked little-endian reader shared by the dataset and checkpoint formats."""
from __future__ import annotations

import struct


class DataFormatError(ValueError):
    pass


class BinaryReader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataFormatError(
                f"{self.what} truncated while reading {field}: need {n} bytes at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, field: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))[0]

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise DataFormatError(f"{self.what} has {len(self.buf) - self.pos} unexpected trailing bytes")


def check_header(reader: BinaryReader, magic: bytes, version: int) -> None:
    found = reader.take(len(magic), "magic")
    if found != magic:
        raise DataFormatError(f"bad magic: expected {magic!r}, found {found!r}")
    v = reader.unpack("<H", "version")
    if v != version:
        raise DataFormatError(f"format version mismatch: expected {version}, found {v}")
