"""Little-endian helpers for the package's self-describing binary files."""
import struct

import numpy as np

from vidtext.errors import FormatError


class Writer:
    def __init__(self):
        self._parts = []

    def raw(self, b):
        self._parts.append(bytes(b))

    def u32(self, v):
        self._parts.append(struct.pack("<I", v))

    def string(self, s):
        b = s.encode("utf-8")
        self.u32(len(b))
        self._parts.append(b)

    def f64(self, arr):
        self._parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def i32(self, arr):
        self._parts.append(np.ascontiguousarray(arr, dtype="<i4").tobytes())

    def getvalue(self):
        return b"".join(self._parts)


class Reader:
    """Sequential reader that reports the byte offset of any failure."""

    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def _take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def magic(self, expected):
        got = bytes(self._take(len(expected), "magic"))
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", 0)

    def u32(self, what="u32"):
        return struct.unpack("<I", self._take(4, what))[0]

    def string(self, what="string"):
        n = self.u32(what + " length")
        try:
            return bytes(self._take(n, what)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid utf-8 in {what}", self.pos - n) from exc

    def f64(self, count, what="float64 block"):
        return np.frombuffer(self._take(8 * count, what), dtype="<f8").astype(np.float64)

    def i32(self, count, what="int32 block"):
        return np.frombuffer(self._take(4 * count, what), dtype="<i4").astype(np.int64)

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError("trailing bytes after end of data", self.pos)
