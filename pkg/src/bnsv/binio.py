"""Little-endian binary container helpers used by every model/feature format.

Each artifact starts with a 4-byte magic. Integers are unsigned 32-bit,
tags are single bytes, reals are IEEE-754 (64-bit for models, 32-bit for
feature files). Readers report the byte offset of any fault.
"""

import os
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

FORMAT_VERSION = 1


class Writer:
    def __init__(self, magic):
        if len(magic) != 4:
            raise ValueError("magic must be 4 bytes")
        self._parts = [magic]

    def u8(self, value):
        self._parts.append(struct.pack("<B", value))

    def u32(self, value):
        self._parts.append(struct.pack("<I", value))

    def f64(self, array):
        self._parts.append(np.ascontiguousarray(array, dtype="<f8").tobytes())

    def f32(self, array):
        self._parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())

    def getvalue(self):
        return b"".join(self._parts)

    def save(self, path):
        write_atomic(path, self.getvalue())


class Reader:
    def __init__(self, data, magic, what="artifact"):
        self.data = memoryview(data)
        self.offset = 0
        self.what = what
        head = bytes(self._take(4, "magic"))
        if head != magic:
            raise ParseError(f"bad magic {head!r} for {what}, expected {magic!r}", 0)

    @classmethod
    def from_file(cls, path, magic, what="artifact"):
        return cls(Path(path).read_bytes(), magic, what)

    def _take(self, n, field):
        end = self.offset + n
        if end > len(self.data):
            raise ParseError(
                f"truncated {self.what}: need {n} bytes for {field}, "
                f"{len(self.data) - self.offset} available",
                self.offset,
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def u8(self, field="u8"):
        return struct.unpack("<B", self._take(1, field))[0]

    def u32(self, field="u32"):
        return struct.unpack("<I", self._take(4, field))[0]

    def version(self):
        start = self.offset
        v = self.u32("version")
        if v != FORMAT_VERSION:
            raise ParseError(f"unsupported {self.what} version {v}", start)
        return v

    def f64(self, shape, field="f64"):
        n = int(np.prod(shape, dtype=np.int64))
        buf = self._take(8 * n, field)
        return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)

    def f32(self, shape, field="f32"):
        n = int(np.prod(shape, dtype=np.int64))
        buf = self._take(4 * n, field)
        return np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(shape)

    def finish(self):
        if self.offset != len(self.data):
            raise ParseError(
                f"{len(self.data) - self.offset} trailing bytes in {self.what}", self.offset
            )


def write_atomic(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
