"""Little-endian binary parameter checkpoints.

Layout::

    magic   8 bytes  b"DPASEGCK"
    version u32
    header  u32 length + utf-8 text (``key=value`` lines, model config)
    count   u32
    count x (u32 name length, name bytes, 4 x u32 extents, raw float64 LE)
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"DPASEGCK"
VERSION = 1


def write_parameters(path, named_arrays, header=""):
    header_bytes = header.encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(header_bytes)), header_bytes]
    chunks.append(struct.pack("<I", len(named_arrays)))
    for name, array in named_arrays:
        array = np.asarray(array, dtype="<f8")
        if array.ndim != 4:
            raise FormatError(f"parameter {name!r} is not rank 4: {array.shape}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<4I", *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, size, what):
        if self.pos + size > len(self.buf):
            raise FormatError(
                f"{self.path}: truncated while reading {what} at offset {self.pos}"
            )
        out = self.buf[self.pos : self.pos + size]
        self.pos += size
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_parameters(path):
    """Return ``(header_text, [(name, array), ...])``."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset {len(MAGIC)}")
    (hlen,) = r.unpack("<I", "header length")
    header = r.take(hlen, "header").decode("utf-8")
    (count,) = r.unpack("<I", "parameter count")
    params = []
    for _ in range(count):
        (nlen,) = r.unpack("<I", "name length")
        name = r.take(nlen, "name").decode("utf-8")
        shape = r.unpack("<4I", f"extents of {name}")
        size = int(np.prod(shape)) * 8
        data = np.frombuffer(r.take(size, f"data of {name}"), dtype="<f8").reshape(shape)
        params.append((name, data.astype(np.float64)))
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: trailing bytes at offset {r.pos}")
    return header, params
