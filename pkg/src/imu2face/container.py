"""Versioned binary container for named tensors (network weights, blendshape rigs).

Layout, all integers little-endian::

    magic        4 bytes   b"I2FT"
    version      u16
    n_meta       u32
    n_meta x     key (u16 length + UTF-8), value (u32 length + UTF-8)
    n_tensors    u32
    n_tensors x  name (u16 length + UTF-8), dtype code (u8), ndim (u8),
                 shape (ndim x u64), payload (little-endian, C order)

Entries keep insertion order, so reading a file and writing it back yields
the same bytes.
"""
from __future__ import annotations

import hashlib
import struct

import numpy as np

from .exceptions import DataError

MAGIC = b"I2FT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("int64"): 2}


def _pack_str(s: str, width: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<" + width, len(raw)) + raw


def dumps(meta: dict, tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(meta))]
    for key, value in meta.items():
        parts.append(_pack_str(str(key), "H"))
        parts.append(_pack_str(str(value), "I"))
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise DataError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        parts.append(_pack_str(name, "H"))
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, source):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise DataError(f"{self.source}: truncated container")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, width):
        (n,) = self.unpack("<" + width)
        return self.take(n).decode("utf-8")


def loads(buf: bytes, source="<bytes>"):
    """Parse a container; returns ``(meta, tensors)`` as ordered dicts."""
    r = _Reader(buf, source)
    if r.take(4) != MAGIC:
        raise DataError(f"{source}: not a tensor container (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise DataError(f"{source}: unsupported container version {version}")
    (n_meta,) = r.unpack("<I")
    meta = {}
    for _ in range(n_meta):
        key = r.string("H")
        meta[key] = r.string("I")
    (n_tensors,) = r.unpack("<I")
    tensors = {}
    for _ in range(n_tensors):
        name = r.string("H")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise DataError(f"{source}: tensor {name!r} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        dtype = _DTYPES[code]
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype).reshape(shape)
        tensors[name] = data.astype(dtype.newbyteorder("="), copy=True)
    if r.pos != len(buf):
        raise DataError(f"{source}: trailing bytes after last tensor")
    return meta, tensors


def save(path, meta: dict, tensors: dict):
    with open(path, "wb") as fh:
        fh.write(dumps(meta, tensors))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read(), source=str(path))


def checksum(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
