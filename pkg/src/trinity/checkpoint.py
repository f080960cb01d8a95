"""Named-tensor checkpoint files.

Layout (all integers little-endian)::

    b"TRIN"  u32 version  u32 count
    count x { u16 name_len, name (utf-8), u8 rank, rank x u32 dim, prod(dims) x f64 }
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"TRIN"
VERSION = 1


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr, dtype=np.float64)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 12:
        raise ParseError("checkpoint shorter than its header", offset=len(buf))
    if buf[:4] != MAGIC:
        raise ParseError(f"bad checkpoint magic {buf[:4]!r}, expected {MAGIC!r}", offset=0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=4)
    pos = 12
    out: dict[str, np.ndarray] = {}

    def need(n):
        if pos + n > len(buf):
            raise ParseError("checkpoint truncated", offset=pos)

    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 1)
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rank = buf[pos]
        pos += 1
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        need(8 * n)
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(dims)
        pos += 8 * n
    if pos != len(buf):
        raise ParseError("trailing bytes after last tensor", offset=pos)
    return out


def save(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(tensors))
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
