"""NMCW parameter checkpoints.

Layout (little-endian): magic ``b"NMCW"``, version u16 = 1, count u32, then
per entry: name length u32, UTF-8 name, rank u32, rank x dim u32, float32
payload in row-major order.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from neuromoco.errors import CorruptionError, FormatError

MAGIC = b"NMCW"
VERSION = 1
_HEADER = struct.Struct("<4sHI")
_U32 = struct.Struct("<I")


def write_checkpoint(params: Mapping[str, np.ndarray], path) -> None:
    path = Path(path)
    chunks = [_HEADER.pack(MAGIC, VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(_U32.pack(len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    try:
        path.write_bytes(b"".join(chunks))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror}") from exc


def read_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: too short for an NMCW header")
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = _U32.unpack_from(buf, off)
            off += 4
            name = buf[off:off + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise CorruptionError(f"{path}: truncated parameter name")
            off += nlen
            (rank,) = _U32.unpack_from(buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if off + 4 * n > len(buf):
                raise CorruptionError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
            off += 4 * n
    except struct.error as exc:
        raise CorruptionError(f"{path}: truncated checkpoint") from exc
    if off != len(buf):
        raise CorruptionError(f"{path}: {len(buf) - off} trailing bytes")
    return out
