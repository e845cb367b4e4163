"""Single-file named-tensor archive.

Layout (all integers little-endian): magic ``AFDN``, u32 format version,
u32 tensor count, then per tensor: u16 name length, UTF-8 name, u8 rank,
u32 per dimension, raw little-endian float64 values.  Bit-exact and
readable from any language.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"AFDN"
VERSION = 1


class ArchiveError(Exception):
    pass


def write_archive(path: str, tensors: dict) -> None:
    """Write name->array pairs in insertion order; atomic via temp+rename."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ArchiveError(f"tensor name too long: {name!r}")
            if arr.ndim > 0xFF:
                raise ArchiveError(f"tensor rank too large: {name!r}")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))
    os.replace(tmp, path)


def read_archive(path: str) -> dict:
    """Read the archive back into an ordered name->array dict."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ArchiveError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 12:
        raise ArchiveError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported format version {version}")
    out: dict = {}
    off = 12
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            if len(data[off:off + nlen]) != nlen:
                raise struct.error
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            nbytes = 8 * n
            if off + nbytes > len(data):
                raise struct.error
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(dims)
            off += nbytes
        except struct.error:
            where = f"after {len(out)} tensors" if not out else f"after tensor {next(reversed(out))!r}"
            raise ArchiveError(f"{path}: truncated or corrupt archive {where}") from None
        out[name] = np.ascontiguousarray(arr) if rank else arr.copy().reshape(())
    return out
