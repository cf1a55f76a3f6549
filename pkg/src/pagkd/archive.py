"""Named-parameter archive: the on-disk format for checkpoints and images.

Layout (all integers little-endian u32)::

    b"PGKD" | version | count
    count x { name_len | name (utf-8) | rank | dims[rank] | float64 LE payload }

Entries are written in the order given, so a dict round-trips bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PGKD"
VERSION = 1


class ArchiveError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ArchiveError("bad magic; not a PGKD archive")
    view = memoryview(blob)
    pos = 4
    version, count = struct.unpack_from("<II", view, pos)
    pos += 8
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", view, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims)
            pos += 8 * n
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as e:
        raise ArchiveError(f"truncated archive: {e}") from None
    if pos != len(blob):
        raise ArchiveError(f"{len(blob) - pos} trailing bytes after last entry")
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def digest(tensors: Mapping[str, np.ndarray]) -> str:
    """sha256 of the serialised archive; used to prove weights did not move."""
    return hashlib.sha256(dumps(tensors)).hexdigest()
