"""Binary array container used for checkpoints and feature fixtures.

Layout (all integers little-endian)::

    magic      8 bytes  b"NSVAARR\\0"
    version    uint32   (currently 1)
    count      uint32   number of arrays
    per array:
        name_len  uint32
        name      name_len bytes, UTF-8
        rank      uint32
        extents   rank x uint64
        data      prod(extents) x float64, C order

Arrays are stored as float64, so float32 and float64 arrays both round-trip
bit-exactly.  Arrays are written in the order given (sorted when a dict is
passed through :func:`save_arrays`), which keeps files byte-stable.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"NSVAARR\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic; not an array container")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    if off != len(blob):
        raise CheckpointError("trailing bytes after last array")
    return out


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
