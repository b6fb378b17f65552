"""Binary tensor format.

One tensor record::

    uint32   rank                 (little-endian)
    uint64   dims[rank]           (little-endian)
    float64  data[prod(dims)]     (little-endian, row-major)

A named-tensor container is::

    8 bytes  magic  b"OADNTNS1"
    uint32   count
    count x { uint16 name_len, name (utf-8), tensor record }
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"OADNTNS1"


def write_tensor(fh: BinaryIO, arr) -> None:
    arr = np.asarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise EOFError(f"truncated tensor data: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8")
    return data.reshape(shape).astype(np.float64)


def write_named_tensors(fh: BinaryIO, tensors: dict) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        write_tensor(fh, arr)


def read_named_tensors(fh: BinaryIO) -> dict[str, np.ndarray]:
    if _read_exact(fh, len(MAGIC)) != MAGIC:
        raise ValueError("not a named-tensor container")
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, n).decode("utf-8")
        out[name] = read_tensor(fh)
    return out
