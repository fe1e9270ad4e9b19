"""Raw little-endian array files and named-array bundles.

Layout of one array record: a 16-byte header ``<4sBB5H`` holding the magic
``b"MSRA"``, a dtype code, the number of dimensions (at most 5) and the
dimensions zero-padded to five entries, followed by the C-ordered payload.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"MSRA"
HEADER = struct.Struct("<4sBB5H")

DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("u1"),
    4: np.dtype("<i4"),
    5: np.dtype("<i8"),
}
_CODE_OF = {dt: code for code, dt in DTYPE_CODES.items()}


class RawFormatError(ValueError):
    pass


def write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    if dt not in _CODE_OF:
        raise RawFormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 5:
        raise RawFormatError("at most 5 dimensions are supported")
    if any(d > 0xFFFF for d in arr.shape):
        raise RawFormatError(f"dimension too large for header: {arr.shape}")
    dims = list(arr.shape) + [0] * (5 - arr.ndim)
    fh.write(HEADER.pack(MAGIC, _CODE_OF[dt], arr.ndim, *dims))
    fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_array(fh: BinaryIO) -> np.ndarray:
    head = fh.read(HEADER.size)
    if len(head) != HEADER.size:
        raise RawFormatError("truncated header")
    magic, code, ndim, *dims = HEADER.unpack(head)
    if magic != MAGIC:
        raise RawFormatError(f"bad magic {magic!r}")
    if code not in DTYPE_CODES or ndim > 5:
        raise RawFormatError(f"bad dtype code {code} or ndim {ndim}")
    dt = DTYPE_CODES[code]
    shape = tuple(dims[:ndim])
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise RawFormatError("truncated payload")
    return np.frombuffer(payload, dtype=dt).reshape(shape).copy()


def save_array(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_array(fh, arr)


def load_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_array(fh)


def save_bundle(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays as ``<u16 name length><utf-8 name><array record>`` entries."""
    buf = io.BytesIO()
    for name in arrays:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_array(buf, arrays[name])
    Path(path).write_bytes(buf.getvalue())


def load_bundle(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    fh = io.BytesIO(data)
    out = {}
    while fh.tell() < len(data):
        (n,) = struct.unpack("<H", fh.read(2))
        name = fh.read(n).decode("utf-8")
        out[name] = read_array(fh)
    return out
