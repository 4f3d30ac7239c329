"""Binary container for named float64 arrays.

Layout: the 8-byte magic ``BEVLOOP1``, then one record per array:
u64 identifier length, UTF-8 identifier bytes, u64 rank, u64 sizes per
dimension, then the float64 values in row-major order. All integers and
floats are little-endian. Round trips are bit-exact. The same container
backs weight checkpoints, feature stores and descriptor stores.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"BEVLOOP1"
_U64 = struct.Struct("<Q")


def _encode_record(name: str, values: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(values, dtype="<f8")
    parts = [_U64.pack(len(raw)), raw, _U64.pack(arr.ndim)]
    parts.extend(_U64.pack(d) for d in arr.shape)
    parts.append(arr.tobytes())
    return b"".join(parts)


def write_container(path, entries: Mapping[str, np.ndarray]) -> None:
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        for name, values in entries.items():
            fh.write(_encode_record(name, values))


def append_record(path, name: str, values: np.ndarray) -> None:
    """Append one record, creating the container if the file is new."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    if not fresh:
        with open(path, "rb") as fh:
            if fh.read(len(MAGIC)) != MAGIC:
                raise FormatError(f"{path}: bad magic, not a parameter container")
    with open(path, "ab") as fh:
        if fresh:
            fh.write(MAGIC)
        fh.write(_encode_record(name, values))


def read_container(path) -> "OrderedDict[str, np.ndarray]":
    """Read every record in file order. Truncation names the failing byte offset."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a parameter container")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    off = len(MAGIC)
    total = len(blob)

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > total:
            raise FormatError(f"{path}: truncated {what} at byte {off}")
        piece = blob[off : off + n]
        off += n
        return piece

    while off < total:
        (name_len,) = _U64.unpack(take(8, "record header"))
        name = take(name_len, "identifier").decode("utf-8")
        (rank,) = _U64.unpack(take(8, "rank"))
        shape = tuple(_U64.unpack(take(8, "dimension"))[0] for _ in range(rank))
        count = 1
        for d in shape:
            count *= d
        values = np.frombuffer(take(8 * count, "values"), dtype="<f8").reshape(shape)
        if name in out:
            raise FormatError(f"{path}: duplicate identifier {name!r}")
        out[name] = values.astype(np.float64)
    return out
