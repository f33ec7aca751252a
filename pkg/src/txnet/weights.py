"""Binary named-tensor weight files.

Layout (all integers little-endian)::

    b"TXNW1" | u32 count | count x entry
    entry = u32 name_len | name (UTF-8) | u8 dtype (0=f32, 1=f64) | u8 rank | rank x u32 extent | raw data
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .errors import TxNetError

MAGIC = b"TXNW1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class WeightFormatError(TxNetError, ValueError):
    """Weight file is truncated, corrupt or not in the expected format."""


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise WeightFormatError(f"{name}: unsupported dtype {arr.dtype}")
        if arr.ndim > 255:
            raise WeightFormatError(f"{name}: rank {arr.ndim} too large")
        raw = name.encode("utf-8")
        tag = _TAGS[arr.dtype]
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise WeightFormatError(f"truncated file while reading {what} at byte {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(len(MAGIC), "magic")) != MAGIC:
        raise WeightFormatError("bad magic; not a TXNW1 weight file")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"name length of entry {i}"))
        try:
            name = bytes(take(name_len, f"name of entry {i}")).decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFormatError(f"entry {i}: name is not valid UTF-8") from None
        if name in out:
            raise WeightFormatError(f"duplicate tensor name {name!r}")
        tag, rank = struct.unpack("<BB", take(2, f"header of {name}"))
        if tag not in _DTYPES:
            raise WeightFormatError(f"{name}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name}"))
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(take(nbytes, f"data of {name}"), dtype=dtype).reshape(shape)
        out[name] = data.astype(dtype.newbyteorder("="), copy=True)
    if pos != len(view):
        raise WeightFormatError(f"{len(view) - pos} trailing bytes after {count} entries")
    return out


def save(path: str | Path | BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    data = encode(tensors)
    if hasattr(path, "write"):
        path.write(data)
    else:
        Path(path).write_bytes(data)


def load(path: str | Path | BinaryIO) -> "OrderedDict[str, np.ndarray]":
    if hasattr(path, "read"):
        return decode(path.read())
    return decode(Path(path).read_bytes())
