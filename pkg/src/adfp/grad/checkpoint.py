"""Binary checkpoint container.

Layout (all integers little-endian)::

    "ADF1" | u32 version=1 | u32 tensor_count
    per tensor: u16 name_len | utf-8 name | u8 dtype (0=f32, 1=f64) | u8 rank
                | rank x u32 dims | raw little-endian payload
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .optim import ParameterSet
from .tensor import Tensor

MAGIC = b"ADF1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_tensors(named) -> bytes:
    """Serialize ``(name, array)`` pairs in the order given."""
    named = list(named)
    parts = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, arr in named:
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise TypeError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]!r}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> list[tuple[str, np.ndarray]]:
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated file while reading {what}: need {n} bytes, have {len(view) - pos}", pos)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    magic = bytes(take(4, "magic"))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}, expected {VERSION}", 4)
    out = []
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not valid UTF-8", start + 2) from None
        tag_pos = pos
        tag, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag}", tag_pos)
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = take(nbytes, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="), copy=True)
        out.append((name, arr))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last tensor", pos)
    return out


def serialize_checkpoint(params: ParameterSet, path) -> None:
    data = encode_tensors((name, t.data) for name, t in params.items())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def parse_checkpoint(path, requires_grad: bool = True) -> ParameterSet:
    with open(path, "rb") as fh:
        buf = fh.read()
    params = ParameterSet()
    for name, arr in decode_tensors(buf):
        params.add(name, Tensor(arr, requires_grad=requires_grad))
    return params
