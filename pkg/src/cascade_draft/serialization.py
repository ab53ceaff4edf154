"""Binary container for named float32 tensors ("FEGL", little-endian).

Layout: magic ``FEGL``, u32 version, u32 tensor count, then per tensor
u32 name length, UTF-8 name, u32 rank, u64 dims[rank], f32 data.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"FEGL"
VERSION = 1


class FormatError(ValueError):
    """Malformed container; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def read(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.read(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.read(8, what))[0]


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    if r.read(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected b'FEGL'", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    count = r.u32("tensor count")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u32("name length")
        start = r.pos
        try:
            name = r.read(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", start) from None
        rank = r.u32("rank")
        dims = struct.unpack(f"<{rank}Q", r.read(8 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.read(4 * n, f"data of {name!r}"), dtype="<f4")
        out[name] = data.reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last tensor", r.pos)
    return out


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensors(tensors))


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())
