"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      5 bytes  b"WSOD1"
    version    u16
    n_tensors  u32
    per tensor:
        name_len u16, name (utf-8), dtype u8 (1 = f64), rank u8,
        dims rank×u64, payload product(dims)×f64
    config_len u32, config text (utf-8 key=value lines)
    state_len  u32, state (utf-8 JSON: iteration, rng state, extras)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"WSOD1"
VERSION = 1
DTYPE_F64 = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)     # name -> ndarray
    config: str = ""
    state: dict = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<HI", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<BB", DTYPE_F64, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes(order="C"))
    for text in (ckpt.config, json.dumps(ckpt.state, sort_keys=True)):
        b = text.encode()
        out.append(struct.pack("<I", len(b)) + b)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated while reading {what}", self.pos)
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        at = next(i for i, (a, b) in enumerate(zip(magic, MAGIC)) if a != b)
        raise CheckpointError(f"bad magic {magic!r}", at)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", r.pos - 2)
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        start = r.pos
        try:
            name = r.take(nlen, "tensor name").decode()
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not utf-8", start) from None
        dtype, rank = r.unpack("<BB", "dtype/rank")
        if dtype != DTYPE_F64:
            raise CheckpointError(f"unknown dtype code {dtype}", r.pos - 2)
        dims = r.unpack(f"<{rank}Q", "dims")
        n = int(np.prod(dims)) if rank else 1
        payload = r.take(8 * n, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    texts = []
    for what in ("config", "state"):
        (length,) = r.unpack("<I", f"{what} length")
        start = r.pos
        try:
            texts.append(r.take(length, what).decode())
        except UnicodeDecodeError:
            raise CheckpointError(f"{what} is not utf-8", start) from None
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint", r.pos)
    try:
        state = json.loads(texts[1])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"state is not JSON: {exc.msg}", start + exc.pos) from None
    return Checkpoint(tensors, texts[0], state)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
