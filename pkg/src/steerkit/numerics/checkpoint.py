"""Binary tensor checkpoints.

Layout (all integers little-endian)::

    magic   b"STKC"
    u32     format_version
    u32     tensor count
    u32     metadata length, then that many bytes of UTF-8 JSON
    per tensor:
        u16 name length, name (UTF-8)
        u8  ndim, then ndim x u64 dims
        prod(dims) x f64 row-major data
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..errors import FormatError, VersionError

MAGIC = b"STKC"
FORMAT_VERSION = 1


def encode(tensors: dict[str, torch.Tensor], meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<III", FORMAT_VERSION, len(tensors), len(meta_bytes)), meta_bytes]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f8", copy=False)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, count, meta_len = r.unpack("<III")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        meta = json.loads(r.take(meta_len))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint metadata is not valid JSON: {exc}") from None
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float64))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return tensors, meta


def save(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> str:
    """Write a checkpoint and return its sha256 digest."""
    data = encode(tensors, meta)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path: str | Path) -> tuple[dict[str, torch.Tensor], dict, str]:
    """Read a checkpoint; returns ``(tensors, meta, sha256 digest)``."""
    data = Path(path).read_bytes()
    tensors, meta = decode(data)
    return tensors, meta, hashlib.sha256(data).hexdigest()
