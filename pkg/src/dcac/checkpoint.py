"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DCAC" | u32 format_version | u64 meta_len | meta JSON (utf-8, sorted keys)
    u32 n_arrays
    per array: u16 name_len | name | u8 dtype (0=f8, 1=f4) | u8 ndim | u64 dims... | data
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import CheckpointError

MAGIC = b"DCAC"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {"f8": 0, "f4": 1}


@dataclass
class Checkpoint:
    """Arrays in declaration order plus JSON-serialisable metadata.

    Array names are prefixed ``param:``, ``buffer:``, ``opt.m:`` or ``opt.v:``.
    """

    meta: dict
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def group(self, prefix: str) -> Dict[str, np.ndarray]:
        p = prefix + ":"
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.meta == other.meta and list(self.arrays) == list(other.arrays)
                and all(np.array_equal(self.arrays[k], other.arrays[k]) and
                        self.arrays[k].dtype == other.arrays[k].dtype for k in self.arrays))


def to_bytes(ckpt: Checkpoint, dtype: str = "f8") -> bytes:
    if dtype not in _CODES:
        raise ValueError(f"dtype must be one of {sorted(_CODES)}")
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<IQ", ckpt.format_version, len(meta)), meta,
             struct.pack("<I", len(ckpt.arrays))]
    for name, arr in ckpt.arrays.items():
        code = 0 if name.startswith(("opt.", "buffer:")) else _CODES[dtype]
        if arr.dtype == np.float32:
            code = 1
        data = np.asarray(arr, dtype=_DTYPES[code], order="C")  # ascontiguousarray promotes 0-d
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, data.ndim))
        parts.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        parts.append(data.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CheckpointError("not a DCAC checkpoint (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch (corrupt or truncated file)")
    r = _Reader(body)
    r.take(4)
    version, meta_len = r.unpack("<IQ")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format_version {version}, this build reads {FORMAT_VERSION}")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad metadata block ({exc})") from exc
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arrays[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after the last array")
    return Checkpoint(meta=meta, arrays=arrays, format_version=version)


def save_checkpoint(path, ckpt: Checkpoint, dtype: str = "f8") -> None:
    """Write atomically (temp file + rename) so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt, dtype))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path} ({exc})") from exc
    return from_bytes(buf)
