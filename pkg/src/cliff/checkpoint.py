"""Binary checkpoint container.

Layout (little-endian)::

    b"CLIF" | u32 version | u32 meta_len | meta (UTF-8 JSON)
    | u32 n_tensors | n x (u32 name_len | name | u32 rank | rank x u32 dims | f32 payload)
    | u64 checksum

The checksum is a 64-bit BLAKE2b digest of every preceding byte.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)

MAGIC = b"CLIF"
VERSION = 1


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def encode(metadata: dict, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, array in tensors:
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(array, dtype="<f4")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + _digest(body)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint ends at byte {len(self.data)}, needed {end}")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError("not a CLIF checkpoint (bad magic bytes)")
    version = reader.u32()
    meta_raw = reader.take(reader.u32())
    tensors: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8", errors="replace")
        rank = reader.u32()
        if rank > 16:
            raise CheckpointChecksumError(f"implausible tensor rank {rank}; file is corrupt")
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        count = int(np.prod(dims)) if dims else 1
        payload = reader.take(4 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    body_end = reader.pos
    stored = reader.take(8)
    if reader.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - reader.pos} unexpected trailing bytes")
    if _digest(data[:body_end]) != stored:
        raise CheckpointChecksumError("checksum mismatch; checkpoint is corrupt")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    try:
        metadata = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointFormatError(f"unreadable metadata block: {exc}") from exc
    return metadata, tensors


def write(path, metadata: dict, tensors: list[tuple[str, np.ndarray]]) -> Path:
    """Atomically write a checkpoint file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(metadata, tensors))
    os.replace(tmp, path)
    return path


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
