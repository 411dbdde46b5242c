"""Flat, versioned binary container for named float32 arrays.

Layout (all integers little-endian uint32)::

    magic    8 bytes  b"CECTCKPT"
    version  uint32   currently 1
    digest   32 bytes SHA-256 of the architecture config
    count    uint32   number of records
    record * count:
        name_len uint32, name (UTF-8), rank uint32, extents uint32 * rank,
        payload  float32 little-endian, row-major, prod(extents) values
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import CectConfig, config_digest
from .errors import CheckpointError, ValidationError

MAGIC = b"CECTCKPT"
VERSION = 1


def encode(arrays: dict[str, np.ndarray], digest: bytes) -> bytes:
    if len(digest) != 32:
        raise ValueError("digest must be 32 bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), digest, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(blob: bytes, source: str = "<bytes>") -> tuple[bytes, dict[str, np.ndarray]]:
    """Return (digest, arrays)."""
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{source}: truncated checkpoint at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    digest = bytes(take(32))
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{source}: record name is not UTF-8") from exc
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    if pos != len(view):
        raise CheckpointError(f"{source}: {len(view) - pos} trailing bytes")
    return digest, arrays


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], cfg: CectConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(arrays, config_digest(cfg)))
    return path


def load_checkpoint(path: str | Path, cfg: CectConfig | None = None) -> dict[str, np.ndarray]:
    """Read a checkpoint; when ``cfg`` is given its digest must match."""
    path = Path(path)
    digest, arrays = decode(path.read_bytes(), str(path))
    if cfg is not None and digest != config_digest(cfg):
        raise ValidationError(f"{path}: checkpoint was written for a different model configuration")
    return arrays
