"""Binary tensor container.

Layout (all integers little-endian)::

    b"M2DT" | u32 version=1 | u32 count
    per tensor: u16 name_len | name (UTF-8) | u8 rank | rank x u64 dims | float32 LE payload
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np
import torch

MAGIC = b"M2DT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write(f: BinaryIO, tensors: Mapping[str, torch.Tensor | np.ndarray]) -> None:
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, len(tensors)))
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = np.asarray(arr, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name} has rank {arr.ndim} > 255")
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes(order="C"))


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor | np.ndarray]) -> None:
    """Write named tensors; the file is replaced atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        _write(f, tensors)
    os.replace(tmp, path)


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated file while reading {what}")
    return data


def load_tensors(path: str | os.PathLike) -> dict[str, torch.Tensor]:
    out: dict[str, torch.Tensor] = {}
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a tensor container")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, f"rank of {name}"))
            dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, f"dims of {name}"))
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(f, 4 * size, f"payload of {name}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
            out[name] = torch.from_numpy(arr)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after {count} tensors")
    return out
