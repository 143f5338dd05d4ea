"""Portable binary tensor container and the checkpoint file built on it.

Tensor record layout (little-endian throughout):

    magic   4 bytes  b"VDT1"
    dtype   u8       1 = float32
    ndim    u8
    dims    u32 * ndim
    payload float32 * prod(dims), row-major

A checkpoint is a single file: magic b"VDC1", a u32-length-prefixed JSON
manifest (model metadata plus the ordered tensor name list), then one VDT1
record per name in manifest order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"VDT1"
CHECKPOINT_MAGIC = b"VDC1"
_DTYPE_F32 = 1


class TensorFormatError(ValueError):
    """Container bytes do not follow the VDT1/VDC1 layout."""


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f4")
    if a.ndim > 255:
        raise TensorFormatError("too many dimensions")
    head = TENSOR_MAGIC + struct.pack("<BB", _DTYPE_F32, a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def tensor_from_bytes(data: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor record; returns (array, offset past the record)."""
    if data[offset:offset + 4] != TENSOR_MAGIC:
        raise TensorFormatError(f"bad magic at byte {offset}")
    dtype_tag, ndim = struct.unpack_from("<BB", data, offset + 4)
    if dtype_tag != _DTYPE_F32:
        raise TensorFormatError(f"unknown dtype tag {dtype_tag}")
    dims = struct.unpack_from(f"<{ndim}I", data, offset + 6)
    start = offset + 6 + 4 * ndim
    count = 1
    for d in dims:
        count *= d
    end = start + 4 * count
    if end > len(data):
        raise TensorFormatError("payload truncated")
    arr = np.frombuffer(data[start:end], dtype="<f4").reshape(dims)
    return arr.copy(), end


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    arr, end = tensor_from_bytes(data)
    if end != len(data):
        raise TensorFormatError(f"{end - len(data)} trailing bytes")
    return arr


def save_checkpoint(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write metadata and named tensors as one deterministic file.

    Tensor order follows sorted names so identical inputs give identical bytes.
    """
    names = sorted(tensors)
    manifest = dict(meta)
    manifest["tensors"] = names
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", len(blob))
    out += blob
    for name in names:
        out += tensor_to_bytes(tensors[name])
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise TensorFormatError("not a checkpoint file (bad magic)")
    (mlen,) = struct.unpack_from("<I", data, 4)
    manifest = json.loads(data[8:8 + mlen].decode("utf-8"))
    offset = 8 + mlen
    tensors = {}
    for name in manifest.pop("tensors"):
        tensors[name], offset = tensor_from_bytes(data, offset)
    if offset != len(data):
        raise TensorFormatError(f"{len(data) - offset} trailing bytes")
    return manifest, tensors
