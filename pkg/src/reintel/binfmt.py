"""Binary containers for float matrices and model checkpoints.

Matrix file: ``RMAT`` magic, uint32 rows, uint32 cols, then row-major
little-endian float32 values.

Checkpoint file: ``RCKP`` magic, uint32 version, uint32 manifest length, a UTF-8
JSON manifest, uint32 tensor count, then per tensor: uint32 name length, name,
uint32 ndim, ndim x uint32 dims, row-major little-endian float32 values.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MATRIX_MAGIC = b"RMAT"
CHECKPOINT_MAGIC = b"RCKP"
CHECKPOINT_VERSION = 1
_U32 = struct.Struct("<I")


class FormatError(ValueError):
    pass


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def _read_u32(fh) -> int:
    return _U32.unpack(_read_exact(fh, 4))[0]


def write_matrix(path: str | Path, matrix) -> None:
    arr = np.ascontiguousarray(np.asarray(matrix, dtype="<f4"))
    if arr.ndim != 2:
        raise FormatError(f"expected a 2-D matrix, got shape {arr.shape}")
    with Path(path).open("wb") as fh:
        fh.write(MATRIX_MAGIC + _U32.pack(arr.shape[0]) + _U32.pack(arr.shape[1]))
        fh.write(arr.tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    with Path(path).open("rb") as fh:
        if _read_exact(fh, 4) != MATRIX_MAGIC:
            raise FormatError(f"{path}: not a matrix file")
        rows, cols = _read_u32(fh), _read_u32(fh)
        data = _read_exact(fh, 4 * rows * cols)
    return np.frombuffer(data, dtype="<f4").reshape(rows, cols).astype(np.float32)


def write_checkpoint(path: str | Path, manifest: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    meta = json.dumps(manifest, sort_keys=True, ensure_ascii=False).encode("utf-8")
    buf.write(CHECKPOINT_MAGIC + _U32.pack(CHECKPOINT_VERSION) + _U32.pack(len(meta)) + meta)
    buf.write(_U32.pack(len(tensors)))
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f4", order="C")  # keeps 0-d shapes
        raw = name.encode("utf-8")
        buf.write(_U32.pack(len(raw)) + raw + _U32.pack(arr.ndim))
        for d in arr.shape:
            buf.write(_U32.pack(d))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with Path(path).open("rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        version = _read_u32(fh)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        manifest = json.loads(_read_exact(fh, _read_u32(fh)).decode("utf-8"))
        tensors = {}
        for _ in range(_read_u32(fh)):
            name = _read_exact(fh, _read_u32(fh)).decode("utf-8")
            shape = tuple(_read_u32(fh) for _ in range(_read_u32(fh)))
            count = int(np.prod(shape)) if shape else 1
            data = _read_exact(fh, 4 * count)
            tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return manifest, tensors
