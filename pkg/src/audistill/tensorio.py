"""Binary containers shared across modules.

Two little-endian formats live here:

* ``USADFEAT`` feature dumps: one dense float32 array plus its framerate.
  Layout: magic (8 bytes), version u32, ndims u32, dims u64 * ndims,
  framerate f32, dtype tag u32, row-major payload.
* ``USADCKPT`` named-tensor containers used for checkpoints: magic,
  version u32, JSON metadata (u64 length + UTF-8 bytes), tensor count u32,
  then per tensor name (u32 length + UTF-8), ndims u32, dims u64 * ndims and
  a float32 payload.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FEAT_MAGIC = b"USADFEAT"
FEAT_VERSION = 1
CKPT_MAGIC = b"USADCKPT"
CKPT_VERSION = 1

# dtype tag values; only float32 little-endian is defined.
DTYPE_F32_LE = 1


class FormatError(ValueError):
    """A binary file does not match the expected header or dimensions."""


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def encode_features(array: np.ndarray, framerate: float) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = FEAT_MAGIC + struct.pack("<II", FEAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    header += struct.pack("<fI", float(framerate), DTYPE_F32_LE)
    return header + arr.tobytes(order="C")


def decode_features(buf: bytes) -> tuple[np.ndarray, float]:
    if len(buf) < 16 or buf[:8] != FEAT_MAGIC:
        raise FormatError("bad magic: not a USADFEAT file")
    version, ndims = struct.unpack_from("<II", buf, 8)
    if version != FEAT_VERSION:
        raise FormatError(f"unsupported USADFEAT version {version}")
    off = 16
    if len(buf) < off + 8 * ndims + 8:
        raise FormatError("truncated USADFEAT header")
    dims = struct.unpack_from(f"<{ndims}Q", buf, off)
    off += 8 * ndims
    framerate, dtype_tag = struct.unpack_from("<fI", buf, off)
    off += 8
    if dtype_tag != DTYPE_F32_LE:
        raise FormatError(f"unsupported dtype tag {dtype_tag}")
    count = int(np.prod(dims, dtype=np.int64)) if ndims else 1
    if len(buf) - off != 4 * count:
        raise FormatError(
            f"payload holds {(len(buf) - off) // 4} values, header dims {tuple(dims)} need {count}"
        )
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims)
    return arr.astype(np.float32), float(framerate)


def write_features(path: str | os.PathLike, array: np.ndarray, framerate: float) -> None:
    _atomic_write(Path(path), encode_features(array, framerate))


def read_features(path: str | os.PathLike) -> tuple[np.ndarray, float]:
    return decode_features(Path(path).read_bytes())


def write_container(
    path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any]
) -> None:
    """Write named float32 tensors plus JSON metadata."""
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<IQ", CKPT_VERSION, len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    _atomic_write(Path(path), b"".join(parts))


def read_container(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a USADCKPT file")
    version, meta_len = struct.unpack_from("<IQ", buf, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 20
    meta = json.loads(buf[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + name_len].decode("utf-8")
        off += name_len
        (ndims,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{ndims}Q", buf, off)
        off += 8 * ndims
        n = int(np.prod(dims, dtype=np.int64)) if ndims else 1
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).copy()
        off += 4 * n
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return tensors, meta
