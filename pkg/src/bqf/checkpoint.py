"""Flat binary checkpoint format, magic "BQF1".

Layout (all integers little-endian):

    4s   magic "BQF1"
    u32  format version (currently 1)
    u8   network dtype code (0 = f32, 1 = f64)
    u32  epoch
    u64  seed
    u32  meta length, then UTF-8 JSON (config echo, spec name, metrics tail)
    u32  tensor count
    per tensor: u16 name length + name, u8 dtype code, u8 ndim,
                u32 dims..., u64 payload bytes
    raw little-endian buffers, in manifest order

Tensor names are sorted, and the JSON meta is dumped with sorted keys, so
save -> load -> save is byte-identical. The file size is fully determined by
the header, which the loader verifies.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"BQF1"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
             np.dtype(np.int64): 2, np.dtype(np.uint8): 3}


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    version: int
    dtype_code: int
    epoch: int
    seed: int
    meta: dict
    tensors: dict[str, np.ndarray]


def _dtype_code(arr: np.ndarray) -> int:
    try:
        return _CODE_FOR[arr.dtype]
    except KeyError:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}") from None


def predicted_size(meta_bytes: int, tensors: dict[str, np.ndarray]) -> int:
    """Exact file size implied by the header for the given contents."""
    size = 4 + 4 + 1 + 4 + 8 + 4 + meta_bytes + 4
    for name in sorted(tensors):
        arr = tensors[name]
        size += 2 + len(name.encode()) + 1 + 1 + 4 * arr.ndim + 8 + arr.nbytes
    return size


def save_checkpoint(path, *, tensors: dict[str, np.ndarray], meta: dict,
                    epoch: int, seed: int, dtype_code: int = 0) -> Path:
    path = Path(path)
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<IBIQ", VERSION, dtype_code, epoch, seed),
             struct.pack("<I", len(meta_blob)), meta_blob,
             struct.pack("<I", len(tensors))]
    payloads = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        code = _dtype_code(arr)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(struct.pack("<Q", arr.nbytes))
        payloads.append(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())
    path.write_bytes(b"".join(parts + payloads))
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if len(raw) < 25:
        raise CheckpointError("truncated checkpoint header")
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError(f"bad magic {bytes(view[:4])!r}")
    version, dtype_code, epoch, seed = struct.unpack_from("<IBIQ", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 4 + 17
    (meta_len,) = struct.unpack_from("<I", view, off)
    off += 4
    if off + meta_len > len(raw):
        raise CheckpointError("truncated checkpoint meta")
    meta = json.loads(bytes(view[off:off + meta_len]).decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off:off + nlen]).decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", view, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", view, off) if ndim else ()
        off += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", view, off)
        off += 8
        manifest.append((name, code, tuple(shape), nbytes))
    expected = off + sum(m[3] for m in manifest)
    if len(raw) != expected:
        raise CheckpointError(f"checkpoint size {len(raw)} != header-predicted {expected}")
    tensors = {}
    for name, code, shape, nbytes in manifest:
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"unknown tensor dtype code {code}")
        arr = np.frombuffer(view[off:off + nbytes], dtype=_DTYPE_CODES[code]).reshape(shape)
        tensors[name] = np.array(arr)  # own the memory
        off += nbytes
    return Checkpoint(version=version, dtype_code=dtype_code, epoch=epoch,
                      seed=seed, meta=meta, tensors=tensors)
