"""Little-endian binary tensor container.

Layout::

    b"LTXB" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 n_tensors |
    n_tensors * (u32 name_len | name | u8 dtype | u32 ndim | ndim * u32 dim | data) |
    32-byte SHA-256 of everything before it
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"LTXB"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("int64"): 1, np.dtype("float64"): 2, np.dtype("uint8"): 3}


class ContainerError(ValueError):
    pass


class CorruptionError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def config_hash(cfg: Mapping) -> str:
    return sha256(canonical_json(cfg))[:16]


def _as_array(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    arr = np.asarray(t)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    if arr.dtype not in _CODES:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    return arr


def encode(meta: Mapping, tensors: Mapping[str, object], version: int = VERSION) -> bytes:
    meta_b = canonical_json(dict(meta))
    parts = [MAGIC, struct.pack("<II", version, len(meta_b)), meta_b, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = _as_array(tensors[name])
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BI", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes, version: int = VERSION) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 48 or blob[:4] != MAGIC:
        raise CorruptionError("not an LTXB container")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError("container checksum mismatch")
    ver, mlen = struct.unpack_from("<II", body, 4)
    if ver != version:
        raise VersionError(f"container version {ver}, expected {version}")
    off = 12
    meta = json.loads(body[off:off + mlen].decode("utf-8"))
    off += mlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BI", body, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=off).reshape(shape).copy()
        off += size
    if off != len(body):
        raise CorruptionError("trailing bytes in container")
    return meta, tensors


def write(path: str | Path, meta: Mapping, tensors: Mapping[str, object]) -> str:
    blob = encode(meta, tensors)
    Path(path).write_bytes(blob)
    return sha256(blob)


def read(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def tensors_hash(tensors: Mapping[str, object]) -> str:
    """Content hash of a tensor mapping (names, dtypes, shapes and bytes)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = _as_array(tensors[name])
        h.update(name.encode() + str(arr.dtype).encode() + str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]
