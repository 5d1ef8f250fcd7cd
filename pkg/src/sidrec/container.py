"""Versioned binary container for fitted models.

Layout (all little-endian)::

    b"SIDC" | u32 version | u32 len + kind (utf-8) | u32 len + meta (json, utf-8)
    | u32 n_arrays | n_arrays x (u16 len + name | u8 dtype | u8 ndim | ndim x u64 | raw)

Arrays are stored in C order with their exact dtype, so a save/load cycle is
bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SIDC"
VERSION = 1

_DTYPES = ["<f8", "<f4", "<i8", "<i4", "<u8", "<u4", "|u1", "|b1"]


class ContainerError(ValueError):
    pass


def save_container(path, kind: str, arrays: dict, meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    kind_bytes = kind.encode()
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(kind_bytes)), kind_bytes,
             struct.pack("<I", len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        code = dt.str if dt.str in _DTYPES else None
        if code is None:
            raise ContainerError(f"unsupported dtype {arr.dtype} for array {name!r}")
        arr = np.ascontiguousarray(arr, dtype=code)
        name_bytes = name.encode()
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<BB", _DTYPES.index(code), arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise OSError(f"cannot write container {path}: {exc}") from exc


def load_container(path, kind: str | None = None):
    """Return ``(kind, arrays, meta)``; checks ``kind`` when given."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ContainerError(f"{path}: not a model container (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", buf, off)
    off += 4
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise ContainerError(f"{path}: truncated container")
        out = buf[off:off + n]
        off += n
        return out

    (klen,) = struct.unpack("<I", take(4))
    got_kind = take(klen).decode()
    if kind is not None and got_kind != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, found {got_kind!r}")
    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(take(mlen).decode())
    (n_arrays,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(n_arrays):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        code, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = np.dtype(_DTYPES[code])
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = take(count * dt.itemsize)
        arrays[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    if off != len(buf):
        raise ContainerError(f"{path}: trailing bytes after last array")
    return got_kind, arrays, meta
