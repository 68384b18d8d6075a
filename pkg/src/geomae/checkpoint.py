"""EMCK checkpoint blobs: named tensors behind a small fixed header.

Layout (little-endian)::

    bytes 0-3  magic b"EMCK"
    byte  4    version (0x01)
    u32        entry count
    per entry, sorted by name:
        u16    name_len
        bytes  name (UTF-8)
        u8     dtype code (0=u8, 1=u16, 2=f32, 3=f64, 4=i64)
        u8     ndim
        u32    dims[ndim]
        bytes  raw row-major payload

Codes 0-2 are shared with the EVSH shard format.  JSON metadata travels as a
u8 tensor named ``meta.json``.
"""
from __future__ import annotations

import json
import os
import struct
from typing import Dict, Mapping

import numpy as np

MAGIC = b"EMCK"
VERSION = 1
META_KEY = "meta.json"

DTYPES = {
    0: np.dtype("<u1"),
    1: np.dtype("<u2"),
    2: np.dtype("<f4"),
    3: np.dtype("<f8"),
    4: np.dtype("<i8"),
}
CODES = {dt.newbyteorder("="): code for code, dt in DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _code_of(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("=")
    if dt not in CODES:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return CODES[dt]


def encode(tensors: Mapping[str, np.ndarray], meta: dict) -> bytes:
    entries = dict(tensors)
    entries[META_KEY] = np.frombuffer(
        json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8"), dtype=np.uint8
    )
    parts = [MAGIC, struct.pack("<BI", VERSION, len(entries))]
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        code = _code_of(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(blob: bytes):
    """Returns ``(tensors, meta)``."""
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic")
    if len(blob) < 9:
        raise CheckpointError("truncated payload")
    version, count = struct.unpack("<BI", blob[4:9])
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    pos = 9
    view = memoryview(blob)

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated payload")
        out = view[pos:pos + n]
        pos += n
        return out

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise CheckpointError(f"dtype code {code} out of range")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = DTYPES[code]
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if META_KEY not in tensors:
        raise CheckpointError("missing metadata entry")
    meta = json.loads(tensors.pop(META_KEY).tobytes().decode("utf-8"))
    return tensors, meta


def save(path, tensors: Mapping[str, np.ndarray], meta: dict) -> int:
    blob = encode(tensors, meta)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return len(blob)


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
