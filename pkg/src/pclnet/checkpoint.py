"""Binary checkpoint container.

Layout (little-endian)::

    b"PCLC" | u8 version | 32-byte model-config hash
    u32 n | n bytes of JSON metadata
    u32 count | count x tensor records

A tensor record is ``u16 name_len | name | u8 itemsize (4 or 8) | u8 ndim |
ndim x u32 dims | raw IEEE-754 data``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PCLC"
VERSION = 1
_DTYPES = {4: "<f4", 8: "<f8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, meta: dict, config_hash: bytes) -> None:
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    parts = [MAGIC, struct.pack("<B", VERSION), config_hash]
    blob = json.dumps(meta, sort_keys=True).encode()
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.itemsize not in _DTYPES or arr.dtype.kind != "f":
            raise ValueError(f"tensor {name}: unsupported dtype {arr.dtype}")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<BB", arr.dtype.itemsize, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.itemsize]).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path, expected_hash: bytes | None = None, allow_mismatch: bool = False):
    """Return ``(tensors, meta, config_hash)``."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
    version = blob[4]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = blob[5:37]
    if expected_hash is not None and digest != expected_hash and not allow_mismatch:
        raise CheckpointError(f"{path}: model configuration hash does not match")
    off = 37
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off : off + n])
    off += n
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + klen].decode()
        off += klen
        itemsize, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * itemsize
        if off + size > len(blob):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(blob, dtype=_DTYPES[itemsize], count=size // itemsize, offset=off).reshape(shape).copy()
        off += size
    return tensors, meta, digest
