"""EKD1 binary checkpoints.

Layout, all integers little-endian::

    b"EKD1" | version:u32 | count:u32
    count x ( name_len:u32 | name:utf-8 | dtype:u8 | rank:u32 | dims:u32*rank | values )

Values are the raw little-endian element bytes in row-major order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EKD1"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
CODE_OF = {v.str: k for k, v in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def encode(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        if le.str not in CODE_OF:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", CODE_OF[le.str], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=le).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict:
    if buf[:4] != MAGIC:
        raise CheckpointError("not an EKD1 checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BI", buf, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            if code not in DTYPE_CODES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            dt = DTYPE_CODES[code]
            nbytes = dt.itemsize * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(buf):
                raise CheckpointError(f"{name}: truncated values")
            out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from None
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last entry")
    return out


def save(path, tensors: dict, sidecar: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(tensors))
    os.replace(tmp, path)
    if sidecar is not None:
        sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load(path) -> dict:
    try:
        return decode(Path(path).read_bytes())
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_sidecar(path) -> dict:
    p = sidecar_path(path)
    try:
        return json.loads(p.read_text())
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint sidecar {p}: {e}") from None
