"""Versioned binary checkpoints: a JSON config record plus named float64 arrays.

Layout (little-endian)::

    magic      8 bytes  b"CIFCKPT\\0"
    version    u32      (currently 1)
    meta_len   u32      length of the UTF-8 JSON record that follows
    meta       bytes    {"model": {...}, ...} - model config and free-form extras
    n_arrays   u32
    repeated n_arrays times:
        name_len u16, name (UTF-8), ndim u8, dims u32[ndim], data f64[prod(dims)]

Arrays are written in sorted name order so identical parameters always give
identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig

MAGIC = b"CIFCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, np.ndarray], extra: dict | None = None) -> Path:
    path = Path(path)
    meta = json.dumps({"model": cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        bname = name.encode()
        parts.append(struct.pack("<H", len(bname)) + bname)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    try:
        if data[:8] != MAGIC:
            raise CheckpointError("bad magic; not a checkpoint file")
        version, meta_len = struct.unpack_from("<II", data, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 16
        meta = json.loads(data[off:off + meta_len].decode())
        off += meta_len
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        params = {}
        for _ in range(n):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(shape))
            if off + 8 * count > len(data):
                raise CheckpointError(f"array {name!r} is truncated")
            params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
            off += 8 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from None
    if off != len(data):
        raise CheckpointError("trailing bytes after the last array")
    return ModelConfig.from_dict(meta["model"]), params, meta.get("extra", {})
