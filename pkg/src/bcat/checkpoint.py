"""BCKP checkpoint files.

Layout (little endian): magic ``BCKP``, u32 version, u32 config length,
config JSON (sorted keys), u32 parameter count, then per parameter in name
order: u32 name length, UTF-8 name, u32 ndim, u32 dims, float32 data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, params_from_arrays

MAGIC = b"BCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(cfg: ModelConfig, arrays: dict[str, np.ndarray], extra: dict | None = None) -> bytes:
    doc = {"model": cfg.to_dict()}
    if extra:
        doc["extra"] = extra
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, source: str = "<bytes>"):
    """Returns (ModelConfig, {name: float32 array}, extra dict)."""
    try:
        if buf[:4] != MAGIC:
            raise CheckpointError(f"{source}: bad magic {buf[:4]!r}")
        version, n_blob = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported version {version}")
        off = 12
        raw = buf[off:off + n_blob]
        if len(raw) != n_blob:
            raise CheckpointError(f"{source}: truncated config block")
        doc = json.loads(raw.decode("utf-8"))
        off += n_blob
        (n_params,) = struct.unpack_from("<I", buf, off)
        off += 4
        arrays = {}
        for _ in range(n_params):
            (n_name,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n_name].decode("utf-8")
            off += n_name
            (ndim,) = struct.unpack_from("<I", buf, off)
            shape = struct.unpack_from(f"<{ndim}I", buf, off + 4)
            off += 4 + 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 4 * n > len(buf):
                raise CheckpointError(f"{source}: truncated data for {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape)
            off += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"{source}: truncated checkpoint") from exc
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt config block: {exc}") from exc
    if off != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - off} trailing bytes")
    return ModelConfig.from_dict(doc["model"]), arrays, doc.get("extra", {})


def save_checkpoint(path, cfg: ModelConfig, params, extra: dict | None = None) -> None:
    arrays = {k: getattr(v, "data", v) for k, v in params.items()}
    Path(path).write_bytes(encode_checkpoint(cfg, arrays, extra))


def load_checkpoint(path):
    """Returns (ModelConfig, params as trainable Tensors, extra dict)."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    cfg, arrays, extra = decode_checkpoint(buf, str(path))
    return cfg, params_from_arrays(arrays), extra
