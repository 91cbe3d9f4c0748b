"""Versioned little-endian checkpoint files.

Layout: magic ``AVSKCKPT``, u32 version, 32-byte config hash, u32 step,
u32 config-JSON length + JSON, u32 parameter count, then per parameter:
u16 name length, name, u8 rank, u32 extents, f32 data.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from avsk import nn
from avsk.config import ModelConfig
from avsk.errors import InputError, StateMismatchError

MAGIC = b"AVSKCKPT"
VERSION = 1


def save_checkpoint(path, cfg: ModelConfig, params, step=0):
    flat = nn.flatten(params)
    body = cfg.canonical_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(bytes.fromhex(cfg.config_hash()))
        fh.write(struct.pack("<II", step, len(body)))
        fh.write(body)
        fh.write(struct.pack("<I", len(flat)))
        for name, t in flat.items():
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, expect_hash=None):
    """Returns ``(config, flat name -> float32 array, step)``.

    Raises StateMismatchError when the stored hash disagrees with the stored
    config or with ``expect_hash``.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise InputError(f"{path}: not an AVSKCKPT checkpoint")
    try:
        (version,) = struct.unpack_from("<I", data, 8)
        if version != VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {version}")
        stored = data[12:44].hex()
        step, n = struct.unpack_from("<II", data, 44)
        pos = 52
        cfg = ModelConfig.from_json(data[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        flat = {}
        for _ in range(count):
            (k,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + k].decode("utf-8")
            pos += k
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            flat[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
    except (struct.error, ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if cfg.config_hash() != stored:
        raise StateMismatchError(f"{path}: stored config hash does not match its config")
    if expect_hash is not None and expect_hash != stored:
        raise StateMismatchError(
            f"{path}: checkpoint config hash {stored[:12]} != requested {expect_hash[:12]}")
    return cfg, flat, step


def restore(path, expect_hash=None):
    """A ready-to-use :class:`Recognizer` from a checkpoint."""
    from avsk.model import Recognizer
    cfg, flat, step = load_checkpoint(path, expect_hash)
    model = Recognizer(cfg).initialize()
    model.set_parameters({k: v.astype(model.dtype_) for k, v in flat.items()}, step)
    return model
