"""Versioned binary checkpoints: named little-endian float32 tensors, CRC-checked.

Layout (all integers little-endian):
    magic b"DSCK" | u32 format version | u32 meta length | meta JSON (utf-8)
    | u32 tensor count | per tensor: u16 name length, name utf-8, u8 ndim,
      u32 dims..., raw float32 data | u32 CRC32 of everything after the magic
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from . import nn

MAGIC = b"DSCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _model_config_dict(cfg: nn.ModelConfig) -> dict:
    return {
        "block_depths": list(cfg.block_depths),
        "block_channels": list(cfg.block_channels),
        "bottleneck": cfg.bottleneck,
        "num_classes": cfg.num_classes,
        "input_shape": list(cfg.input_shape),
    }


def model_config_from_dict(d: dict) -> nn.ModelConfig:
    return nn.ModelConfig(
        block_depths=tuple(d["block_depths"]),
        block_channels=tuple(d["block_channels"]),
        bottleneck=bool(d["bottleneck"]),
        num_classes=int(d["num_classes"]),
        input_shape=tuple(d["input_shape"]),
    )


def save_checkpoint(model: nn.Model, meta: dict, path) -> None:
    tensors = dict(model.named_params())
    arrays = {name: np.ascontiguousarray(t.data, dtype="<f4") for name, t in tensors.items()}
    for name, buf in model.named_buffers().items():
        arrays[name] = np.ascontiguousarray(buf, dtype="<f4")

    full_meta = dict(meta)
    full_meta["model_config"] = _model_config_dict(model.config)
    full_meta.setdefault("model_name", model.name)
    meta_bytes = json.dumps(full_meta, sort_keys=True).encode("utf-8")

    body = io.BytesIO()
    body.write(struct.pack("<I", FORMAT_VERSION))
    body.write(struct.pack("<I", len(meta_bytes)))
    body.write(meta_bytes)
    body.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = arrays[name]
        nb = name.encode("utf-8")
        body.write(struct.pack("<H", len(nb)))
        body.write(nb)
        body.write(struct.pack("<B", arr.ndim))
        body.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.write(arr.tobytes())
    payload = body.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(MAGIC + payload + struct.pack("<I", crc))


def load_checkpoint(path) -> nn.Model:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    payload, stored_crc = raw[4:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")

    buf = io.BytesIO(payload)

    def read(fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, buf.read(size))

    (version,) = read("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} not supported (this build reads {FORMAT_VERSION})")
    (meta_len,) = read("<I")
    meta = json.loads(buf.read(meta_len).decode("utf-8"))
    (count,) = read("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = read("<H")
        name = buf.read(name_len).decode("utf-8")
        (ndim,) = read("<B")
        shape = read(f"<{ndim}I")
        data = np.frombuffer(buf.read(4 * int(np.prod(shape))), dtype="<f4").reshape(shape)
        arrays[name] = data

    try:
        cfg = model_config_from_dict(meta["model_config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: meta lacks a usable model_config ({exc})") from exc
    seed = int(meta.get("provenance", {}).get("seed", 0))
    model = nn.build_model(cfg, seed, name=meta.get("model_name"))

    params = model.named_params()
    buffers = model.named_buffers()
    expected = set(params) | set(buffers)
    if expected != set(arrays):
        missing = sorted(expected - set(arrays))[:3]
        extra = sorted(set(arrays) - expected)[:3]
        raise CheckpointError(
            f"{path}: stored tensors do not match the model config in meta "
            f"(missing {missing}, unexpected {extra})")
    for name, p in params.items():
        if p.data.shape != arrays[name].shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {arrays[name].shape}, "
                f"model config expects {p.data.shape}")
        p.data = arrays[name].astype(np.float32).copy()
    for name in buffers:
        model.set_buffer(name, arrays[name].astype(np.float32))
    model.meta = meta
    return model
