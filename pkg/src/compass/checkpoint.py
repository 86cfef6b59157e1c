"""Checkpoint container shared by every trainable module.

Layout::

    magic    4 bytes  b"CMPK"
    version  u8
    length   u32 little-endian, size of the JSON header
    header   UTF-8 JSON: model config, train config, seed, step, extra
             state, and the tensor index [{"name", "shape"}, ...]
    data     each indexed tensor as little-endian float32, in index order
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CMPK"
VERSION = 1
_HEAD = struct.Struct("<4sBI")


class CheckpointError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(tensors: dict[str, torch.Tensor | np.ndarray], meta: dict) -> bytes:
    index = []
    blobs = []
    for name, t in tensors.items():
        a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        a = np.ascontiguousarray(a, dtype="<f4")
        index.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = dict(meta)
    header["tensors"] = index
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    return _HEAD.pack(MAGIC, VERSION, len(raw)) + raw + b"".join(blobs)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < _HEAD.size:
        raise CheckpointError("checkpoint too short")
    magic, version, n = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _HEAD.size
    try:
        header = json.loads(data[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    pos = start + n
    tensors = {}
    for entry in header.pop("tensors"):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + 4 * count
        if end > len(data):
            raise CheckpointError(f"tensor {entry['name']} truncated")
        tensors[entry["name"]] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos = end
    if pos != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return tensors, header


def save(path, tensors, meta) -> None:
    atomic_write(path, dumps(tensors, meta))


def load(path):
    return loads(Path(path).read_bytes())


def save_model(path, model, train_config: dict | None = None, seed: int = 0, step: int = 0, extra=None, optimizer_tensors=None):
    tensors = dict(model.state_dict())
    if optimizer_tensors:
        tensors.update(optimizer_tensors)
    meta = {
        "model": model.cfg.to_dict(),
        "train": train_config,
        "seed": int(seed),
        "step": int(step),
        "extra": extra or {},
    }
    save(path, tensors, meta)


def load_model(path, **cfg_overrides):
    """Rebuild a CompassModel from a checkpoint; returns (model, tensors, meta)."""
    from .config import ModelConfig
    from .pipeline import CompassModel

    tensors, meta = load(path)
    cfg_dict = meta["model"]
    cfg = ModelConfig.from_dict(cfg_dict)
    for key, value in cfg_overrides.items():
        if value is None:
            continue
        if key == "predictor":
            cfg.predictor = value
        elif key == "padding":
            cfg.bl.padding = cfg.rc.padding = value
        else:
            raise ValueError(f"unknown override {key!r}")
    cfg.__post_init__()
    model = CompassModel(cfg)
    own = model.state_dict()
    missing = [k for k in own if k not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    state = {k: torch.from_numpy(tensors[k]).reshape(own[k].shape) for k in own}
    model.load_state_dict(state)
    return model, tensors, meta
