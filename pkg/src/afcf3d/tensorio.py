"""Checkpoint files and the 5-D debug tensor format.

Checkpoint (``.afck``)::

    b"AFCK"  u32 version  u32 header_bytes  header (UTF-8 JSON)  data

The JSON header holds the model config, the optimizer step and a manifest
of ``{"name", "kind", "shape", "offset"}`` records; ``offset`` counts bytes
from the start of the data block, which is every array concatenated as
little-endian float32 in manifest order.

Debug tensor (``.t5d``): a 26-byte header ``b"T5DF"``, u16 version, five
u32 extents ``(N, C, T, H, W)``, then little-endian float32 values in
C order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import ConfigurationError, IngestionError
from .model import Model, build_model
from .params import ParamStore

CKPT_MAGIC = b"AFCK"
CKPT_VERSION = 1
T5D_MAGIC = b"T5DF"
T5D_VERSION = 1
T5D_HEADER = struct.Struct("<4sH5I")
LE_F32 = np.dtype("<f4")


def _arrays(store: ParamStore, optimizer: bool):
    for n, e in store.entries.items():
        yield n, "param", e.value
        if optimizer:
            yield n, "adam_m", e.adam_m
            yield n, "adam_v", e.adam_v
    for n, b in store.buffers.items():
        yield n, "buffer", b


def checkpoint_bytes(model: Model, optimizer: bool = False) -> bytes:
    manifest, blobs, offset = [], [], 0
    for name, kind, arr in _arrays(model.params, optimizer):
        raw = np.ascontiguousarray(arr, dtype=LE_F32).tobytes()
        manifest.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": model.config.to_dict(), "step": model.params.step,
                         "entries": manifest}, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header + b"".join(blobs)


def save_checkpoint(model: Model, path, optimizer: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, optimizer))
    return path


def load_checkpoint(path, dtype=np.float32) -> Model:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read checkpoint {path}: {exc}") from exc
    return checkpoint_from_bytes(raw, dtype, str(path))


def checkpoint_from_bytes(raw: bytes, dtype=np.float32, path: str = "<bytes>") -> Model:
    if raw[:4] != CKPT_MAGIC or len(raw) < 12:
        raise IngestionError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + hlen:
        raise IngestionError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[12:12 + hlen])
        cfg = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise IngestionError(f"{path}: malformed checkpoint header: {exc}") from exc
    data = memoryview(raw)[12 + hlen:]
    model = build_model(cfg, dtype=dtype)
    store = model.params
    store.step = int(header["step"])
    for rec in header["entries"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = rec["offset"]
        if start + 4 * count > len(data):
            raise IngestionError(f"{path}: truncated data for {rec['name']}")
        arr = np.frombuffer(data, LE_F32, count, start).reshape(shape)
        name, kind = rec["name"], rec["kind"]
        if kind == "buffer":
            target = store.buffers.get(name)
        elif name in store:
            e = store.entries[name]
            target = {"param": e.value, "adam_m": e.adam_m, "adam_v": e.adam_v}.get(kind)
        else:
            target = None
        if target is None or target.shape != shape:
            raise IngestionError(f"{path}: entry {name!r} ({kind}, {shape}) does not match the model")
        target[...] = arr
    return model


def write_t5d(path, x) -> Path:
    x = np.asarray(x)
    if x.ndim > 5:
        raise ConfigurationError(f"debug tensors are at most 5-D, got {x.ndim}-D")
    x = x.reshape((1,) * (5 - x.ndim) + x.shape)
    path = Path(path)
    path.write_bytes(T5D_HEADER.pack(T5D_MAGIC, T5D_VERSION, *x.shape)
                     + np.ascontiguousarray(x, dtype=LE_F32).tobytes())
    return path


def read_t5d(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < T5D_HEADER.size:
        raise IngestionError(f"{path}: truncated debug tensor header")
    magic, version, *shape = T5D_HEADER.unpack_from(raw)
    if magic != T5D_MAGIC or version != T5D_VERSION:
        raise IngestionError(f"{path} is not a version-{T5D_VERSION} debug tensor")
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) != T5D_HEADER.size + 4 * count:
        raise IngestionError(f"{path}: payload size does not match extents {tuple(shape)}")
    return np.frombuffer(raw, LE_F32, count, T5D_HEADER.size).reshape(shape).astype(np.float32)


def load_weight(store: ParamStore, name: str, path) -> None:
    """Overwrite parameter ``name`` with an externally supplied debug tensor."""
    value = store[name].data
    arr = read_t5d(path)
    if arr.size != value.size:
        raise IngestionError(f"{path}: {arr.size} values cannot fill {name!r} of shape {value.shape}")
    value[...] = arr.reshape(value.shape)
