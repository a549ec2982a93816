"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"ZSLMCKPT"                     magic
    u32                             format version
    32 bytes                        SHA-256 of the canonical config JSON
    u32 + bytes                     metadata JSON (config, train classes)
    u32                             number of parameter blobs
    per blob:
        u16 + bytes                 name (UTF-8)
        u8 + u32 * ndim             shape
        u64                         payload length in bytes
        float64 * prod(shape)       values, little-endian
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from ..errors import FormatError, IncompatibleCheckpointError
from .config import ExperimentConfig
from .model import ZslModel

MAGIC = b"ZSLMCKPT"
VERSION = 1


def save_model(model: ZslModel, path) -> None:
    cfg = model.config
    meta = json.dumps({"config": cfg.to_dict(), "train_classes": model.train_classes},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), cfg.config_hash(),
             struct.pack("<I", len(meta)), meta]
    params = model.named_params()
    parts.append(struct.pack("<I", len(params)))
    for name, t in params.items():
        raw_name = name.encode("utf-8")
        data = np.ascontiguousarray(t.data, dtype="<f8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        payload = data.tobytes()
        parts.append(struct.pack("<Q", len(payload)) + payload)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated {what} at offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_model(path, config: ExperimentConfig | None = None) -> ZslModel:
    """Rebuild a model from ``path``; ``config``, if given, must hash-match the file."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version} at offset 8")
    stored_hash = r.take(32, "config hash")
    (meta_len,) = r.unpack("<I", "metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable metadata: {exc}") from None
    cfg = ExperimentConfig.from_dict(meta["config"])
    if cfg.config_hash() != stored_hash:
        raise FormatError(f"{path}: metadata does not match the stored config hash")
    if config is not None and config.config_hash() != stored_hash:
        raise IncompatibleCheckpointError(
            f"{path}: written for config {stored_hash.hex()[:12]}, got {config.config_hash().hex()[:12]}")

    model = ZslModel(cfg, meta["train_classes"])
    params = model.named_params()
    (count,) = r.unpack("<I", "blob count")
    if count != len(params):
        raise FormatError(f"{path}: {count} parameter blobs, model has {len(params)}")
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode("utf-8")
        (ndim,) = r.unpack("<B", "rank")
        shape = r.unpack(f"<{ndim}I", "shape")
        start = r.pos
        (nbytes,) = r.unpack("<Q", "payload length")
        expected = 8 * int(np.prod(shape))
        if nbytes != expected:
            raise FormatError(f"{path}: blob {name!r} declares {nbytes} bytes at offset {start}, "
                              f"shape {shape} needs {expected}")
        data = np.frombuffer(r.take(nbytes, f"blob {name!r}"), dtype="<f8").reshape(shape)
        if name not in params or params[name].shape != tuple(shape):
            raise FormatError(f"{path}: unexpected parameter {name!r} with shape {shape}")
        params[name].data = data.astype(np.float64)
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes at offset {r.pos}")
    return model


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
