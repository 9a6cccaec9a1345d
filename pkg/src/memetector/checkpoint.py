"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    b"VITA"  version
    height width channels patch num_patches dim depth heads  variant(u8)
    count
    repeated count times:
        name_len  name(utf-8)  rank  dims...  float32 data (little-endian)

Training metadata (preprocessing statistics, epoch, validation accuracy)
is stored as extra tensors under the ``meta.`` prefix.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .model import ViTaConfig, ViTaParams, VARIANTS

MAGIC = b"VITA"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


@dataclass
class PreprocessStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError(f"mean {self.mean.shape} and std {self.std.shape} must be matching vectors")
        if np.any(self.std <= 0):
            raise ValueError("standard deviations must be positive")


@dataclass
class Checkpoint:
    params: ViTaParams
    stats: PreprocessStats | None = None
    epoch: int = 0
    val_accuracy: float = 0.0

    @property
    def config(self) -> ViTaConfig:
        return self.params.config


def _write_u32(buf, value: int) -> None:
    buf.write(_U32.pack(value))


def _read_u32(buf) -> int:
    raw = buf.read(4)
    if len(raw) != 4:
        raise CheckpointError("truncated checkpoint")
    return _U32.unpack(raw)[0]


def encode(params: ViTaParams, extra: dict[str, np.ndarray] | None = None) -> bytes:
    config = params.config
    buf = io.BytesIO()
    buf.write(MAGIC)
    _write_u32(buf, FORMAT_VERSION)
    for value in (config.height, config.width, config.channels, config.patch,
                  config.num_patches, config.dim, config.depth, config.heads):
        _write_u32(buf, value)
    buf.write(bytes([VARIANTS.index(config.variant)]))

    named = [(n, t.data) for n, t in params.items()]
    named += list((extra or {}).items())
    _write_u32(buf, len(named))
    for name, data in named:
        data = np.ascontiguousarray(data, dtype="<f4")
        encoded = name.encode("utf-8")
        _write_u32(buf, len(encoded))
        buf.write(encoded)
        _write_u32(buf, data.ndim)
        for extent in data.shape:
            _write_u32(buf, extent)
        buf.write(data.tobytes())
    return buf.getvalue()


def decode(blob: bytes) -> tuple[ViTaConfig, dict[str, np.ndarray]]:
    buf = io.BytesIO(blob)
    if buf.read(4) != MAGIC:
        raise CheckpointError("not a ViTa checkpoint (bad magic)")
    version = _read_u32(buf)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    height, width, channels, patch, num_patches, dim, depth, heads = (_read_u32(buf) for _ in range(8))
    variant_raw = buf.read(1)
    if len(variant_raw) != 1 or variant_raw[0] >= len(VARIANTS):
        raise CheckpointError("bad variant byte")
    config = ViTaConfig(height, width, channels, patch, dim, depth, heads, VARIANTS[variant_raw[0]])
    if config.num_patches != num_patches:
        raise CheckpointError(f"patch count {num_patches} inconsistent with config")

    tensors = {}
    for _ in range(_read_u32(buf)):
        name = buf.read(_read_u32(buf)).decode("utf-8")
        shape = tuple(_read_u32(buf) for _ in range(_read_u32(buf)))
        size = int(np.prod(shape)) * 4
        raw = buf.read(size)
        if len(raw) != size:
            raise CheckpointError(f"truncated data for tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return config, tensors


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    extra = {
        "meta.epoch": np.array([ckpt.epoch]),
        "meta.val_accuracy": np.array([ckpt.val_accuracy]),
    }
    if ckpt.stats is not None:
        extra["meta.stats.mean"] = ckpt.stats.mean
        extra["meta.stats.std"] = ckpt.stats.std
    Path(path).write_bytes(encode(ckpt.params, extra))


def load_checkpoint(path) -> Checkpoint:
    config, tensors = decode(Path(path).read_bytes())
    meta = {n: tensors.pop(n) for n in list(tensors) if n.startswith("meta.")}
    params = ViTaParams(config, {n: Tensor(d, requires_grad=True, name=n, dtype=np.float32)
                                 for n, d in tensors.items()})
    stats = None
    if "meta.stats.mean" in meta:
        stats = PreprocessStats(meta["meta.stats.mean"], meta["meta.stats.std"])
    epoch = int(meta["meta.epoch"][0]) if "meta.epoch" in meta else 0
    val = float(meta["meta.val_accuracy"][0]) if "meta.val_accuracy" in meta else 0.0
    return Checkpoint(params, stats, epoch, val)
