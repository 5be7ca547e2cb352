"""
Binary checkpoint format (little-endian throughout)::

    b"OVLM"                     magic
    u32  format_version         currently 1
    u32  config_len, bytes      UTF-8 JSON of the ModelConfig
    u32  tensor_count
    per tensor:
        u16 name_len, bytes     UTF-8 name
        u8  ndim
        u32 * ndim              dims
        u8  dtype               0 = float32
        payload                 4 * prod(dims) bytes, row-major
"""

from __future__ import annotations

import math
import os
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import (BadMagicError, CheckpointError, ConfigError, TensorSetError,
                     TruncatedCheckpointError, UnsupportedVersionError)
from .model import Weights, expected_shapes
from .tensor import Tensor

MAGIC = b"OVLM"
FORMAT_VERSION = 1
DTYPE_F32 = 0


def encode(weights: Weights, cfg: ModelConfig) -> bytes:
    validate_tensor_set({n: t.shape for n, t in weights.items()}, cfg)
    config = cfg.to_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(config)), config,
             struct.pack("<I", len(weights))]
    for name in expected_shapes(cfg):  # canonical order
        t = weights[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(struct.pack("<B", DTYPE_F32))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save(weights: Weights, cfg: ModelConfig, path: str | os.PathLike) -> None:
    data = encode(weights, cfg)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = memoryview(buf), 0

    def take(self, n: int, what: str) -> memoryview:
        if n > len(self.buf) - self.pos:
            raise TruncatedCheckpointError(
                f"checkpoint truncated while reading {what}: need {n} bytes, {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes, verify: bool = True) -> tuple[Weights, ModelConfig]:
    r = _Reader(buf)
    if len(buf) < 4 or bytes(r.take(4, "magic")) != MAGIC:
        raise BadMagicError(f"not a checkpoint: expected magic {MAGIC!r}")
    (version,) = r.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"checkpoint format version {version} is not supported")
    (config_len,) = r.unpack("<I", "config length")
    raw_cfg = r.take(config_len, "config block")
    try:
        cfg = ModelConfig.from_json(bytes(raw_cfg).decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointError(f"invalid config block: {exc}") from exc
    (count,) = r.unpack("<I", "tensor count")
    weights: Weights = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"name length of tensor #{i}")
        try:
            name = bytes(r.take(name_len, f"name of tensor #{i}")).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor #{i} has a non-UTF-8 name") from None
        if name in weights:
            raise CheckpointError(f"duplicate tensor {name}")
        (ndim,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{ndim}I", f"dims of {name}")
        (dtype,) = r.unpack("<B", f"dtype of {name}")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"tensor {name} has unsupported dtype code {dtype}")
        if ndim and min(dims) == 0:
            raise CheckpointError(f"tensor {name} has a zero dimension {dims}")
        nbytes = 4 * math.prod(dims)
        payload = r.take(nbytes, f"payload of {name}")
        data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
        weights[name] = Tensor(data, requires_grad=True, name=name)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the tensor table")
    if verify:
        validate_tensor_set({n: t.shape for n, t in weights.items()}, cfg)
    return weights, cfg


def load(path: str | os.PathLike, verify: bool = True,
         expect: ModelConfig | None = None) -> tuple[Weights, ModelConfig]:
    """Read a checkpoint. With ``expect``, its tensors must also fit that config (e.g. a run's strategy)."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    weights, cfg = decode(buf, verify)
    if expect is not None:
        validate_tensor_set({n: t.shape for n, t in weights.items()}, expect)
    return weights, cfg


def validate_tensor_set(shapes: dict[str, tuple[int, ...]], cfg: ModelConfig) -> None:
    """Names and shapes must match exactly what ``cfg`` implies."""
    expected = expected_shapes(cfg)
    missing = sorted(set(expected) - set(shapes))
    unexpected = sorted(set(shapes) - set(expected))
    if missing or unexpected:
        bits = []
        if missing:
            bits.append(f"missing {missing}")
        if unexpected:
            bits.append(f"unexpected {unexpected}")
        raise TensorSetError(f"tensor set does not match {cfg.strategy.kind.value} r={cfg.strategy.ratio}: "
                             + "; ".join(bits))
    for name, shape in expected.items():
        if tuple(shapes[name]) != shape:
            raise TensorSetError(f"tensor {name} has shape {tuple(shapes[name])}, config implies {shape}")


def header(path: str | os.PathLike) -> dict:
    """Config and tensor table of a checkpoint, for inspection."""
    weights, cfg = load(path, verify=False)
    return {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in weights.items()],
        "parameters": int(sum(t.size for t in weights.values())),
    }
