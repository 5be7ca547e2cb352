"""
Image-token compression and alignment into the language model's embedding space.

Three ways to shrink S vision tokens by a ratio r:

* reshape: r consecutive tokens (row-major over the patch grid) are
  concatenated along the feature axis, so [1, S, d] becomes [1, S/r, r*d]
  without any arithmetic;
* conv1d: a learned kernel of size r and stride r along the sequence;
* conv2d: the same on a [S, 1] image with kernel and stride (r, 1).

A two-layer GELU MLP then maps the compressed features to d_lm.
"""

from __future__ import annotations

from . import tensor as T
from .config import CompressionKind, CompressionStrategy, ModelConfig
from .errors import CheckpointError, ConfigError
from .layers import linear
from .tensor import Tensor


def _check_ratio(seq_len: int, ratio: int) -> None:
    if ratio < 1 or seq_len % ratio:
        raise ConfigError(f"compression ratio {ratio} does not divide sequence length {seq_len}")


def compress_reshape(emb: Tensor, ratio: int) -> Tensor:
    b, s, d = emb.shape
    _check_ratio(s, ratio)
    return T.reshape(emb, (b, s // ratio, ratio * d))


def uncompress_reshape(emb: Tensor, ratio: int) -> Tensor:
    b, s, d = emb.shape
    return T.reshape(emb, (b, s * ratio, d // ratio))


def compress_conv1d(emb: Tensor, ratio: int, weight: Tensor) -> Tensor:
    b, s, d = emb.shape
    _check_ratio(s, ratio)
    x = T.transpose(emb, (0, 2, 1))  # [b, d, S]
    y = T.conv1d(x, weight, stride=ratio)
    return T.transpose(y, (0, 2, 1))


def compress_conv2d(emb: Tensor, ratio: int, weight: Tensor) -> Tensor:
    b, s, d = emb.shape
    _check_ratio(s, ratio)
    x = T.reshape(T.transpose(emb, (0, 2, 1)), (b, d, s, 1))
    y = T.conv2d(x, weight, stride=(ratio, 1))
    return T.transpose(T.reshape(y, (b, y.shape[1], y.shape[2])), (0, 2, 1))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, r = cfg.vision.d_vision, cfg.strategy.ratio
    kind = cfg.strategy.kind
    shapes: dict[str, tuple[int, ...]] = {}
    if kind is CompressionKind.CONV1D:
        shapes["projector.conv.weight"] = (d, d, r)
    elif kind is CompressionKind.CONV2D:
        shapes["projector.conv.weight"] = (d, d, r, 1)
    d_in = r * d if kind is CompressionKind.RESHAPE else d
    shapes.update({
        "projector.fc1.weight": (d_in, cfg.d_proj),
        "projector.fc1.bias": (cfg.d_proj,),
        "projector.fc2.weight": (cfg.d_proj, cfg.lm.d_lm),
        "projector.fc2.bias": (cfg.lm.d_lm,),
    })
    return shapes


def compress(emb: Tensor, strategy: CompressionStrategy, weights: dict[str, Tensor]) -> Tensor:
    r = strategy.ratio
    if strategy.kind is CompressionKind.RESHAPE:
        return compress_reshape(emb, r)
    conv = weights.get("projector.conv.weight")
    if conv is None:
        raise CheckpointError(f"{strategy.kind.value} projector needs projector.conv.weight")
    if strategy.kind is CompressionKind.CONV1D:
        return compress_conv1d(emb, r, conv)
    return compress_conv2d(emb, r, conv)


def project(emb: Tensor, cfg: ModelConfig, weights: dict[str, Tensor]) -> Tensor:
    """[B, S, d_vision] -> [B, S / ratio, d_lm]"""
    for name, shape in param_shapes(cfg).items():
        if name not in weights or weights[name].shape != shape:
            got = weights[name].shape if name in weights else "missing"
            raise CheckpointError(f"projector weight {name}: expected {shape}, got {got}")
    w = weights
    h = compress(emb, cfg.strategy, w)
    h = T.gelu(linear(h, w["projector.fc1.weight"], w["projector.fc1.bias"]))
    return linear(h, w["projector.fc2.weight"], w["projector.fc2.bias"])
