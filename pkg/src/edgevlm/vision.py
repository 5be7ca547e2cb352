"""Toy SigLIP-style patch encoder and the image formats it reads."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import VisionConfig
from .errors import CheckpointError, InputError
from .layers import attention, linear, merge_heads, split_heads
from .tensor import Tensor


@dataclass(frozen=True)
class Image:
    pixels: np.ndarray  # uint8 [height, width, 3]

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise InputError(f"image must be uint8 [H, W, 3], got {px.dtype} {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def filled(cls, size: int, rgb=(128, 128, 128)) -> "Image":
        px = np.empty((size, size, 3), dtype=np.uint8)
        px[:] = rgb
        return cls(px)


# -- PPM ---------------------------------------------------------------------
def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError("PPM header ended early")
        tokens.append(buf[start:pos])
    return tokens, pos


def parse_ppm(buf: bytes) -> Image:
    """Decode a binary (P6, maxval 255) PPM."""
    tokens, pos = _ppm_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise InputError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise InputError("PPM header has non-integer fields") from None
    if maxval != 255:
        raise InputError(f"only maxval 255 is supported, got {maxval}")
    if width < 1 or height < 1:
        raise InputError(f"PPM has invalid size {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    data = buf[pos:pos + need]
    if len(data) != need:
        raise InputError(f"PPM pixel data truncated: {len(data)} of {need} bytes")
    return Image(np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3).copy())


def read_ppm(path: str | os.PathLike) -> Image:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    return parse_ppm(buf)


def write_ppm(path: str | os.PathLike, image: Image) -> None:
    header = f"P6\n{image.width} {image.height}\n255\n".encode()
    Path(path).write_bytes(header + image.pixels.tobytes())


# -- synthetic data ----------------------------------------------------------
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (40, 70, 220),
    "yellow": (230, 220, 40),
    "white": (240, 240, 240),
    "purple": (150, 50, 190),
}
SHAPES = ("square", "bar", "pillar")
SIDES = ("left", "right")


@dataclass(frozen=True)
class SyntheticScene:
    color: str
    shape: str
    side: str

    @property
    def caption(self) -> str:
        return f"a {self.color} {self.shape} on the {self.side}"


def render_scene(scene: SyntheticScene, size: int, rng: np.random.Generator | None = None) -> Image:
    """Draw one colored rectangle on a dark background; ``rng`` jitters its placement."""
    px = np.full((size, size, 3), 16, dtype=np.uint8)
    unit = max(size // 8, 1)
    h, w = {"square": (3 * unit, 3 * unit), "bar": (2 * unit, 4 * unit), "pillar": (4 * unit, 2 * unit)}[scene.shape]
    h, w = min(h, size), min(w, size // 2 or 1)
    jitter = lambda hi: int(rng.integers(0, hi + 1)) if rng is not None and hi > 0 else hi // 2
    top = jitter(size - h)
    half = size // 2
    left = jitter(half - w) + (half if scene.side == "right" else 0)
    px[top:top + h, left:left + w] = COLORS[scene.color]
    return Image(px)


def synthetic_scenes(n: int, seed: int) -> list[SyntheticScene]:
    rng = np.random.default_rng(seed)
    colors = list(COLORS)
    return [
        SyntheticScene(colors[rng.integers(len(colors))], SHAPES[rng.integers(len(SHAPES))],
                       SIDES[rng.integers(len(SIDES))])
        for _ in range(n)
    ]


def synthetic_caption_dataset(n: int, size: int, seed: int = 0) -> list[tuple[Image, str]]:
    rng = np.random.default_rng([seed, 1])
    return [(render_scene(s, size, rng), s.caption) for s in synthetic_scenes(n, seed)]


def write_synthetic_dataset(out_dir: str | os.PathLike, n: int, size: int, seed: int = 0,
                            prompt: str = "") -> Path:
    """Write ``n`` PPM images plus ``captions.jsonl`` ({"image", "prompt", "response"}) into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, caption) in enumerate(synthetic_caption_dataset(n, size, seed)):
        name = f"img_{i:05d}.ppm"
        write_ppm(out / name, img)
        lines.append(json.dumps({"image": name, "prompt": prompt, "response": caption}))
    path = out / "captions.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


# -- encoder -----------------------------------------------------------------
def patchify(img: Image, cfg: VisionConfig) -> np.ndarray:
    """Image -> [1, grid^2, patch^2 * 3] patches (row-major over the grid), scaled to [-1, 1]."""
    if img.width != cfg.image_size or img.height != cfg.image_size:
        raise InputError(f"image is {img.width}x{img.height}, encoder expects {cfg.image_size}x{cfg.image_size}")
    g, p = cfg.grid, cfg.patch_size
    x = img.pixels.astype(T.default_dtype()) / 127.5 - 1.0
    x = x.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(1, g * g, p * p * 3)
    return np.ascontiguousarray(x)


def param_shapes(cfg: VisionConfig) -> dict[str, tuple[int, ...]]:
    d, hidden = cfg.d_vision, cfg.d_vision * cfg.mlp_ratio
    shapes = {
        "vision.patch_embed.weight": (cfg.patch_dim, d),
        "vision.patch_embed.bias": (d,),
        "vision.pos_embed": (cfg.seq_len, d),
    }
    for i in range(cfg.n_layers):
        pre = f"vision.layers.{i}."
        shapes.update({
            pre + "ln1.weight": (d,), pre + "ln1.bias": (d,),
            pre + "attn.wq": (d, d), pre + "attn.bq": (d,),
            pre + "attn.wk": (d, d), pre + "attn.bk": (d,),
            pre + "attn.wv": (d, d), pre + "attn.bv": (d,),
            pre + "attn.wo": (d, d), pre + "attn.bo": (d,),
            pre + "ln2.weight": (d,), pre + "ln2.bias": (d,),
            pre + "mlp.fc1.weight": (d, hidden), pre + "mlp.fc1.bias": (hidden,),
            pre + "mlp.fc2.weight": (hidden, d), pre + "mlp.fc2.bias": (d,),
        })
    return shapes


def check_weights(weights: dict[str, Tensor], shapes: dict[str, tuple[int, ...]]) -> None:
    for name, shape in shapes.items():
        if name not in weights:
            raise CheckpointError(f"missing weight {name}")
        if weights[name].shape != shape:
            raise CheckpointError(f"weight {name} has shape {weights[name].shape}, expected {shape}")


def encode_patches(patches: Tensor, cfg: VisionConfig, weights: dict[str, Tensor]) -> Tensor:
    """Patch embed + positions + bidirectional pre-norm blocks; all grid^2 tokens are kept."""
    w = weights
    x = linear(patches, w["vision.patch_embed.weight"], w["vision.patch_embed.bias"]) + w["vision.pos_embed"]
    for i in range(cfg.n_layers):
        pre = f"vision.layers.{i}."
        h = T.layernorm(x, w[pre + "ln1.weight"], w[pre + "ln1.bias"], 1e-6)
        q = split_heads(linear(h, w[pre + "attn.wq"], w[pre + "attn.bq"]), cfg.n_heads)
        k = split_heads(linear(h, w[pre + "attn.wk"], w[pre + "attn.bk"]), cfg.n_heads)
        v = split_heads(linear(h, w[pre + "attn.wv"], w[pre + "attn.bv"]), cfg.n_heads)
        x = x + linear(merge_heads(attention(q, k, v)), w[pre + "attn.wo"], w[pre + "attn.bo"])
        h = T.layernorm(x, w[pre + "ln2.weight"], w[pre + "ln2.bias"], 1e-6)
        h = T.gelu(linear(h, w[pre + "mlp.fc1.weight"], w[pre + "mlp.fc1.bias"]))
        x = x + linear(h, w[pre + "mlp.fc2.weight"], w[pre + "mlp.fc2.bias"])
    return x


def vision_encode(img: Image, cfg: VisionConfig, weights: dict[str, Tensor]) -> Tensor:
    """Image -> [1, grid^2, d_vision]. The encoder is frozen, so no graph is recorded."""
    check_weights(weights, param_shapes(cfg))
    with T.no_grad():
        return encode_patches(Tensor(patchify(img, cfg)), cfg, weights)
