"""Architectural hyperparameters for the encoder, projector and language model."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field

from .errors import ConfigError

SUPPORTED_RATIOS = (1, 3, 9, 81)


class CompressionKind(str, enum.Enum):
    RESHAPE = "reshape"
    CONV1D = "conv1d"
    CONV2D = "conv2d"


@dataclass(frozen=True)
class CompressionStrategy:
    kind: CompressionKind = CompressionKind.RESHAPE
    ratio: int = 9

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", CompressionKind(self.kind))
        except ValueError:
            raise ConfigError(f"unknown compression kind {self.kind!r}") from None
        if not isinstance(self.ratio, int) or self.ratio < 1:
            raise ConfigError(f"compression ratio must be a positive integer, got {self.ratio!r}")


@dataclass(frozen=True)
class VisionConfig:
    image_size: int = 216
    patch_size: int = 8
    d_vision: int = 64
    n_layers: int = 2
    n_heads: int = 2
    mlp_ratio: int = 4

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def seq_len(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def validate(self) -> None:
        if self.image_size < 1 or self.patch_size < 1:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_vision < 1 or self.n_heads < 1 or self.d_vision % self.n_heads:
            raise ConfigError(f"d_vision {self.d_vision} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 0:
            raise ConfigError("vision n_layers must be >= 0")


@dataclass(frozen=True)
class LMConfig:
    d_lm: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 261
    max_seq: int = 1024
    rope_theta: float = 10000.0

    @property
    def head_dim(self) -> int:
        return self.d_lm // self.n_heads

    def validate(self) -> None:
        if self.d_lm < 1 or self.n_heads < 1 or self.d_lm % self.n_heads:
            raise ConfigError(f"d_lm {self.d_lm} not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim {self.head_dim} must be even for rotary embeddings")
        if self.n_layers < 0 or self.d_ff < 1:
            raise ConfigError("lm n_layers must be >= 0 and d_ff >= 1")
        if self.vocab_size < 261:
            raise ConfigError(f"vocab_size {self.vocab_size} cannot hold 256 bytes + 5 specials")
        if self.rope_theta <= 0:
            raise ConfigError("rope_theta must be positive")


@dataclass(frozen=True)
class ModelConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    strategy: CompressionStrategy = field(default_factory=CompressionStrategy)
    d_proj: int = 128

    @property
    def image_tokens(self) -> int:
        return self.vision.seq_len // self.strategy.ratio

    def validate(self) -> "ModelConfig":
        self.vision.validate()
        self.lm.validate()
        r = self.strategy.ratio
        if self.vision.seq_len % r:
            raise ConfigError(f"compression ratio {r} does not divide {self.vision.seq_len} vision tokens")
        if self.d_proj < 1:
            raise ConfigError("d_proj must be positive")
        # BOS, IMG_START, image span, IMG_END and at least one text token
        if self.image_tokens + 4 > self.lm.max_seq:
            raise ConfigError(f"max_seq {self.lm.max_seq} cannot hold {self.image_tokens} image tokens")
        return self

    def with_strategy(self, kind, ratio: int) -> "ModelConfig":
        return ModelConfig(self.vision, self.lm, CompressionStrategy(kind, ratio), self.d_proj).validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"]["kind"] = self.strategy.kind.value
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {"vision", "lm", "strategy", "d_proj"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        try:
            cfg = cls(
                vision=_build(VisionConfig, d.get("vision", {}), "vision"),
                lm=_build(LMConfig, d.get("lm", {}), "lm"),
                strategy=_build(CompressionStrategy, d.get("strategy", {}), "strategy"),
                d_proj=int(d.get("d_proj", 128)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc


def _build(kind, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    fields = kind.__dataclass_fields__
    for key in values:
        if key not in fields:
            raise ConfigError(f"unknown field {section}.{key}")
    return kind(**values)
