"""Analytic token, energy and FLOP costs of feeding images to a language model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from . import lm
from .config import LMConfig
from .errors import InputError

TILE_PX = 512
TOKENS_PER_TILE = 170
BASE_TOKENS = 85
JOULES_PER_TOKEN = 0.7
BATTERY_JOULES = 50_000.0


def openai_token_cost(width: int, height: int) -> tuple[int, int]:
    """(tiles, tokens) under plain 512-px tiling: 170 tokens per tile plus 85."""
    if width < 1 or height < 1:
        raise InputError(f"image dimensions must be positive, got {width}x{height}")
    tiles = math.ceil(width / TILE_PX) * math.ceil(height / TILE_PX)
    return tiles, TOKENS_PER_TILE * tiles + BASE_TOKENS


def energy_estimate(tokens: int, joules_per_token: float = JOULES_PER_TOKEN,
                    battery_joules: float = BATTERY_JOULES) -> tuple[float, float]:
    """(joules, fraction of battery) spent processing ``tokens``."""
    if tokens < 0 or joules_per_token < 0:
        raise InputError("token count and joules per token must be nonnegative")
    if battery_joules <= 0:
        raise InputError("battery capacity must be positive")
    joules = tokens * joules_per_token
    return joules, joules / battery_joules


def lm_parameters(cfg: LMConfig) -> int:
    return sum(math.prod(s) for s in lm.param_shapes(cfg).values())


def prefill_flops(cfg: LMConfig, n_tokens: int) -> float:
    """Parameter matmuls over n tokens plus the quadratic attention score/value terms."""
    if n_tokens < 1:
        raise InputError("prefill needs at least one token")
    p = lm_parameters(cfg)
    return 2.0 * p * n_tokens + 2.0 * cfg.n_layers * n_tokens * n_tokens * cfg.d_lm


def decode_flops(cfg: LMConfig, context_len: int) -> float:
    if context_len < 0:
        raise InputError("context length must be nonnegative")
    return 2.0 * lm_parameters(cfg) + 2.0 * cfg.n_layers * context_len * cfg.d_lm


@dataclass
class CostReport:
    width: int
    height: int
    image_tokens: int
    tile_count: int
    energy_joules: float
    battery_fraction: float
    prefill_flops: float
    decode_flops_per_token: float

    def to_dict(self) -> dict:
        return asdict(self)


def cost_report(width: int, height: int, joules_per_token: float = JOULES_PER_TOKEN,
                battery_joules: float = BATTERY_JOULES, lm_cfg: LMConfig | None = None) -> CostReport:
    """Token and energy bill for one image; FLOPs are for prefilling those tokens into ``lm_cfg``."""
    lm_cfg = lm_cfg or LMConfig()
    tiles, tokens = openai_token_cost(width, height)
    joules, fraction = energy_estimate(tokens, joules_per_token, battery_joules)
    return CostReport(width, height, tokens, tiles, joules, fraction,
                      prefill_flops(lm_cfg, tokens), decode_flops(lm_cfg, tokens))
