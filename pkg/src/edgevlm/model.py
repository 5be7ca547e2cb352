"""Weight layout, initialization and component labels for the whole model."""

from __future__ import annotations

import numpy as np

from . import lm, projector, vision
from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError
from .tensor import Tensor

COMPONENTS = ("vision", "projector", "lm")
INIT_STD = 0.02
# LM matrices use std = gain / sqrt(fan_in); token embeddings are unit normal
LM_EMBED_STD = 1.0
LM_MATRIX_GAIN = 1.5
LM_HEAD_GAIN = 1.0

Weights = dict[str, Tensor]


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = vision.param_shapes(cfg.vision)
    shapes.update(projector.param_shapes(cfg))
    shapes.update(lm.param_shapes(cfg.lm))
    return shapes


def component_of(name: str) -> str:
    head = name.split(".", 1)[0]
    if head not in COMPONENTS:
        raise ConfigError(f"parameter {name!r} is not labeled with a component")
    return head


def _init_one(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    dtype = T.default_dtype()
    if name.endswith(("ln1.weight", "ln2.weight", "ln_f.weight")):
        return np.ones(shape, dtype)
    if leaf.startswith("b") and len(shape) == 1 or leaf == "bias":
        return np.zeros(shape, dtype)
    std = INIT_STD
    if name == "lm.tok_embed":
        std = LM_EMBED_STD
    elif name == "lm.head":
        std = LM_HEAD_GAIN / np.sqrt(shape[0])
    elif name.startswith("lm."):
        std = LM_MATRIX_GAIN / np.sqrt(shape[0])
    return rng.normal(0.0, std, size=shape).astype(dtype)


def init_weights(cfg: ModelConfig, seed: int = 0) -> Weights:
    """Zero biases and unit norm gains; encoder and projector matrices are Normal(0, 0.02).

    The LM uses fan-in scaled matrices and unit-normal token embeddings: a
    frozen random LM initialized at 0.02 emits near-constant logits that the
    projector cannot steer, which would leave projector-only training nothing
    to learn.

    Each component draws from its own stream, so changing the projector
    (strategy or ratio) leaves the encoder and LM weights unchanged.
    """
    cfg.validate()
    groups: dict[str, list[tuple[str, tuple[int, ...]]]] = {c: [] for c in COMPONENTS}
    for name, shape in expected_shapes(cfg).items():
        groups[component_of(name)].append((name, shape))
    weights: Weights = {}
    for idx, comp in enumerate(COMPONENTS):
        rng = np.random.default_rng([seed, idx])
        for name, shape in groups[comp]:
            weights[name] = Tensor(_init_one(name, shape, rng), requires_grad=True, name=name)
    return weights


def clone_weights(weights: Weights, requires_grad: bool | None = None) -> Weights:
    out = {}
    for name, t in weights.items():
        rg = t.requires_grad if requires_grad is None else requires_grad
        out[name] = Tensor(t.data.copy(), requires_grad=rg, name=name)
    return out


def parameter_count(weights: Weights, component: str | None = None) -> int:
    return sum(t.size for n, t in weights.items() if component is None or component_of(n) == component)


def as_dtype(weights: Weights, dtype) -> Weights:
    return {n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=n) for n, t in weights.items()}


__all__ = ["COMPONENTS", "Weights", "expected_shapes", "component_of", "init_weights",
           "clone_weights", "parameter_count", "as_dtype"]
