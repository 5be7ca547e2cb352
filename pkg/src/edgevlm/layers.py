"""Building blocks shared by the vision encoder and the language model."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else y + b


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, S, d] -> [B, H, S, d/H]"""
    b, s, d = x.shape
    return T.transpose(T.reshape(x, (b, s, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, H, S, hd] -> [B, S, H*hd]"""
    b, h, s, hd = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, s, h * hd))


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over [B, H, S, hd] operands."""
    scores = T.matmul(q * (1.0 / math.sqrt(q.shape[-1])), T.swap_last(k))
    return T.matmul(T.softmax(scores, mask), v)


def causal_mask(n_query: int, n_key: int) -> np.ndarray:
    """Query i (the last ``n_query`` of ``n_key`` positions) sees keys ``<= n_key - n_query + i``."""
    offset = n_key - n_query
    return np.arange(n_key)[None, :] <= (np.arange(n_query)[:, None] + offset)
