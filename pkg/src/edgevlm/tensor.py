"""
Minimal n-dimensional tensor with reverse-mode automatic differentiation.

Values live in row-major numpy buffers (float32 by default, float64 when
running gradient verification). Every differentiable op records a node on
the output tensor; ``backward`` walks those nodes in reverse topological
order and accumulates gradients into every tensor that requires them.

Convolutions are computed directly, one kernel tap at a time: the cost of
``conv1d`` is O(b * c_out * c_in * k * L_out) and ``conv2d`` is
O(b * c_out * c_in * kh * kw * H_out * W_out).
"""

from __future__ import annotations

import contextlib
import math
import threading
import weakref
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording a graph (inference)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Set the dtype of newly created tensors, e.g. ``precision(np.float64)``."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported compute dtype {dtype}")
    prev = default_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    out_ref: "weakref.ref[Tensor] | None" = None

    @property
    def out(self) -> "Tensor | None":
        return self.out_ref() if self.out_ref is not None else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = default_dtype()
        arr = np.asarray(data, dtype=dtype)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, bw) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, tuple(parents), bw, weakref.ref(out))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- graph ---------------------------------------------------------------
class Graph:
    """Topologically ordered list of the op nodes that produced a tensor."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            node = t._node
            if node is None:
                continue
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((t, True))
            for p in node.parents:
                if p._node is not None and id(p._node) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Populate ``grad`` on every tensor that requires it and feeds ``loss``.

    Gradients accumulate additively; callers zero leaf grads between steps.
    The graph is released afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    graph = graph or Graph.trace(loss)
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(graph.nodes):
        out = node.out
        if out is None or out.grad is None:
            continue
        grads = node.backward(out.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            g = g.astype(parent.dtype, copy=False)
            parent.grad = g.copy() if parent.grad is None else parent.grad + g
    for node in graph.nodes:
        out = node.out
        if out is not None:
            out._node = None
        node.out_ref = None


# -- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * a.dtype.type(c), (a,), "scale", lambda g: (g * c,))
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    c = math.sqrt(2.0 / math.pi)
    xd = x.data
    x2 = xd * xd
    th = np.tanh(c * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _make(out, (x,), "gelu", bw)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-np.clip(xd, -80, 80)))
    return _make(xd * s, (x,), "silu", lambda g: (g * (s + xd * s * (1.0 - s)),))


def log_sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = -np.logaddexp(0.0, -xd).astype(xd.dtype)
    s_neg = 1.0 / (1.0 + np.exp(np.clip(xd, -80, 80)))  # sigmoid(-x)
    return _make(out, (x,), "log_sigmoid", lambda g: (g * s_neg,))


# -- shape ops -----------------------------------------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} values) to {shape}")
    old = x.shape
    return _make(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose",
                 lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make(out, tensors, "concat", bw)


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), "getitem", bw)


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), "sum", bw)


def mean(x: Tensor, axis=None) -> Tensor:
    total = tsum(x, axis)
    return mul(total, total.size / x.size)


# -- linear algebra ------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[.., m, k] @ b[.., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(np.matmul(ad, bd), (a, b), "matmul", bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError(f"layernorm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm params {gamma.shape}/{beta.shape} do not match last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        dxhat = g * gd
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), "layernorm", bw)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Last-axis softmax; ``mask`` (broadcastable bool, True = keep) zeroes entries."""
    p = x.data - x.data.max(axis=-1, keepdims=True) if mask is None else np.where(mask, x.data, -np.inf)
    if mask is not None:
        p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), "softmax", bw)


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), "log_softmax", bw)


def take_last(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x[..., index[...]]``: one entry of the last axis per leading position."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"index shape {index.shape} does not match {x.shape[:-1]}")
    out = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return _make(out, (x,), "take_last", bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"token id out of range [0, {table.shape[0]})")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), "embedding", bw)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask`` is set."""
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    weight = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    sel = weight > 0
    if not sel.any():
        raise ContractError("cross_entropy over zero target positions")
    if targets[sel].min() < 0 or targets[sel].max() >= vocab:
        raise ShapeError(f"target id out of range [0, {vocab})")
    safe = np.where(sel, targets, 0)
    xd = logits.data
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    n = weight.sum()
    loss = -(picked * weight).sum() / n

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[..., None],
                          np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (weight / n)[..., None] * g,)

    return _make(np.asarray(loss, dtype=xd.dtype), (logits,), "cross_entropy", bw)


def rope(x: Tensor, positions, theta: float = 10000.0) -> Tensor:
    """Rotary embedding on ``x[.., T, head_dim]`` with absolute ``positions[T]`` (half-split pairing)."""
    hd = x.shape[-1]
    if hd % 2:
        raise ShapeError(f"rotary head_dim must be even, got {hd}")
    cos, sin = rope_tables(np.asarray(positions), hd, theta, x.dtype)
    half = hd // 2
    xd = x.data
    x1, x2 = xd[..., :half], xd[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def bw(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _make(out, (x,), "rope", bw)


def rope_tables(positions: np.ndarray, head_dim: int, theta: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


# -- convolution ---------------------------------------------------------
def conv1d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation ``x[b, c_in, L] * w[c_out, c_in, k]``, no padding."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d shape mismatch: x {x.shape}, w {w.shape}")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    _, _, length = x.shape
    k = w.shape[2]
    if length < k:
        raise ShapeError(f"conv1d input length {length} shorter than kernel {k}")
    lout = (length - k) // stride + 1
    xd, wd = x.data, w.data
    taps = [slice(j, j + stride * (lout - 1) + 1, stride) for j in range(k)]
    out = np.zeros((x.shape[0], w.shape[0], lout), dtype=xd.dtype)
    for j, sl in enumerate(taps):
        out += np.matmul(wd[:, :, j], xd[:, :, sl])

    def bw(g):
        gx = np.zeros_like(xd) if x.requires_grad else None
        gw = np.zeros_like(wd) if w.requires_grad else None
        for j, sl in enumerate(taps):
            if gx is not None:
                gx[:, :, sl] += np.matmul(wd[:, :, j].T, g)
            if gw is not None:
                gw[:, :, j] = np.einsum("bol,bcl->oc", g, xd[:, :, sl])
        return gx, gw

    return _make(out, (x, w), "conv1d", bw)


def conv2d(x: Tensor, w: Tensor, stride: tuple[int, int] = (1, 1)) -> Tensor:
    """Valid cross-correlation ``x[b, c_in, H, W] * w[c_out, c_in, kh, kw]``, no padding."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}")
    sh, sw = stride
    if sh < 1 or sw < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    b, cin, height, width = x.shape
    cout, _, kh, kw = w.shape
    if height < kh or width < kw:
        raise ShapeError(f"conv2d kernel ({kh}, {kw}) exceeds input extent ({height}, {width})")
    hout = (height - kh) // sh + 1
    wout = (width - kw) // sw + 1
    xd, wd = x.data, w.data
    taps = [(i, j, (slice(None), slice(None),
                    slice(i, i + sh * (hout - 1) + 1, sh),
                    slice(j, j + sw * (wout - 1) + 1, sw)))
            for i in range(kh) for j in range(kw)]
    out = np.zeros((b, cout, hout * wout), dtype=xd.dtype)
    for i, j, sl in taps:
        out += np.matmul(wd[:, :, i, j], xd[sl].reshape(b, cin, hout * wout))
    out = out.reshape(b, cout, hout, wout)

    def bw(g):
        g2 = g.reshape(b, cout, hout * wout)
        gx = np.zeros_like(xd) if x.requires_grad else None
        gw = np.zeros_like(wd) if w.requires_grad else None
        for i, j, sl in taps:
            if gx is not None:
                gx[sl] += np.matmul(wd[:, :, i, j].T, g2).reshape(b, cin, hout, wout)
            if gw is not None:
                gw[:, :, i, j] = np.einsum("bop,bcp->oc", g2, xd[sl].reshape(b, cin, hout * wout))
        return gx, gw

    return _make(out, (x, w), "conv2d", bw)


# -- construction helpers ------------------------------------------------
def normal(shape, rng: np.random.Generator, std: float = 0.02, name: str | None = None) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(default_dtype()), requires_grad=True, name=name)


def zeros(shape, name: str | None = None, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad, name=name)


def ones(shape, name: str | None = None, requires_grad: bool = True) -> Tensor:
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad=requires_grad, name=name)


__all__ = [
    "Tensor", "Graph", "Node", "backward", "no_grad", "precision", "default_dtype",
    "add", "sub", "mul", "gelu", "silu", "log_sigmoid", "reshape", "transpose", "swap_last",
    "concat", "getitem", "tsum", "mean", "matmul", "layernorm", "softmax", "log_softmax",
    "take_last", "embedding", "cross_entropy", "rope", "rope_tables", "conv1d", "conv2d",
    "normal", "zeros", "ones",
]
