"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tape` is opened as a context manager; every op whose inputs require
gradients records a node on it. ``tape.backward(loss)`` walks the nodes in
reverse and accumulates into the ``grad`` buffers of leaf tensors.

    tape = Tape()
    with tape:
        loss = cross_entropy_logits(logits, targets)
    tape.backward(loss)
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

IGNORE_INDEX = -100

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """An n-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional["Node"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)


@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple
    index: int
    backward: Callable = field(repr=False)
    tape: "Tape" = field(repr=False, default=None)


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records ops for one forward pass; consumed by a single backward."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.cleared = False

    def __enter__(self):
        if self.cleared:
            raise TapeError("tape already consumed by backward")
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, kind: str, inputs: Sequence, out: Tensor, backward: Callable) -> None:
        node = Node(kind, tuple(inputs), len(self.nodes), backward, self)
        self.nodes.append(node)
        out._node = node

    def backward(self, loss: Tensor) -> None:
        if self.cleared:
            raise TapeError("backward called on a cleared tape")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or loss._node.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        pending: dict[int, np.ndarray] = {loss._node.index: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss._node.index + 1]):
            g = pending.pop(node.index, None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                src = t._node
                if src is not None and src.tape is self:
                    prev = pending.get(src.index)
                    pending[src.index] = ig if prev is None else prev + ig
                elif t.grad is None:
                    t.grad = np.array(ig, dtype=t.dtype, copy=True)
                else:
                    t.grad += ig
        self.nodes = []
        self.cleared = True


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, kind: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{kind} produced non-finite values")


def _make(out_data: np.ndarray, kind: str, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    _check_finite(out_data, kind)
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data)
    tape = _active_tape()
    if needs and tape is not None:
        out.requires_grad = True
        tape.record(kind, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e
    sa, sb = a.shape, b.shape
    return _make(out, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from e
    sa, sb = a.shape, b.shape
    return _make(out, "sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        # python scalars stay weakly typed so the tensor dtype wins
        s = float(b)
        return _make(a.data * s, "scale", (a,), lambda g: (g * s,))
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e
    ad, bd = a.data, b.data
    return _make(out, "mul", (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _make(np.asarray(x.data.sum(), dtype=dtype), "sum", (x,), lambda g: (np.broadcast_to(g, shape),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = xd * cdf

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _make(out, "gelu", (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


# -- shape -------------------------------------------------------------------

def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from e
    return _make(out, "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Optional[tuple] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather ``weight[ids]``."""
    ids = np.asarray(ids)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")
    shape, dtype = weight.shape, weight.dtype

    def backward(g):
        gw = np.zeros(shape, dtype=dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gw,)

    return _make(weight.data[ids], "embedding", (weight,), backward)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} has {a.shape[-1]} columns, "
            f"{b.shape} has {b.shape[-2]} rows"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape[:-2]} vs {b.shape[:-2]}") from e
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` for 2-D ``x`` as a single tape node."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear expects 2-D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear inner dimensions differ: {x.shape} and {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear bias must have shape ({w.shape[1]},), got {b.shape}")
        out += b.data

    def backward(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, "linear", inputs, backward)


# -- normalisation and attention --------------------------------------------

def softmax_masked(scores: Tensor, mask) -> Tensor:
    """Row softmax over the last axis with disallowed entries forced to 0.

    ``mask`` is a boolean array (True = allowed) broadcastable to ``scores``.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("softmax_masked: a row has no allowed position")
    s = np.where(mask, scores.data, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, "softmax_masked", (scores,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        gx = g * gd
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, "layer_norm", (x, gamma, beta), backward)


def cross_entropy_logits(logits: Tensor, targets, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean natural-log NLL over rows whose target is not ``ignore_index``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_logits expects (n, vocab) logits, got {logits.shape}")
    targets = np.asarray(targets).reshape(-1)
    n, vocab = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"{n} logit rows but {targets.shape[0]} targets")
    keep = targets != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy_logits: every target is ignored")
    rows = np.nonzero(keep)[0]
    t = targets[rows]
    if t.min() < 0 or t.max() >= vocab:
        raise IndexError(f"target id out of range [0, {vocab})")
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(rows.size), t]
    loss = np.asarray(nll.sum() / count, dtype=logits.dtype)
    dtype = logits.dtype

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(rows.size), t] -= 1.0
        full = np.zeros((n, vocab), dtype=dtype)
        full[rows] = p * (g / count)
        return (full,)

    return _make(loss, "cross_entropy", (logits,), backward)
