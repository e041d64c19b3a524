"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough of a tensor engine for this model family: broadcasting
arithmetic, batched matmul, softmax, layer norm, the activations the
architecture needs, and a tape-based ``backward``.  Works in float32 for
training speed or float64 for gradient verification; the dtype follows
the arrays passed in.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation-mode forward passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, (np.ndarray, np.generic)):
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple["Tensor", ...] = ()

    # -- construction helpers ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph machinery -----------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a recorded scalar."""
        if self.data.size != 1:
            raise RuntimeError("backward() requires a scalar tensor")
        if not self.requires_grad or self._backward is None and not self._parents:
            raise RuntimeError("backward() called without a recorded forward graph")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:  # free intermediate grads eagerly
                    node.grad = None

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        out = _make(self.data + other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                _accum(self, _unbroadcast(g, self.data.shape))
                _accum(other, _unbroadcast(g, other.data.shape))
            out._backward = backward
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other, self.dtype)
        out = _make(self.data - other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                _accum(self, _unbroadcast(g, self.data.shape))
                _accum(other, _unbroadcast(-g, other.data.shape))
            out._backward = backward
        return out

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        out = _make(self.data * other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                _accum(self, _unbroadcast(g * other.data, self.data.shape))
                _accum(other, _unbroadcast(g * self.data, other.data.shape))
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other, self.dtype)
        out = _make(self.data / other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                _accum(self, _unbroadcast(g / other.data, self.data.shape))
                _accum(other, _unbroadcast(-g * self.data / (other.data ** 2), other.data.shape))
            out._backward = backward
        return out

    def __rtruediv__(self, other):
        return _as_tensor(other, self.dtype) / self

    def __neg__(self):
        out = _make(-self.data, (self,))
        if out.requires_grad:
            out._backward = lambda g: _accum(self, -g)
        return out

    def __pow__(self, exponent: float):
        out = _make(self.data ** exponent, (self,))
        if out.requires_grad:
            def backward(g):
                _accum(self, g * exponent * self.data ** (exponent - 1))
            out._backward = backward
        return out

    def __matmul__(self, other):
        other = _as_tensor(other, self.dtype)
        out = _make(self.data @ other.data, (self, other))
        if out.requires_grad:
            a, b = self.data, other.data

            def backward(g):
                if self.requires_grad:
                    if b.ndim == 2:
                        ga = g @ b.T
                    else:
                        ga = _unbroadcast(g @ b.swapaxes(-1, -2), a.shape)
                    _accum(self, ga)
                if other.requires_grad:
                    if b.ndim == 2 and a.ndim > 2:
                        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                    elif b.ndim == 2:
                        gb = a.T @ g
                    else:
                        gb = _unbroadcast(a.swapaxes(-1, -2) @ g, b.shape)
                    _accum(other, gb)
            out._backward = backward
        return out

    # -- elementwise functions -------------------------------------------------

    def exp(self):
        out = _make(np.exp(self.data), (self,))
        if out.requires_grad:
            out._backward = lambda g: _accum(self, g * out.data)
        return out

    def log(self):
        out = _make(np.log(self.data), (self,))
        if out.requires_grad:
            out._backward = lambda g: _accum(self, g / self.data)
        return out

    def sqrt(self):
        out = _make(np.sqrt(self.data), (self,))
        if out.requires_grad:
            out._backward = lambda g: _accum(self, g * 0.5 / out.data)
        return out

    def tanh(self):
        out = _make(np.tanh(self.data), (self,))
        if out.requires_grad:
            out._backward = lambda g: _accum(self, g * (1.0 - out.data ** 2))
        return out

    def relu(self):
        out = _make(np.maximum(self.data, 0), (self,))
        if out.requires_grad:
            out._backward = lambda g: _accum(self, g * (self.data > 0))
        return out

    def sigmoid(self):
        out = _make(_sigmoid(self.data), (self,))
        if out.requires_grad:
            out._backward = lambda g: _accum(self, g * out.data * (1.0 - out.data))
        return out

    def silu(self):
        """x * sigmoid(x), the swish gate used by the feed-forward blocks."""
        s = _sigmoid(self.data)
        out = _make(self.data * s, (self,))
        if out.requires_grad:
            out._backward = lambda g: _accum(self, g * (s + self.data * s * (1.0 - s)))
        return out

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            shape = self.data.shape

            def backward(g):
                if axis is None:
                    _accum(self, np.broadcast_to(g, shape).copy() if np.ndim(g) else np.full(shape, g, dtype=self.dtype))
                else:
                    if not keepdims:
                        g = np.expand_dims(g, axis)
                    _accum(self, np.broadcast_to(g, shape))
            out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make(self.data.reshape(shape), (self,))
        if out.requires_grad:
            orig = self.data.shape
            out._backward = lambda g: _accum(self, g.reshape(orig))
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out = _make(self.data.transpose(axes), (self,))
        if out.requires_grad:
            inverse = np.argsort(axes)
            out._backward = lambda g: _accum(self, g.transpose(inverse))
        return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


# --------------------------------------------------------------------------
# Free functions
# --------------------------------------------------------------------------

def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = _make(data, tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])
        out._backward = backward
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _make(s, (x,))
    if out.requires_grad:
        def backward(g):
            inner = (g * s).sum(axis=axis, keepdims=True)
            _accum(x, (g - inner) * s)
        out._backward = backward
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learnable gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat_data = (x.data - mu) * inv
    xhat = _make(xhat_data, (x,))
    if xhat.requires_grad:
        def backward(g):
            gm = g.mean(axis=-1, keepdims=True)
            gxm = (g * xhat_data).mean(axis=-1, keepdims=True)
            _accum(x, inv * (g - gm - xhat_data * gxm))
        xhat._backward = backward
    return xhat * gain + bias


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * Tensor(keep)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise numerically stable binary cross-entropy on logits."""
    x = logits.data
    t = np.asarray(targets, dtype=x.dtype)
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = _make(loss, (logits,))
    if out.requires_grad:
        out._backward = lambda g: _accum(logits, g * (_sigmoid(x) - t))
    return out
