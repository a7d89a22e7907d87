"""Minimal reverse-mode automatic differentiation over float64 NumPy arrays.

Only the operations the segmentation model actually uses are implemented.
Every op builds a node in a DAG; ``Tensor.backward()`` walks the graph in
reverse topological order and accumulates gradients into ``.grad``.
Gradient flow is exact (no stochastic ops), which is what the
finite-difference test suites rely on.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special as _sp_special

from .kernels import bilinear_sample_backward, bilinear_sample_forward

Array = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a gradient back to ``shape`` after NumPy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    # -- graph plumbing ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: Array) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return add(self, mul(other, -1.0))
    def __rsub__(self, other): return add(other, mul(self, -1.0))
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return mul(self, power(other, -1.0))
    def __rtruediv__(self, other): return mul(other, power(self, -1.0))
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __getitem__(self, idx): return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape)
    def transpose(self, *axes): return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad or self._parents != ()})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    tracked = tuple(p for p in parents if p.requires_grad or p._parents)
    if tracked:
        out._parents = tracked
        out._backward = backward
    return out


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t._parents != ()


# -- primitive ops ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g: Array) -> None:
        if _needs(a):
            a._accum(_unbroadcast(g, a.data.shape))
        if _needs(b):
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g: Array) -> None:
        if _needs(a):
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if _needs(b):
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    out_data = a.data ** exponent

    def backward(g: Array) -> None:
        if _needs(a):
            a._accum(g * exponent * a.data ** (exponent - 1.0))

    return _make(out_data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g: Array) -> None:
        if _needs(a):
            a._accum(g @ b.data.T)
        if _needs(b):
            b._accum(a.data.T @ g)

    return _make(out_data, (a, b), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g: Array) -> None:
        if _needs(a):
            a._accum(g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g: Array) -> None:
        if _needs(a):
            a._accum(g / a.data)

    return _make(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g: Array) -> None:
        if _needs(a):
            a._accum(g * (1.0 - out_data ** 2))

    return _make(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = _sp_special.expit(a.data)

    def backward(g: Array) -> None:
        if _needs(a):
            a._accum(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably; derivative is sigmoid(x)."""
    a = as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def backward(g: Array) -> None:
        if _needs(a):
            a._accum(g * _sp_special.expit(a.data))

    return _make(out_data, (a,), backward)


def erf(a) -> Tensor:
    a = as_tensor(a)
    out_data = _sp_special.erf(a.data)

    def backward(g: Array) -> None:
        if _needs(a):
            a._accum(g * (2.0 / np.sqrt(np.pi)) * np.exp(-a.data ** 2))

    return _make(out_data, (a,), backward)


def gelu(a) -> Tensor:
    """Exact Gaussian-error-linear unit, x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + _sp_special.erf(x * _INV_SQRT2))
    out_data = x * phi

    def backward(g: Array) -> None:
        if _needs(a):
            dens = _INV_SQRT2PI * np.exp(-0.5 * x ** 2)
            a._accum(g * (phi + x * dens))

    return _make(out_data, (a,), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> None:
        if not _needs(a):
            return
        if axis is None:
            a._accum(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = a.data.reshape(shape)
    in_shape = a.data.shape

    def backward(g: Array) -> None:
        if _needs(a):
            a._accum(g.reshape(in_shape))

    return _make(out_data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out_data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def backward(g: Array) -> None:
        if _needs(a):
            a._accum(np.transpose(g, inv))

    return _make(out_data, (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if _needs(t):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _make(out_data, tuple(ts), backward)


def take(a, idx) -> Tensor:
    """Indexing / gather; backward scatter-adds into the source."""
    a = as_tensor(a)
    out_data = a.data[idx]

    def backward(g: Array) -> None:
        if _needs(a):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)

    return _make(out_data, (a,), backward)


def bilinear_sample(feature_map, ys, xs) -> Tensor:
    """Sample an (H, W, C) map at fractional pixel coordinates.

    Out-of-range corner contributions are dropped (zero padding), and
    gradients flow into the map *and* the coordinates, which is what makes
    learned sampling offsets trainable.
    """
    fm, ys, xs = as_tensor(feature_map), as_tensor(ys), as_tensor(xs)
    out_data = bilinear_sample_forward(fm.data, ys.data, xs.data)

    def backward(g: Array) -> None:
        g_fm, g_ys, g_xs = bilinear_sample_backward(fm.data, ys.data, xs.data, g)
        if _needs(fm):
            fm._accum(g_fm)
        if _needs(ys):
            ys._accum(g_ys)
        if _needs(xs):
            xs._accum(g_xs)

    return _make(out_data, (fm, ys, xs), backward)


# -- composites ------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    # Shifting by a detached max is exact for softmax: the function is
    # invariant to the shift, so its gradient is too.
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(a - shift)
    return e / e.sum(axis=axis, keepdims=True)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    norm = power(sum_(power(a, 2.0), axis=axis, keepdims=True) + eps, 0.5)
    return a / norm


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on raw logits: softplus(x) - x*z."""
    logits = as_tensor(logits)
    targets = as_tensor(targets)
    return softplus(logits) - logits * targets


# -- parameter utilities ---------------------------------------------------

class ParamDict(dict):
    """Named trainable tensors; insertion order is the canonical order."""

    def add(self, name: str, data: Array) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=True)
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self.values():
            t.zero_grad()

    def flatten_values(self) -> Array:
        return np.concatenate([t.data.ravel() for t in self.values()]) if self else np.zeros(0)
