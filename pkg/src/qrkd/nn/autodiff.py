"""Array-level reverse-mode automatic differentiation.

Each :class:`Tensor` stores its forward value, a gradient buffer and a closure
that pushes an upstream gradient to its parents. ``backward`` walks the graph
in reverse topological order. Leaf gradients accumulate across calls;
intermediate gradients are recomputed on every call.
"""
from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import GraphError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("values", "_grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self._grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- graph plumbing -------------------------------------------------

    @classmethod
    def from_op(cls, values, parents, backward) -> "Tensor":
        """Build a result tensor; ``backward(grad)`` returns one gradient per parent."""
        out = cls(values)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise GraphError("tensor is detached from any graph with trainable inputs")
        if grad is None:
            if self.values.size != 1:
                raise GraphError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.values)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node._grad is None else node._grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        if any(np.any(~np.isfinite(p.grad)) for p in order if p.is_leaf):
            raise FloatingPointError("non-finite gradient")

    # -- operators ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.values + b.values, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.values - b.values, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.values * b.values, (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values / b.values
    return Tensor.from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.values, a.shape), _unbroadcast(-g * out / b.values, b.shape)),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor.from_op(np.log(a.values), (a,), lambda g: (g / a.values,))


def square(a: Tensor) -> Tensor:
    return Tensor.from_op(a.values**2, (a,), lambda g: (2.0 * g * a.values,))


def safe_sqrt(a: Tensor) -> Tensor:
    """Square root whose gradient is taken as 0 where the input is 0."""
    out = np.sqrt(a.values)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
    return Tensor.from_op(out, (a,), lambda g: (g * scale,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return Tensor.from_op(a.values * mask, (a,), lambda g: (g * mask,))


def huber(r: Tensor, delta: float) -> Tensor:
    """Elementwise Huber loss: ``r^2/2`` inside ``|r| <= delta``, linear outside."""
    v = r.values
    inside = np.abs(v) <= delta
    out = np.where(inside, 0.5 * v * v, delta * (np.abs(v) - 0.5 * delta))
    slope = np.where(inside, v, delta * np.sign(v))
    return Tensor.from_op(out, (r,), lambda g: (g * slope,))


# ------------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.values.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- shaping


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor.from_op(a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return Tensor.from_op(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        out = np.zeros_like(a.values)
        np.add.at(out, index, g)
        return (out,)

    return Tensor.from_op(a.values[index], (a,), backward)


def take_rows(a: Tensor, rows) -> Tensor:
    """``a[rows]`` for an integer index array; repeated rows accumulate gradient."""
    rows = np.asarray(rows, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.values)
        np.add.at(out, rows, g)
        return (out,)

    return Tensor.from_op(a.values[rows], (a,), backward)


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.values @ b.values, (a, b),
        lambda g: (g @ np.swapaxes(b.values, -1, -2), np.swapaxes(a.values, -1, -2) @ g),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    out = x.values @ weight.values.T
    if bias is not None:
        out = out + bias.values

    def backward(g):
        grads = [g @ weight.values if x.requires_grad else None, g.T @ x.values]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


# ------------------------------------------------------------ softmax family


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return Tensor.from_op(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels``."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    logp = log_softmax(logits)
    picked = getitem(logp, (np.arange(labels.size), labels))
    return mul(tsum(picked), -1.0 / labels.size)


# ---------------------------------------------------------- convolution/pool


def conv2d_nhwc(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on channels-last input (N, H, W, C).

    ``weight`` keeps the conventional (out, in, kh, kw) layout.
    """
    n, h, w, c = x.shape
    o, c_w, kh, kw = weight.shape
    if c != c_w:
        raise ShapeError(f"conv expects {c_w} input channels, got {c}")
    xp = np.pad(x.values, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.values
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.reshape(n * ho * wo, c * kh * kw)
    wmat = weight.values.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.values

    def backward(g):
        g2 = g.reshape(-1, o)
        dw = (g2.T @ cols).reshape(weight.shape)
        db = g2.sum(axis=0) if bias is not None else None
        if not x.requires_grad:
            return [None, dw, db]
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[..., i, j]
        dx = dxp[:, padding:padding + h, padding:padding + w, :] if padding else dxp
        return [dx, dw, db]

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out.reshape(n, ho, wo, o), parents, backward)


def maxpool2d_nhwc(x: Tensor, size: int) -> Tensor:
    """Non-overlapping max pooling on (N, H, W, C); ties route to the first window slot."""
    n, h, w, c = x.shape
    if h % size or w % size:
        raise ShapeError(f"pool size {size} does not divide spatial shape {(h, w)}")
    ho, wo = h // size, w // size
    v = x.values.reshape(n, ho, size, wo, size, c)
    slots = [v[:, :, i, :, j, :] for i in range(size) for j in range(size)]
    out = slots[0].copy()
    for s in slots[1:]:
        np.maximum(out, s, out=out)

    def backward(g):
        dv = np.zeros_like(v)
        taken = np.zeros(out.shape, dtype=bool)
        k = 0
        for i in range(size):
            for j in range(size):
                hit = (slots[k] == out) & ~taken
                taken |= hit
                dv[:, :, i, :, j, :] = g * hit
                k += 1
        return (dv.reshape(n, h, w, c),)

    return Tensor.from_op(out, (x,), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input, weight (out, in, kh, kw)."""
    y = conv2d_nhwc(transpose(x, (0, 2, 3, 1)), weight, bias, stride, padding)
    return transpose(y, (0, 3, 1, 2))


def maxpool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping max pooling on NCHW input."""
    return transpose(maxpool2d_nhwc(transpose(x, (0, 2, 3, 1)), size), (0, 3, 1, 2))
