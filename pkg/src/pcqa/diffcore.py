"""Reverse-mode differentiation over float64 numpy arrays.

Every op builds a node holding its forward value and a closure that maps the
output gradient to gradients for its parents.  ``Tensor.backward`` walks the
graph in reverse topological order and accumulates into leaf ``.grad``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeMismatch",
    "NonFinite",
    "ZeroVector",
    "Tensor",
    "Param",
    "as_tensor",
    "op",
    "matmul",
    "add",
    "scale",
    "mean_over_axis",
    "sum_over_axis",
    "layer_norm",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "logsumexp_lastdim",
    "gelu",
    "normalize_rows",
    "cosine_sim",
    "concat",
    "cumsum_lastdim",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "grad_check",
    "no_grad",
]

GELU_C = math.sqrt(2.0 / math.pi)
_RECORDING = [True]


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    prev = _RECORDING[0]
    _RECORDING[0] = False
    try:
        yield
    finally:
        _RECORDING[0] = prev


class ShapeMismatch(ValueError):
    pass


class NonFinite(FloatingPointError):
    pass


class ZeroVector(ValueError):
    pass


class Tensor:
    """An array node in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __rsub__(self, other):
        return add(as_tensor(other), -self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return multiply(self, reciprocal(as_tensor(other)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_over_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean_over_axis(self, axis, keepdims)

    # -- reverse pass -----------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.array(g, dtype=np.float64)
                    else:
                        node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class Param(Tensor):
    """A named parameter.  Frozen params keep an all-zero gradient."""

    __slots__ = ("trainable",)

    def __init__(self, value, trainable: bool = True, name: str | None = None):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=trainable, name=name)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward value as a graph node.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFinite("operation produced a non-finite value")
    out = Tensor(data)
    if _RECORDING[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot combine shapes {a.shape} and {b.shape}") from exc


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    return op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    return op(a.data * s, (a,), lambda g: (g * s,))


def reciprocal(a: Tensor) -> Tensor:
    y = 1.0 / a.data
    return op(y, (a,), lambda g: (-g * y * y,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return op(x * x, (a,), lambda g: (2.0 * g * x,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return op(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return op(y, (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def backward(g):
        # subgradient 0 at the origin
        safe = np.where(y > 0, y, 1.0)
        return (np.where(y > 0, g / (2.0 * safe), 0.0),)

    return op(y, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return op(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return op(y, (a,), backward)


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return op(y, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    src = a.shape
    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        out = np.zeros(src)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return op(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return op(y, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


# -- reductions --------------------------------------------------------------


def sum_over_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean_over_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_over_axis(a, axis, keepdims), 1.0 / count)


def cumsum_lastdim(a: Tensor) -> Tensor:
    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, -1), axis=-1), -1),)

    return op(np.cumsum(a.data, axis=-1), (a,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return op(ad @ bd, (a, b), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeMismatch("layer_norm gain/bias must match the last axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        n = xd.shape[-1]
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n)
        flat = g.reshape(-1, n)
        return dx, (flat * xhat.reshape(-1, n)).sum(axis=0), flat.sum(axis=0)

    return op(xhat * gd + bias.data, (x, gain, bias), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return op(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax_lastdim(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    sm = np.exp(y)
    return op(y, (x,), lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


def logsumexp_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """log Σ exp(x) over the last axis, restricted to entries where ``mask`` is true."""
    x = as_tensor(x)
    xd = x.data
    keep = np.ones(xd.shape, dtype=bool) if mask is None else np.broadcast_to(mask, xd.shape)
    m = np.where(keep, xd, -np.inf).max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(np.where(keep, xd - m, 0.0)), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    y = (m + np.log(s))[..., 0]
    w = e / s
    return op(y, (x,), lambda g: (g[..., None] * w,))


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each vector along the last axis to unit length."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise ZeroVector("cannot normalise a zero vector")
    y = x.data / norm
    return op(y, (x,), lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,))


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity.  1-D inputs give a scalar, 2-D inputs the (n, m) matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeMismatch(f"cosine_sim of {a.shape} and {b.shape}")
    vec = a.ndim == 1 and b.ndim == 1
    if a.ndim == 1:
        a = reshape(a, (1, -1))
    if b.ndim == 1:
        b = reshape(b, (1, -1))
    out = matmul(normalize_rows(a), transpose(normalize_rows(b), (1, 0)))
    return reshape(out, ()) if vec else out


# -- verification ------------------------------------------------------------


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
    samples: int = 64,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Up to ``samples`` coordinates per parameter are probed (all of them when the
    parameter is smaller).  Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = np.zeros_like(p.data)
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NonFinite("loss is not finite at the probe point")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(loss_fn().data)
            flat[i] = orig - step
            fm = float(loss_fn().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise NonFinite("non-finite gradient during grad_check")
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
