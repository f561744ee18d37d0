"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure computing the parents' gradient contributions. Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order, summing contributions when a tensor feeds several ops.

GELU uses the exact form ``x * Phi(x)`` with ``Phi`` the standard normal CDF
(computed through ``scipy.special.erf``), not the tanh approximation.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from vubert.errors import ContractError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor in the graph."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each appearing after all of its parents."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "subtract")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "multiply")

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    def backward(g):
        _accum(a, g * s)

    return _make(a.data * s, (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward(g):
        _accum(a, g * y)

    return _make(y, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra and layout

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``numpy.matmul``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accum(t, piece)

    return _make(out, tensors, backward)


def slice_(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; repeated indices sum in the backward pass."""
    out = np.array(a.data[idx], dtype=np.float64, copy=True)
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _accum(a, full)

    return _make(out, (a,), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; the backward pass scatter-adds into the rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])][0]
        raise IndexError(f"embedding_lookup: index {int(bad)} out of range for {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, full)

    return _make(table.data[ids], (table,), backward)


# ---------------------------------------------------------------- nonlinearities and normalization

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        _accum(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _make(y, (x,), backward)


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        _accum(x, g * (cdf + x.data * pdf))

    return _make(x.data * cdf, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then apply ``gain * xhat + bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    n = x.shape[-1]

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gain.data
            _accum(x, rstd / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True)))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` so eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g):
        _accum(x, g * keep)

    return _make(x.data * keep, (x,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of ``-log softmax(logits)[i, targets[i]]`` over rows."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n, v = logits.shape
    if n == 0:
        raise ContractError("cross_entropy over zero rows is undefined")
    if targets.min() < 0 or targets.max() >= v:
        raise IndexError(f"cross_entropy: target out of range for {v} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        _accum(logits, d * (g / n))

    return _make(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------- verification

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               coords: Iterable[tuple[int, ...]] | None = None) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` is re-evaluated on ``x`` with single coordinates nudged by ``+-h`` in
    place; ``coords`` restricts the check to a subset of flat indices.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if y.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
    y.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    x.requires_grad = was
    return _numeric_compare(lambda: f(x), x, analytic, h, coords)


def grad_check_many(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
                    max_coords: int | None = None, rng: np.random.Generator | None = None,
                    exclude: dict[str, np.ndarray] | None = None) -> dict[str, float]:
    """Per-parameter max relative error for a closure over many leaves.

    With ``max_coords`` set, each parameter is checked on that many randomly
    drawn coordinates instead of all of them. ``exclude`` maps a parameter
    name to flat indices that are never drawn.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    if loss.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {loss.shape}")
    loss.backward()
    errors = {}
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        pool = np.arange(p.data.size)
        if exclude and name in exclude:
            pool = np.setdiff1d(pool, exclude[name])
        if max_coords is not None and len(pool) > max_coords:
            pool = rng.choice(pool, size=max_coords, replace=False)
        coords = [np.unravel_index(i, p.shape) for i in pool]
        errors[name] = _numeric_compare(loss_fn, p, analytic, h, coords)
    return errors


def _numeric_compare(evaluate: Callable[[], Tensor], x: Tensor, analytic: np.ndarray, h: float,
                     coords) -> float:
    if coords is None:
        coords = list(np.ndindex(*x.shape)) if x.shape else [()]
    worst = 0.0
    with no_grad():
        for idx in coords:
            orig = x.data[idx]
            x.data[idx] = orig + h
            fp = float(evaluate().data)
            x.data[idx] = orig - h
            fm = float(evaluate().data)
            x.data[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
