"""Dense tensors with reverse-mode differentiation on top of numpy.

A :class:`Tensor` wraps an ``np.ndarray`` and, when any input requires a
gradient, records the primitive that produced it together with a closure
mapping the output cotangent to input cotangents.  :func:`grad` walks the
recorded graph once in reverse topological order.

Precision is float32 by default.  Gradient checks switch to float64 with
:func:`precision`::

    with precision("float64"):
        x = Tensor([3.0], requires_grad=True)
        (gx,) = grad((x * x).sum(), [x])   # -> [6.]
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "NonDifferentiableError",
    "grad",
    "precision",
    "get_dtype",
    "as_tensor",
    "concat",
    "stack",
    "where",
    "softmax",
    "softplus",
    "l2norm",
]

_DTYPES = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class NonDifferentiableError(RuntimeError):
    """Raised when a gradient reaches an op that has no derivative."""


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default floating dtype (``float32``/``float64``)."""
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}")
    prev = _dtype
    _dtype = _DTYPES[name]
    try:
        yield
    finally:
        _dtype = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "name")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating) or arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- construction of graph nodes -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward_fn, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite value produced by '{op}'")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.name = None
        out.op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out.backward_fn = backward_fn
        else:
            out.requires_grad = False
            out.parents = ()
            out.backward_fn = None
        return out

    # -- basic protocol --------------------------------------------------------------

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- elementwise arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._result(a.data + b.data, (a, b), back, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._result(a.data - b.data, (a, b), back, "sub")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._result(a.data * b.data, (a, b), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            ga = g / b.data
            gb = -g * a.data / (b.data * b.data)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        with np.errstate(divide="ignore", invalid="ignore"):
            out = a.data / b.data
        return Tensor._result(out, (a, b), back, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self

        def back(g):
            return (g * exponent * a.data ** (exponent - 1),)

        return Tensor._result(a.data**exponent, (a,), back, "pow")

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul operands must have at least 2 dimensions")

        def back(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            return _unbroadcast(ga, a.shape), gb

        return Tensor._result(a.data @ b.data, (a, b), back, "matmul")

    # -- reductions and shape ops ----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        a = self
        return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")

    def broadcast_to(self, shape):
        a = self
        return Tensor._result(
            np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast"
        )

    def __getitem__(self, idx):
        if isinstance(idx, Tensor):
            raise TypeError("index with integer arrays, not Tensors")
        a = self
        basic = _is_basic_index(idx)

        def back(g):
            out = np.zeros(a.shape, dtype=g.dtype)
            if basic:
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return (out,)

        return Tensor._result(np.array(a.data[idx]), (a,), back, "getitem")

    # -- elementwise functions -------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a.data)
        return Tensor._result(out, (a,), lambda g: (g / a.data,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._result(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._result(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def relu(self):
        a = self
        return Tensor._result(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),), "relu")

    def sigmoid(self):
        out = _sigmoid(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def clamp_min(self, lo: float):
        a = self
        return Tensor._result(np.maximum(a.data, lo), (a,), lambda g: (g * (a.data > lo),), "clamp_min")

    def floor(self):
        """Recorded but non-differentiable; any gradient reaching it is an error."""
        return Tensor._result(np.floor(self.data), (self,), None, "floor")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._result(np.stack([t.data for t in tensors], axis=axis), tensors, back, "stack")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``.  ``cond`` is a constant mask."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(np.where(cond, g, 0), a.shape), _unbroadcast(np.where(cond, 0, g), b.shape)

    return Tensor._result(np.where(cond, a.data, b.data), (a, b), back, "where")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), back, "softmax")


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    out = np.logaddexp(0, x.data)
    return Tensor._result(out.astype(x.data.dtype), (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


def l2norm(x: Tensor, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the zero vector is zero."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1)
        return (g * np.where(n > 0, x.data / safe, 0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return Tensor._result(out, (x,), back, "l2norm")


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each of ``params``.

    Parameters the loss does not depend on get zero arrays.
    """
    params = list(params)
    if loss.shape != ():
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or not node.parents:
            continue
        if node.backward_fn is None:
            raise NonDifferentiableError(f"gradient reached non-differentiable op '{node.op}'")
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = []
    for p in params:
        g = grads.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype).reshape(p.shape))
    return out
