"""Rank-4 tensors with a small reverse-mode autodiff engine.

Only what the flow network needs is here: elementwise arithmetic with
broadcasting over singleton axes, a few reductions, and graph traversal.
The heavier ops (convolution, warping, correlation, ...) live in
:mod:`lidarflow.ops`.

Training runs in float32. :func:`oracle_precision` switches newly created
tensors to float64 for finite-difference gradient checks.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GraphError, ShapeError

_DTYPE = np.float32
_GRAD_ENABLED = True


def get_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def oracle_precision():
    """Create new tensors in float64 inside the block."""
    previous = _DTYPE
    set_dtype(np.float64)
    try:
        yield
    finally:
        set_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (inference, validation)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A (N, C, H, W) array with an optional gradient slot.

    Tensors produced by ops remember their parents and a closure mapping the
    output gradient to one gradient per parent. Leaf tensors with
    ``requires_grad`` (parameters) accumulate into ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1, 1, 1)
        if arr.ndim != 4:
            raise ShapeError("Tensor", "data", "rank 4 (N, C, H, W)", arr.shape)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", "self", "a single element", self.shape)
        return float(self.data.reshape(()))

    def validate(self) -> None:
        """Raise ``FloatingPointError`` if any value (or grad) is NaN/Inf."""
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"tensor {self.name or ''} holds non-finite values")
        if self.grad is not None:
            if self.grad.shape != self.data.shape:
                raise ShapeError("validate", "grad", self.data.shape, self.grad.shape)
            if not np.all(np.isfinite(self.grad)):
                raise FloatingPointError(f"tensor {self.name or ''} holds a non-finite gradient")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.name = self.name
        out._parents = ()
        out._backward = None
        return out

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, "b", f"broadcastable with {a.shape}", b.shape) from None


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return Tensor._from_op(a.data + np.asarray(b, dtype=a.dtype), (a,), lambda g: (g,))
    a = _as_tensor(a)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = a.dtype.type(factor)
    return Tensor._from_op(a.data * factor, (a,), lambda g: (g * factor,))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    a = _as_tensor(a)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def _backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), _backward)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(ad * ad, (a,), lambda g: (2 * ad * g,))


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root; the gradient at exactly 0 is taken as 0."""
    out = np.sqrt(a.data)

    def _backward(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, 0.5 * g / safe, 0),)

    return Tensor._from_op(out, (a,), _backward)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    total = a.data.sum(dtype=a.dtype).reshape(1, 1, 1, 1)
    return Tensor._from_op(total, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def backward(loss: Tensor, store=None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    With a ``store`` every parameter in it ends up with a gradient array,
    zeros for the ones the loss does not reach.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError("backward", "loss", (1, 1, 1, 1), loss.shape)
    if store is not None:
        for p in store.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    if loss._backward is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise GraphError("backward called on a tensor with no recorded graph "
                         "(was it computed under no_grad, or from constants only?)")

    order = []
    seen = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
