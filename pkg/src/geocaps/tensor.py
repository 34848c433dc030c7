"""Dense-tensor reverse-mode automatic differentiation on numpy arrays.

Everything trainable in this package runs through this module.  A Tensor
wraps a dense float array (float32 for training, float64 for numerical
checks), an optional gradient buffer of the same shape, and an optional
graph node recording the operation that produced it.  Graphs are built
define-by-run: each operation allocates fresh output storage and, when
gradients are enabled and at least one input is tracked, records a node
with a backward rule.  ``backward()`` on a scalar walks the graph once in
reverse topological order and accumulates gradients into every tracked
tensor's ``grad`` buffer.

Conventions:
  * broadcasting follows numpy; backward rules sum gradients over
    broadcast axes back to the input shape
  * relu uses subgradient 0 at 0
  * max over an axis breaks ties toward the lowest index
  * in-place mutation of graph tensors is not supported
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "set_debug_checks",
    "debug_checks_enabled",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "relu",
    "softmax",
    "max_along",
    "tsum",
    "tmean",
    "tvar",
    "concat",
    "stack",
    "take",
    "reshape",
    "expand_dims",
    "transpose",
    "square",
    "sqrt",
    "texp",
    "tlog",
    "l2norm",
    "normalize",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


class GraphError(RuntimeError):
    """Raised on invalid graph use (backward twice, backward on non-scalar)."""


class NonFiniteError(ArithmeticError):
    """Raised when a checked operation produces NaN or infinity."""


_grad_enabled = True
_debug_checks = False


@contextlib.contextmanager
def no_grad():
    """Run a block without recording graph nodes."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-operation finiteness checks (slow; for debugging)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "node", "_rg", "_backward_done")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None
        self._rg = bool(requires_grad)
        self._backward_done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def requires_grad(self) -> bool:
        return self._rg or self.node is not None

    def __repr__(self):
        tag = self.node.op if self.node is not None else ("param" if self._rg else "const")
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={tag})"

    # -- graph control -------------------------------------------------------

    def detach(self) -> "Tensor":
        """A constant view of this tensor's values; gradient stops here."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None
        self._backward_done = False

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar; fills ``grad`` buffers.

        Raises GraphError if this tensor is not a scalar, has no graph, or
        backward already ran on it without an intervening reset.
        """
        if self.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self.node is None and not self._rg:
            raise GraphError("backward() on a tensor with no graph attached")
        if self._backward_done:
            raise GraphError("backward() called twice on the same graph without reset")
        self._backward_done = True

        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for t in order:
            node = t.node
            if node is None:
                continue
            g = t.grad
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ShapeError(
                        f"backward of {node.op}: gradient shape {pg.shape} does not "
                        f"match input shape {parent.data.shape}"
                    )
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return tpow(self, p)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the graph, returned in reverse order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.node is not None and id(p) not in seen:
                    stack.append((p, False))
    order.reverse()
    return order


def _as_tensor(x, like_dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like_dtype if like_dtype is not None else np.float32))


def constant(data, dtype=None) -> Tensor:
    """A tensor that never tracks gradients."""
    return Tensor(data, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(data, dtype=dtype, requires_grad=True)


def _from_op(out_data: np.ndarray, op: str, parents: tuple, backward: Callable) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"operation '{op}' produced non-finite values")
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.node = _Node(op, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast to reach ``g.shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, op: str, fwd, bwd_a, bwd_b) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b, _as_tensor(a).dtype)
    try:
        out = fwd(ta.data, tb.data)
    except ValueError as e:
        raise ShapeError(f"{op}: shapes {ta.shape} and {tb.shape} are incompatible") from e

    def backward(g):
        ga = _unbroadcast(bwd_a(g, ta.data, tb.data), ta.shape) if ta.requires_grad else None
        gb = _unbroadcast(bwd_b(g, ta.data, tb.data), tb.shape) if tb.requires_grad else None
        return ga, gb

    return _from_op(out, op, (ta, tb), backward)


def add(a, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(
        a, b, "div",
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def matmul(a, b) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)
    if ta.ndim < 2 or tb.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {ta.shape} and {tb.shape}")
    if ta.shape[-1] != tb.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {ta.shape} @ {tb.shape}")
    try:
        out = ta.data @ tb.data
    except ValueError as e:
        raise ShapeError(f"matmul: shapes {ta.shape} and {tb.shape} are incompatible") from e

    def backward(g):
        ga = gb = None
        if ta.requires_grad:
            ga = _unbroadcast(g @ tb.data.swapaxes(-1, -2), ta.shape)
        if tb.requires_grad:
            gb = _unbroadcast(ta.data.swapaxes(-1, -2) @ g, tb.shape)
        return ga, gb

    return _from_op(out, "matmul", (ta, tb), backward)


def relu(x) -> Tensor:
    t = _as_tensor(x)
    out = np.maximum(t.data, 0)

    def backward(g):
        # out > 0 exactly where t.data > 0, so the mask need not be kept
        return (np.where(out > 0, g, 0),)

    return _from_op(out.astype(t.dtype, copy=False), "relu", (t,), backward)


def softmax(x, axis: int = -1) -> Tensor:
    t = _as_tensor(x)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _from_op(out, "softmax", (t,), backward)


def max_along(x, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; gradient routes to the first (lowest-index) argmax."""
    t = _as_tensor(x)
    idx = np.argmax(t.data, axis=axis)
    idx_keep = np.expand_dims(idx, axis)
    out_keep = np.take_along_axis(t.data, idx_keep, axis=axis)
    out = out_keep if keepdims else np.squeeze(out_keep, axis=axis)

    def backward(g):
        g_keep = g if keepdims else np.expand_dims(g, axis)
        gi = np.zeros_like(t.data)
        np.put_along_axis(gi, idx_keep, g_keep, axis=axis)
        return (gi,)

    return _from_op(out, "max", (t,), backward)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(x)
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, t.shape).astype(t.dtype, copy=False),)
        g_keep = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_keep, t.shape).astype(t.dtype, copy=False),)

    return _from_op(np.asarray(out), "sum", (t,), backward)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(x)
    if axis is None:
        n = t.size
    elif isinstance(axis, tuple):
        n = int(np.prod([t.shape[a] for a in axis]))
    else:
        n = t.shape[axis]
    return mul(tsum(t, axis, keepdims), 1.0 / n)


def tvar(x, axis, keepdims: bool = False) -> Tensor:
    """Biased variance over an axis (normalized by the axis length)."""
    t = _as_tensor(x)
    mu = tmean(t, axis, keepdims=True)
    d = sub(t, mu)
    return tmean(mul(d, d), axis, keepdims)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(p) for p in parts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}"
        ) from e
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _from_op(out, "concat", tuple(ts), backward)


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(p) for p in parts]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: all inputs must share a shape, got {sorted(shapes)}")
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        pieces = np.split(g, len(ts), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in pieces)

    return _from_op(out, "stack", tuple(ts), backward)


def take(x, indices, axis: int) -> Tensor:
    """Gather along one axis with an integer index array."""
    t = _as_tensor(x)
    idx = np.asarray(indices)
    out = np.take(t.data, idx, axis=axis)

    def backward(g):
        gi = np.zeros_like(t.data)
        expanded = [slice(None)] * t.ndim
        expanded[axis] = idx
        np.add.at(gi, tuple(expanded), g)
        return (gi,)

    return _from_op(out, "take", (t,), backward)


def _getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    items = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(i, (np.ndarray, list)) for i in items)

    def backward(g):
        gi = np.zeros_like(x.data)
        if advanced:
            np.add.at(gi, idx, g)
        else:
            # basic indexing never aliases two outputs to one input element
            gi[idx] += g
        return (gi,)

    return _from_op(np.asarray(out), "getitem", (x,), backward)


def reshape(x, shape) -> Tensor:
    t = _as_tensor(x)
    out = t.data.reshape(shape)

    def backward(g):
        return (g.reshape(t.shape),)

    return _from_op(out, "reshape", (t,), backward)


def expand_dims(x, axis: int) -> Tensor:
    t = _as_tensor(x)
    return reshape(t, np.expand_dims(t.data, axis).shape)


def transpose(x, axes=None) -> Tensor:
    t = _as_tensor(x)
    out = t.data.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _from_op(out, "transpose", (t,), backward)


def tpow(x, p: float) -> Tensor:
    t = _as_tensor(x)
    out = t.data ** p

    def backward(g):
        return (g * p * t.data ** (p - 1),)

    return _from_op(out, "pow", (t,), backward)


def square(x) -> Tensor:
    t = _as_tensor(x)

    def backward(g):
        return (g * (2 * t.data),)

    return _from_op(t.data * t.data, "square", (t,), backward)


def sqrt(x) -> Tensor:
    t = _as_tensor(x)
    out = np.sqrt(t.data)

    def backward(g):
        return (g * (0.5 / out),)

    return _from_op(out, "sqrt", (t,), backward)


def texp(x) -> Tensor:
    t = _as_tensor(x)
    out = np.exp(t.data)

    def backward(g):
        return (g * out,)

    return _from_op(out, "exp", (t,), backward)


def tlog(x) -> Tensor:
    t = _as_tensor(x)
    out = np.log(t.data)

    def backward(g):
        return (g / t.data,)

    return _from_op(out, "log", (t,), backward)


def l2norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Vector 2-norm along an axis."""
    return sqrt(tsum(square(x), axis, keepdims))


def normalize(x, axis: int = -1) -> Tensor:
    """Scale vectors along an axis to unit 2-norm."""
    return div(x, l2norm(x, axis, keepdims=True))
