"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records a :class:`Node` holding its inputs and a
closure that maps the upstream gradient to per-input gradients. ``backward``
sorts the recorded graph topologically (the tape) and sweeps it in reverse,
accumulating gradients additively across fan-out.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_state = {"dtype": np.float64, "grad": True, "anomaly": False}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class AnomalyError(FloatingPointError):
    """Raised in anomaly mode when an operation produces a non-finite value."""

    def __init__(self, op: str):
        super().__init__(f"operation '{op}' produced a non-finite value")
        self.op = op


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype.type


def get_default_dtype():
    return _state["dtype"]


def is_grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def detect_anomaly():
    """Check every operation output for NaN/inf and raise naming the first offender."""
    prev = _state["anomaly"]
    _state["anomaly"] = True
    try:
        yield
    finally:
        _state["anomaly"] = prev


class Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _state["dtype"]
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    def detach(self) -> "Tensor":
        return detach(self)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        backward(self, grad)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _lift(a, b):
    """Convert operands to tensors, matching the dtype of whichever is already one."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


def _result(data: np.ndarray, op: str, inputs: tuple, backward_fn: Callable) -> Tensor:
    if _state["anomaly"] and not np.all(np.isfinite(data)):
        raise AnomalyError(op)
    out = Tensor(data, dtype=data.dtype)
    if _state["grad"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
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


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root`` ordered so every input precedes its consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked tensor feeding ``loss``."""
    if loss.node is None:
        if loss.requires_grad:
            raise ValueError("backward called on a leaf tensor; nothing to differentiate")
        raise ValueError("loss is detached from the computation graph")
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones(loss.shape, dtype=loss.dtype)
    else:
        grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)

    order = topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): grad}
    for t in reversed(order):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        if t.node is None:
            continue
        for inp, ig in zip(t.node.inputs, t.node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + ig
            else:
                pending[key] = ig


def detach(x: Tensor) -> Tensor:
    """Value-identical tensor with no link to the graph that produced ``x``."""
    return Tensor(x.data, dtype=x.dtype)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, "div", (a, b), bw)


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    return _result(xd**exponent, "pow", (x,), lambda g: (g * exponent * xd ** (exponent - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), "log", (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, "sqrt", (x,), lambda g: (g * 0.5 / out,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0).astype(x.dtype), "relu", (x,), lambda g: (g * pos,))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = _lift(a, b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    out = np.where(cond, a.data, b.data)

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)

    return _result(out, "where", (a, b), bw)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(out), "sum", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _result(np.asarray(out), "mean", (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _result(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _result(np.swapaxes(x.data, a, b), "swapaxes", (x,), lambda g: (np.swapaxes(g, a, b),))


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast ``x`` to ``shape``; gradients sum back over the broadcast axes."""
    old = x.shape
    return _result(np.broadcast_to(x.data, shape).copy(), "expand", (x,), lambda g: (_unbroadcast(g, old),))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index]), "getitem", (x,), bw)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    indices = np.asarray(indices, dtype=np.intp)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _result(np.take(x.data, indices, axis=axis), "take", (x,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax):
            raise ShapeError(f"concat shape mismatch: {tensors[0].shape} vs {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), "concat", tuple(tensors), bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    return concat([expand_dims(as_tensor(t), axis) for t in tensors], axis=axis)


def expand_dims(x: Tensor, axis: int) -> Tensor:
    return reshape(x, np.expand_dims(x.data, axis).shape)


# ---------------------------------------------------------------------------
# linear algebra and neural primitives


def matmul(a, b) -> Tensor:
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                # shared weight: fold the batch axes into one product
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, "matmul", (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, "softmax", (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply ``gain`` and ``bias``."""
    n = x.shape[-1]
    if n < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match last axis {n}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return (
            dx if x.requires_grad else None,
            (g * xhat).sum(axis=lead) if gain.requires_grad else None,
            g.sum(axis=lead) if bias.requires_grad else None,
        )

    return _result(out, "layer_norm", (x, gain, bias), bw)


def max_pool(x: Tensor, axis: int, valid=None) -> Tensor:
    """Max over ``axis``; gradient is routed to the arg-max (lowest index on ties).

    ``valid`` is an optional boolean mask broadcastable to ``x``; masked entries
    never win. Every slice must contain at least one valid entry.
    """
    xd = x.data
    if valid is not None:
        valid = np.broadcast_to(np.asarray(valid, dtype=bool), xd.shape)
        if not valid.any(axis=axis).all():
            raise ShapeError("max_pool slice with no valid entries")
        xd = np.where(valid, xd, -np.inf)
    idx = np.expand_dims(np.argmax(xd, axis=axis), axis)
    out = np.take_along_axis(xd, idx, axis=axis).squeeze(axis)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out.astype(dtype, copy=False), "max_pool", (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.dtype)
    return _result(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss: 0.5 d^2 / beta inside |d| < beta, |d| - 0.5 beta outside."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    d = pred.data - target
    ad = np.abs(d)
    inside = ad < beta
    out = np.where(inside, 0.5 * d * d / beta, ad - 0.5 * beta)
    slope = np.where(inside, d / beta, np.sign(d))
    return _result(out.astype(pred.dtype, copy=False), "smooth_l1", (pred,), lambda g: (g * slope,))


def binary_cross_entropy(p: Tensor, target, eps: float | None = None) -> Tensor:
    """Elementwise BCE with probabilities clamped to ``[eps, 1 - eps]``."""
    if eps is None:
        eps = 1e-12 if p.dtype == np.float64 else 1e-7
    y = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=p.dtype)
    pc = np.clip(p.data, eps, 1.0 - eps)
    out = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    inside = (p.data > eps) & (p.data < 1.0 - eps)
    slope = np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0)
    return _result(out.astype(p.dtype, copy=False), "bce", (p,), lambda g: (g * slope,))
