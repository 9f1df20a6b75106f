"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape nothing is recorded, which
is how inference runs.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ParameterError, ShapeError

DEFAULT_DTYPE = np.float32
_FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))

_tape_stack: list["Tape"] = []
_check_finite = os.environ.get("VDET_CHECK_FINITE", "0") == "1"


def set_check_finite(enabled: bool) -> None:
    """Raise on NaN/Inf in any newly created tensor (used by the test suite)."""
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if _check_finite and not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # arithmetic sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

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

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class Node:
    """One recorded operation: inputs, output and a vector-Jacobian rule."""

    __slots__ = ("inputs", "output", "backward", "op")

    def __init__(self, inputs, output, backward, op):
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.op = op


class Tape:
    """Records operations executed inside ``with Tape() as tape:``.

    Node creation order is a valid topological order, so the backward pass is a
    plain reverse walk over :attr:`nodes`.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def backward(self, loss: Tensor, sources: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(.) through the recorded nodes.

        Every requires-grad leaf reached gets its ``.grad`` overwritten. Tensors
        listed in ``sources`` that the graph never touched receive zeros.
        Returns a mapping ``id(tensor) -> gradient array`` for the leaves.
        """
        return backward(self, loss, sources)


def backward(tape: Tape, loss: Tensor, sources: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    if loss.data.size != 1:
        raise ParameterError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            key = id(inp)
            if inp._node is None:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    if loss._node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    out = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads.get(key, np.zeros_like(leaf.data)), dtype=leaf.dtype)
        leaf.grad = Tensor(g.reshape(leaf.shape))
        out[key] = leaf.grad.data
    if sources is not None:
        for src in sources:
            if id(src) not in out:
                src.grad = Tensor(np.zeros_like(src.data))
                out[id(src)] = src.grad.data
    return out


def grad_enabled() -> bool:
    return bool(_tape_stack)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make(data: np.ndarray, inputs: Sequence, vjp: Callable, op: str) -> Tensor:
    """Wrap an op result, recording it when a tape is live and an input needs grad."""
    out = Tensor(data)
    if _tape_stack and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(tuple(inputs), out, vjp, op)
        out._node = node
        _tape_stack[-1].nodes.append(node)
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Promote a non-tensor operand to the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make(ad * bd, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)

    return make(ad / bd, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return make(np.log(x), (a,), lambda g: (g / x,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return make(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), "silu")


def relu(a: Tensor) -> Tensor:
    x = a.data
    mask = x > 0
    return make(np.where(mask, x, 0).astype(x.dtype), (a,), lambda g: (g * mask,), "relu")


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "silu":
        return silu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "relu":
        return relu(a)
    raise ParameterError(f"unknown activation {kind!r}")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    pick_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return make(np.where(pick_a, a.data, b.data), (a, b),
                lambda g: (unbroadcast(g * pick_a, sa), unbroadcast(g * ~pick_a, sb)), "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    pick_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return make(np.where(pick_a, a.data, b.data), (a, b),
                lambda g: (unbroadcast(g * pick_a, sa), unbroadcast(g * ~pick_a, sb)), "minimum")


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make(a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axes, keepdims), 1.0 / n)


def amax(a: Tensor, axis: int, keepdims=False) -> Tensor:
    """Max along one axis; the gradient flows to the first maximal element."""
    x = a.data
    axis = axis % x.ndim
    idx = np.argmax(x, axis=axis)
    out = np.take_along_axis(x, np.expand_dims(idx, axis), axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        dx = np.zeros_like(x)
        np.put_along_axis(dx, np.expand_dims(idx, axis), g, axis)
        return (dx,)

    return make(out if keepdims else np.squeeze(out, axis), (a,), vjp, "amax")


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        dx = np.zeros(shape, dtype=dtype)
        np.add.at(dx, index, g) if _is_advanced(index) else dx.__setitem__(index, g)
        return (dx,)

    return make(a.data[index], (a,), vjp, "getitem")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes "
                             f"{[tuple(t.shape) for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def split(a: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    out, lo = [], 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(lo, lo + n)
        out.append(getitem(a, tuple(sl)))
        lo += n
    if lo != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    return out
