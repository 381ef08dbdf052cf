"""Tape-based reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` is opened per optimisation step with ``with Tape() as tape:``.
Every primitive applied to tensors while the tape is active is appended to it
together with a vector-Jacobian closure; :func:`backward` replays the tape in
reverse.  Outside of any tape the same primitives run as plain forward
evaluation and nothing is recorded.

Broadcasting is restricted to scalar-vs-tensor.  Anything else needs an
explicit :func:`broadcast_to` or :func:`reshape`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "active_tape",
    "record",
    "backward",
    "primitive_kinds",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "conv2d",
    "conv2d_1x1",
    "sine",
    "exp",
    "abs_",
    "leaky_relu",
    "sum_",
    "mean",
    "concat",
    "slice_",
    "reshape",
    "transpose",
    "broadcast_to",
    "complex_sum_of_squares",
    "linear",
]

_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense real tensor, optionally tracked on the active tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


@dataclass
class _Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in evaluation order, so parents always precede their
    children.  A closed tape detaches its outputs: they behave as constants
    afterwards.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.closed = False

    def __enter__(self):
        if self.closed:
            raise RuntimeError("tape already closed; open a new one per step")
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        self.closed = True
        for node in self.nodes:
            node.output._tape = None
            node.output._node = None
        return False

    def __len__(self):
        return len(self.nodes)

    @property
    def kinds(self) -> list[str]:
        return [n.kind for n in self.nodes]

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
        backward(loss, params)


_PRIMITIVES: dict[str, Callable] = {}


def _primitive(kind: str):
    def register(fn):
        _PRIMITIVES[kind] = fn
        return fn

    return register


def primitive_kinds() -> list[str]:
    return sorted(_PRIMITIVES)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def record(kind: str, *inputs, **attrs) -> Tensor:
    """Apply primitive ``kind`` to ``inputs`` and append it to the active tape."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown op-kind {kind!r}") from None
    tensors = tuple(_as_tensor(x) for x in inputs)
    tape = active_tape()
    for t in tensors:
        if t._tape is not None and t._tape is not tape:
            raise ValueError(f"{t!r} lives on a different tape")
    out_data, vjp = fn(*(t.data for t in tensors), **attrs)
    out = Tensor(out_data)
    if tape is not None and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out._tape = tape
        out._node = len(tape.nodes)
        tape.nodes.append(_Node(kind, tensors, out, vjp))
    return out


def backward(loss: Tensor, params: Sequence[Tensor] = ()) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Existing gradients are overwritten, not accumulated.  Tensors listed in
    ``params`` that the loss does not depend on receive a zero gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss._tape is not None:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(loss._tape.nodes[: loss._node + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if t.is_leaf:
                    leaves[key] = t
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    elif loss.requires_grad and loss.is_leaf:
        leaves[id(loss)] = loss
        grads[id(loss)] = np.ones_like(loss.data)
    for key, t in leaves.items():
        t.grad = np.asarray(grads[key], dtype=np.float64).reshape(t.shape)
    for p in params:
        if p.requires_grad and id(p) not in leaves:
            p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------- elementwise


def _binary_shapes(a: np.ndarray, b: np.ndarray, kind: str):
    if a.shape == b.shape:
        return a, b
    if a.size == 1:
        return a.reshape(()), b
    if b.size == 1:
        return a, b.reshape(())
    raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


@_primitive("add")
def _add(a, b):
    x, y = _binary_shapes(a, b, "add")
    return x + y, lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape))


@_primitive("sub")
def _sub(a, b):
    x, y = _binary_shapes(a, b, "sub")
    return x - y, lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape))


@_primitive("mul")
def _mul(a, b):
    x, y = _binary_shapes(a, b, "mul")
    return x * y, lambda g: (_reduce_to(g * y, a.shape), _reduce_to(g * x, b.shape))


@_primitive("div")
def _div(a, b):
    x, y = _binary_shapes(a, b, "div")
    out = x / y
    return out, lambda g: (_reduce_to(g / y, a.shape), _reduce_to(-g * out / y, b.shape))


@_primitive("scale")
def _scale(a, *, factor: float):
    return factor * a, lambda g: (factor * g,)


@_primitive("sine")
def _sine(a):
    return np.sin(a), lambda g: (g * np.cos(a),)


@_primitive("exp")
def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


@_primitive("abs")
def _abs(a):
    return np.abs(a), lambda g: (g * np.sign(a),)


@_primitive("leaky_relu")
def _leaky_relu(a, *, slope: float = 0.0):
    pos = a > 0
    return np.where(pos, a, slope * a), lambda g: (np.where(pos, g, slope * g),)


# ---------------------------------------------------------------- linear algebra


@_primitive("matmul")
def _matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return a @ b, lambda g: (g @ b.T, a.T @ g)


@_primitive("conv2d")
def _conv2d(x, w, *bias):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: shape mismatch input {x.shape} kernel {w.shape}")
    kh, kw = w.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extent must be odd, got {(kh, kw)}")
    if bias and bias[0].shape != (w.shape[0],):
        raise ValueError(f"conv2d: bias shape {bias[0].shape} != ({w.shape[0]},)")
    ph, pw = kh // 2, kw // 2
    pad = ((0, 0), (0, 0), (ph, ph), (pw, pw))
    cols = sliding_window_view(np.pad(x, pad), (kh, kw), axis=(2, 3))
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias:
        out = out + bias[0][None, :, None, None]

    def vjp(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = sliding_window_view(np.pad(g, pad), (kh, kw), axis=(2, 3))
        gx = np.tensordot(gcols, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
        grads = [gx.transpose(0, 3, 1, 2), gw]
        if bias:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return np.ascontiguousarray(out), vjp


@_primitive("conv2d_1x1")
def _conv2d_1x1(x, w):
    if x.ndim != 4 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d_1x1: shape mismatch input {x.shape} kernel {w.shape}")
    out = np.tensordot(w, x, axes=([1], [1])).transpose(1, 0, 2, 3)

    def vjp(g):
        gx = np.tensordot(w, g, axes=([0], [1])).transpose(1, 0, 2, 3)
        gw = np.tensordot(g, x, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gw

    return np.ascontiguousarray(out), vjp


@_primitive("linear")
def _linear(a, *, forward: Callable, adjoint: Callable):
    """User-supplied linear map; ``adjoint`` must be its exact transpose."""
    return forward(a), lambda g: (adjoint(g),)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


@_primitive("sum")
def _sum(a, *, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, vjp


@_primitive("mean")
def _mean(a, *, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out, sum_vjp = _sum(a, axis=axes, keepdims=keepdims)
    return out / count, lambda g: (sum_vjp(g)[0] / count,)


@_primitive("complex_sum_of_squares")
def _complex_sos(a, *, axis: int = -3):
    """``re**2 + im**2`` where real and imaginary planes are stacked on ``axis``."""
    if a.shape[axis] != 2:
        raise ValueError(f"complex_sum_of_squares: axis {axis} of {a.shape} must have extent 2")
    re = np.take(a, 0, axis=axis)
    im = np.take(a, 1, axis=axis)
    return re * re + im * im, lambda g: (np.stack([2 * re * g, 2 * im * g], axis=axis),)


# ---------------------------------------------------------------- structural


@_primitive("concat")
def _concat(*arrays, axis: int = 0):
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as err:
        raise ValueError(f"concat: shape mismatch {[a.shape for a in arrays]}") from err
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


@_primitive("slice")
def _slice(a, *, index):
    out = a[index]

    def vjp(g):
        full = np.zeros_like(a)
        full[index] = g
        return (full,)

    return np.array(out, copy=True), vjp


@_primitive("reshape")
def _reshape(a, *, shape):
    try:
        out = a.reshape(shape)
    except ValueError as err:
        raise ValueError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from err
    return out, lambda g: (g.reshape(a.shape),)


@_primitive("transpose")
def _transpose(a, *, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return np.ascontiguousarray(a.transpose(axes)), lambda g: (g.transpose(inverse),)


@_primitive("broadcast_to")
def _broadcast_to(a, *, shape):
    shape = tuple(shape)
    if len(shape) != a.ndim:
        raise ValueError(f"broadcast_to: rank mismatch {a.shape} -> {shape}")
    try:
        out = np.broadcast_to(a, shape).copy()
    except ValueError as err:
        raise ValueError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from err
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)
    return out, lambda g: (g.sum(axis=axes, keepdims=True),)


# ---------------------------------------------------------------- public wrappers


def add(a, b) -> Tensor:
    return record("add", a, b)


def sub(a, b) -> Tensor:
    return record("sub", a, b)


def mul(a, b) -> Tensor:
    return record("mul", a, b)


def div(a, b) -> Tensor:
    return record("div", a, b)


def scale(a, factor: float) -> Tensor:
    return record("scale", a, factor=float(factor))


def matmul(a, b) -> Tensor:
    return record("matmul", a, b)


def conv2d(x, w, bias=None) -> Tensor:
    """Stride-1, zero-padded, extent-preserving 2D cross-correlation."""
    if bias is None:
        return record("conv2d", x, w)
    return record("conv2d", x, w, bias)


def conv2d_1x1(x, w) -> Tensor:
    return record("conv2d_1x1", x, w)


def sine(a) -> Tensor:
    return record("sine", a)


def exp(a) -> Tensor:
    return record("exp", a)


def abs_(a) -> Tensor:
    return record("abs", a)


def leaky_relu(a, slope: float = 0.0) -> Tensor:
    return record("leaky_relu", a, slope=slope)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    return record("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    return record("mean", a, axis=axis, keepdims=keepdims)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return record("concat", *tensors, axis=axis)


def slice_(a, index) -> Tensor:
    return record("slice", a, index=index)


def reshape(a, shape) -> Tensor:
    return record("reshape", a, shape=tuple(shape))


def transpose(a, axes=None) -> Tensor:
    return record("transpose", a, axes=axes)


def broadcast_to(a, shape) -> Tensor:
    return record("broadcast_to", a, shape=tuple(shape))


def complex_sum_of_squares(a, axis: int = -3) -> Tensor:
    return record("complex_sum_of_squares", a, axis=axis)


def linear(a, forward: Callable, adjoint: Callable) -> Tensor:
    return record("linear", a, forward=forward, adjoint=adjoint)
