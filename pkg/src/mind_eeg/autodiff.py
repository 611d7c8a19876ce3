"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation that touches a tensor with ``requires_grad``
appends a node to the thread's active :class:`Tape`.  ``backward`` replays the
recorded adjoints in reverse order, accumulating gradients additively.

Elementwise binary operations broadcast with numpy semantics; matmul treats
leading axes as batch axes, so a ``(B, n, d)`` activation can be multiplied by an
unbatched ``(d, k)`` parameter.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "get_tape",
    "no_grad",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "transpose",
    "reshape",
    "concat",
    "index_select",
    "gather_rows",
    "sum",
    "mean",
    "amax",
    "sq_norm",
    "elu",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "rsqrt_safe",
    "softmax",
    "log_softmax",
    "straight_through",
    "stop_gradient",
    "detach_snapshot",
    "freeze_point",
    "numerical_grad",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in a forward value."""


_local = threading.local()


def _state():
    if not hasattr(_local, "tape"):
        _local.tape = Tape()
        _local.grad_enabled = True
        _local.freezer = None
    return _local


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
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
        return float(np.asarray(self.data).item())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return _getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int] | None = None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed operations."""

    nodes: list[_Node] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        # Drops gradient history only; tensors keep their data.
        self.nodes.clear()

    def backward(self, loss: Tensor, seed: np.ndarray | None = None, retain: bool = False) -> int:
        """Replay adjoints from ``loss``; returns the number of nodes visited."""
        if seed is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs a scalar loss or an explicit seed, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        _accumulate(loss, np.asarray(seed, dtype=np.float64))
        visited = 0
        for node in reversed(self.nodes):
            visited += 1
            g = node.out.grad
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.adjoint(g)):
                if pg is not None and parent.requires_grad:
                    _accumulate(parent, pg)
        if not retain:
            self._release()
        return visited

    def _release(self) -> None:
        # Interior grads are history; leaves (parameters) keep theirs.
        produced = {id(node.out) for node in self.nodes}
        for node in self.nodes:
            for parent in node.parents:
                if id(parent) in produced:
                    parent.grad = None
            node.out.grad = None
        self.clear()

    def first_non_finite(self) -> tuple[int, str] | None:
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.out.data)):
                return i, node.op
        return None


def get_tape() -> Tape:
    return _state().tape


def backward(loss: Tensor, seed: np.ndarray | None = None, retain: bool = False) -> int:
    return get_tape().backward(loss, seed=seed, retain=retain)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], adjoint) -> Tensor:
    st = _state()
    needs = st.grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    if needs:
        st.tape.nodes.append(_Node(op, out, parents, adjoint))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return _make("add", data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc
    return _make("sub", data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    return _make(
        "mul",
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError as exc:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from exc

    def adjoint(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make("div", data, (a, b), adjoint)


def elu(x: Tensor) -> Tensor:
    """ELU with slope 1: ``x`` for positive inputs, ``exp(x) - 1`` otherwise."""
    x = _as_tensor(x)
    pos = x.data > 0
    ex = np.exp(np.minimum(x.data, 0.0))
    data = np.where(pos, x.data, ex - 1.0)
    return _make("elu", data, (x,), lambda g: (g * np.where(pos, 1.0, ex),))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = freeze_point(x.data > 0)
    return _make("relu", x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    z = x.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(x.data)
    return _make("exp", e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def rsqrt_safe(x: Tensor) -> Tensor:
    """``x ** -0.5`` with zero (value and gradient) wherever ``x <= 0``."""
    x = _as_tensor(x)
    pos = x.data > 0
    safe = np.where(pos, x.data, 1.0)
    r = np.where(pos, safe ** -0.5, 0.0)
    return _make("rsqrt_safe", r, (x,), lambda g: (g * np.where(pos, -0.5 * r / safe, 0.0),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned") from exc

    def adjoint(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # batched activations times a shared weight: fold batch into rows
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", data, (a, b), adjoint)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    x = _as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            return x
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc
    return _make("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} on axis {axis}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", data, tuple(xs), adjoint)


def index_select(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices scatter back additively."""
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)
    ax = axis % x.ndim
    if idx.size and (idx.min() < -x.shape[ax] or idx.max() >= x.shape[ax]):
        raise IndexError(f"index_select: index out of range for axis {ax} of size {x.shape[ax]}")
    data = np.take(x.data, idx, axis=ax)

    def adjoint(g):
        out = np.zeros_like(x.data)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (out,)

    return _make("index_select", data, (x,), adjoint)


def gather_rows(table: Tensor, index) -> Tensor:
    """Look up rows of a 2-D table; the result has shape ``index.shape + (D,)``."""
    table = _as_tensor(table)
    idx = np.asarray(index, dtype=np.intp)
    data = table.data[idx]

    def adjoint(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _make("gather_rows", data, (table,), adjoint)


def _getitem(x: Tensor, key) -> Tensor:
    data = x.data[key]

    def adjoint(g):
        out = np.zeros_like(x.data)
        np.add.at(out, key, g)
        return (out,)

    return _make("getitem", np.array(data, copy=True), (x,), adjoint)


# ---------------------------------------------------------------- reductions


def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    data = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _make("sum", np.asarray(data), (x,), lambda g: (_expand(g, x.shape, axis, keepdims),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.size // max(np.asarray(data).size, 1)
    return _make("mean", np.asarray(data), (x,), lambda g: (_expand(g / count, x.shape, axis, keepdims),))


def amax(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the adjoint goes to the first maximal entry."""
    x = _as_tensor(x)
    arg = freeze_point(np.argmax(x.data, axis=axis))
    data = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis)
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def adjoint(g):
        out = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(out, np.expand_dims(arg, axis), gk, axis=axis)
        return (out,)

    return _make("amax", data, (x,), adjoint)


def sq_norm(x: Tensor, axis=None) -> Tensor:
    """Squared L2 norm (sum of squares) over ``axis``."""
    x = _as_tensor(x)
    data = np.sum(x.data * x.data, axis=axis)
    return _make("sq_norm", np.asarray(data), (x,), lambda g: (2.0 * x.data * _expand(g, x.shape, axis, False),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def adjoint(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make("softmax", s, (x,), adjoint)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make("log_softmax", out, (x,), lambda g: (g - s * np.sum(g, axis=axis, keepdims=True),))


# ---------------------------------------------------------------- gradient routing


class _Freezer:
    """Records non-differentiable forward values, then replays them."""

    def __init__(self):
        self.values: list = []
        self.cursor = 0
        self.replaying = False

    def replay(self) -> None:
        self.replaying = True
        self.cursor = 0

    def point(self, value):
        if not self.replaying:
            self.values.append(np.array(value, copy=True))
            return value
        if not self.values:
            raise RuntimeError("detach_snapshot: nothing was recorded before replay")
        # each replayed forward pass walks the recorded sequence from the start
        v = self.values[self.cursor % len(self.values)]
        self.cursor += 1
        if np.shape(v) != np.shape(value):
            raise RuntimeError(f"detach_snapshot: replayed pass diverged (shape {np.shape(value)} where "
                               f"{np.shape(v)} was recorded)")
        return v


@contextlib.contextmanager
def detach_snapshot() -> Iterator[_Freezer]:
    """Freeze gradient-blocked values and branch choices at their first-pass values.

    Inside the context, stop-gradient outputs, straight-through offsets,
    codebook indices, ReLU masks and max selections are recorded on the first
    forward pass; after ``snap.replay()`` each later pass reuses them in order.
    The replayed loss is the smooth surrogate whose true derivative is the
    tape's gradient, so finite differences of it check the tape even through
    quantization and activation kinks.
    """
    st = _state()
    prev = st.freezer
    st.freezer = _Freezer()
    try:
        yield st.freezer
    finally:
        st.freezer = prev


def freeze_point(value):
    fz = _state().freezer
    return value if fz is None else fz.point(value)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward, zero adjoint."""
    x = _as_tensor(x)
    data = freeze_point(x.data)
    return Tensor(np.array(data, copy=True))


def straight_through(x: Tensor, quantized: Tensor) -> Tensor:
    """Forward value of ``quantized``; the adjoint flows to ``x`` unchanged."""
    x, quantized = _as_tensor(x), _as_tensor(quantized)
    if x.shape != quantized.shape:
        raise ShapeError(f"straight_through: input {x.shape} vs quantized {quantized.shape}")
    if _state().freezer is None:
        data = np.array(quantized.data, copy=True)
    else:
        data = x.data + freeze_point(quantized.data - x.data)
    return _make("straight_through", data, (x, quantized), lambda g: (g, None))


# ---------------------------------------------------------------- checking


def numerical_grad(f: Callable[[], float], t: Tensor, eps: float = 1e-5, coords=None) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. entries of ``t``.

    ``coords`` restricts evaluation to a list of flat indices; the returned
    array then has one entry per coordinate.
    """
    flat = t.data.reshape(-1)
    picks = range(flat.size) if coords is None else coords
    out = []
    for i in picks:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out.append((fp - fm) / (2 * eps))
    out = np.array(out)
    return out.reshape(t.shape) if coords is None else out
