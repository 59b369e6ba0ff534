"""Dense tensors with reverse-mode automatic differentiation.

Operations executed while a :class:`Tape` is active, and with at least one
grad-tracked input, are appended to that tape together with a closure that
maps the output gradient to input gradients.  :func:`backward` replays the
tape in reverse.  Outside of a tape nothing is recorded, which is how
inference runs.

Broadcasting follows numpy: shapes are aligned on their trailing dimensions
and each pair of extents must be equal or one of them must be 1.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

_ids = itertools.count(1)
_local = threading.local()


class Tensor:
    """Immutable n-dimensional array, optionally tracked for gradients."""

    __slots__ = ("data", "grad_tracked", "grad", "id", "_produced")

    def __init__(self, data, grad_tracked: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        arr.flags.writeable = False
        self.data = arr
        self.grad_tracked = bool(grad_tracked)
        self.grad: Tensor | None = None
        self.id = next(_ids)
        self._produced = False

    @property
    def shape(self) -> tuple[int, ...]:
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

    @property
    def is_leaf(self) -> bool:
        return not self._produced

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype, grad_tracked: bool | None = None) -> "Tensor":
        tracked = self.grad_tracked if grad_tracked is None else grad_tracked
        return Tensor(self.data.astype(dtype), grad_tracked=tracked)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", grad_tracked=True" if self.grad_tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap arrays and Python scalars as constant tensors."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.id for t in self.inputs)

    @property
    def output_id(self) -> int:
        return self.output.id


@dataclass
class Tape:
    """Append-only record of the operations of one forward pass.

    Use as a context manager; tapes nest, the innermost one records.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        return backward(loss, self)


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _make(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    tracked = tape is not None and any(t.grad_tracked for t in inputs)
    result = Tensor(out, grad_tracked=tracked, dtype=out.dtype)
    if tracked:
        result._produced = True
        tape.record(Node(op, tuple(inputs), result, backward_fn))
    return result


def backward(loss: Tensor, tape: Tape) -> dict[int, Tensor]:
    """Propagate d(loss)/d(.) through ``tape``.

    Returns a map from leaf tensor id to its gradient and also stores each
    gradient on ``leaf.grad``.  The tape is cleared afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.grad_tracked or not any(n.output is loss for n in reversed(tape.nodes)):
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape, dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g_out = grads.pop(node.output_id, None)
        if g_out is None:
            continue
        g_ins = node.backward_fn(g_out)
        for t, g in zip(node.inputs, g_ins):
            if g is None or not t.grad_tracked:
                continue
            if g.shape != t.shape:
                g = _unbroadcast(g, t.shape)
            if t.id in grads:
                grads[t.id] = grads[t.id] + g
            else:
                grads[t.id] = g
            if t.is_leaf:
                leaves[t.id] = t
    tape.nodes.clear()

    out: dict[int, Tensor] = {}
    for tid, t in leaves.items():
        g = Tensor(grads[tid].astype(t.dtype, copy=False))
        t.grad = g
        out[tid] = g
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def _broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast(a, b, "add")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast(a, b, "mul")
    x, y = a.data, b.data
    return _make("mul", x * y, (a, b), lambda g: (g * y, g * x))


def maximum(a, b) -> Tensor:
    """Elementwise maximum; on ties the gradient goes to ``a``."""
    a, b = _binary_operands(a, b)
    _broadcast(a, b, "max")
    first = a.data >= b.data

    def bw(g):
        return np.where(first, g, 0), np.where(first, 0, g)

    return _make("max", np.maximum(a.data, b.data), (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _make("leaky_relu", x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def log(x: Tensor) -> Tensor:
    d = x.data
    if np.any(d <= 0):
        raise ContractError("log: input must be strictly positive")
    return _make("log", np.log(d), (x,), lambda g: (g / d,))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    if not np.all(np.isfinite(e)):
        raise ContractError("exp: result overflowed")
    return _make("exp", e, (x,), lambda g: (g * e,))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "log": log, "exp": exp}
_BINARY = {"add": add, "sub": sub, "mul": mul, "max": maximum}


def elementwise(kind: str, a, b=None, slope: float = 0.01) -> Tensor:
    """Dispatch an elementwise op by name (``leaky_relu`` takes ``slope``)."""
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ContractError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    return _make("matmul", x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def bw(g):
        return np.split(g, bounds, axis=ax)

    return _make("concat", np.concatenate([t.data for t in xs], axis=ax), xs, bw)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ContractError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, x: Tensor, axes: Iterable[int] | int | None = None, keepdims: bool = False) -> Tensor:
    """Reduce over ``axes`` with ``mean``, ``sum`` or ``max``.

    The max gradient goes entirely to the first maximal element, i.e. the
    lowest flat index within each reduced sub-block.
    """
    ax = _norm_axes(axes, x.ndim)
    for a in ax:
        if x.shape[a] == 0:
            raise ContractError(f"reduce {kind}: axis {a} has zero extent")
    kept = tuple(1 if i in ax else n for i, n in enumerate(x.shape))
    d = x.data
    if kind == "sum":
        out = d.sum(axis=ax, keepdims=True)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept), x.shape),)

    elif kind == "mean":
        count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
        out = d.mean(axis=ax, keepdims=True)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept) / count, x.shape),)

    elif kind == "max":
        rest = tuple(i for i in range(x.ndim) if i not in ax)
        perm = rest + ax
        moved = np.transpose(d, perm)
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(kept)

        def bw(g):
            gf = np.zeros(flat.shape, dtype=g.dtype)
            np.put_along_axis(gf, idx[..., None], g.reshape(idx.shape + (1,)), axis=-1)
            return (np.transpose(gf.reshape(moved.shape), np.argsort(perm)),)

    else:
        raise ContractError(f"unknown reduction {kind!r}")
    if not keepdims:
        out = out.reshape(tuple(n for i, n in enumerate(x.shape) if i not in ax))
    return _make(f"reduce_{kind}", np.ascontiguousarray(out), (x,), bw)


def sum_(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("sum", x, axes, keepdims)


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", x, axes, keepdims)


def max_(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("max", x, axes, keepdims)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float | None = None) -> float:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Returns ``max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    The default step is ``1e-6 * max(1, |x_i|)`` in float64 and
    ``1e-3 * max(1, |x_i|)`` otherwise.
    """
    # C order so that reshape(-1) below is a view, not a copy
    base = np.array(x.data, copy=True, order="C")
    if eps is None:
        eps = 1e-6 if base.dtype == np.float64 else 1e-3

    leaf = Tensor(base.copy(), grad_tracked=True)
    with Tape() as tape:
        y = f(leaf)
    if y.size != 1 or not np.all(np.isfinite(y.data)):
        raise ContractError("finite_diff_check: f(x) must be a finite scalar")
    if y.grad_tracked:
        analytic = backward(y, tape)[leaf.id].data.astype(np.float64)
    else:
        analytic = np.zeros(base.shape)

    numeric = np.zeros(base.shape)
    flat = base.reshape(-1)
    for i in range(flat.size):
        h = eps * max(1.0, abs(float(flat[i])))
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(Tensor(base.copy())).data.reshape(-1)[0])
        flat[i] = orig - h
        down = float(f(Tensor(base.copy())).data.reshape(-1)[0])
        flat[i] = orig
        # actual step after rounding to the working dtype
        step = float(np.asarray(orig + h, base.dtype)) - float(np.asarray(orig - h, base.dtype))
        numeric.reshape(-1)[i] = (up - down) / step

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
