"""Dense float64 tensors with taped reverse-mode automatic differentiation.

The engine is deliberately small: tensors wrap C-contiguous row-major numpy
float64 arrays, and every differentiable primitive records itself on the
innermost active :class:`Tape`.  Calling :func:`backward` replays the tape in
reverse creation order (a topological order by construction) and accumulates
gradients additively into every ``requires_grad`` leaf.  With no active tape,
operations run as plain numpy forward evaluation.

Primitives cover exactly what the model forward passes need: matrix product,
broadcasting elementwise arithmetic, pointwise nonlinearities, stabilized
softmax, sum/mean/population-variance reductions, row gather/scatter, reshape,
concatenation, and masked constant replacement.  All computation is
single-threaded with a fixed summation order, so identical seeds give
bit-identical arrays.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar; scalars route through the scalar-tagged primitives
    def __add__(self, other):
        if isinstance(other, Tensor):
            return elementwise("add", self, other)
        return elementwise("add_scalar", self, scalar=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return elementwise("sub", self, other)
        return elementwise("add_scalar", self, scalar=-float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise("mul", self, other)
        return elementwise("scale", self, scalar=float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return elementwise("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def leaky_relu(self, slope: float = 0.01):
        return elementwise("leaky_relu", self, scalar=slope)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def square(self):
        return elementwise("square", self)

    def softplus(self):
        return elementwise("softplus", self)

    def sum(self, axis: int | None = None, keepdims: bool = False):
        return reduce("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False):
        return reduce("mean", self, axis=axis, keepdims=keepdims)

    def variance(self, axis: int | None = None, keepdims: bool = False):
        return reduce("variance", self, axis=axis, keepdims=keepdims)

    def reshape(self, shape: Sequence[int]):
        return reshape(self, shape)


def tensor(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# --------------------------------------------------------------------------
# tape

BackwardRule = Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of primitive operations for one backward replay.

    Creation order is a topological order (an op's inputs always exist before
    it), so replaying the list in reverse propagates output gradients to every
    leaf.  Use as a context manager; ops record to the innermost active tape.
    """

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], BackwardRule]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self.ops)


_TAPE_STACK: list[Tape | None] = []


class _NoGradBlock:
    """Masks any outer tape so enclosed ops evaluate without recording."""

    def __enter__(self) -> None:
        _TAPE_STACK.append(None)

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()


def no_grad() -> _NoGradBlock:
    return _NoGradBlock()


def _record(out: Tensor, inputs: tuple[Tensor, ...], rule: BackwardRule) -> Tensor:
    tape = _TAPE_STACK[-1] if _TAPE_STACK else None
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.ops.append((out, inputs, rule))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate grad on every requires_grad leaf reachable from loss.

    Gradients accumulate additively across uses of the same tensor, and
    across repeated backward calls until the caller clears them.  Grads on
    intermediate (op output) tensors are consumed and released during the
    replay; only leaves keep theirs.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for out, inputs, rule in reversed(tape.ops):
        g = out.grad
        if g is None:
            continue
        for inp, gi in zip(inputs, rule(g)):
            if gi is None or not inp.requires_grad:
                continue
            inp.grad = gi if inp.grad is None else inp.grad + gi
        out.grad = None


# --------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the pre-broadcast operand shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _segment_sum(values: np.ndarray, idx: np.ndarray, num_rows: int) -> np.ndarray:
    """Sum rows of values into num_rows bins (fixed order, C-speed bincount)."""
    trail = values.shape[1:]
    width = int(np.prod(trail)) if trail else 1
    flat_idx = (idx[:, None] * width + np.arange(width, dtype=np.int64)[None, :]).ravel()
    acc = np.bincount(flat_idx, weights=values.reshape(-1), minlength=num_rows * width)
    return acc.reshape((num_rows,) + trail)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def rule(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _record(out, (a, b), rule)


def elementwise(tag: str, a: Tensor, b: Tensor | None = None, *, scalar: float | None = None) -> Tensor:
    """Pointwise primitive dispatch.

    Binary tags (add, sub, mul) follow numpy broadcasting; gradients are
    summed back down to each operand's shape.  Unary tags: add_scalar, scale,
    neg, sigmoid, leaky_relu (scalar = slope, default 0.01), exp, log,
    square, softplus.
    """
    x = a.data
    if tag in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"elementwise '{tag}' needs two operands")
        y = b.data
        try:
            np.broadcast_shapes(x.shape, y.shape)
        except ValueError:
            raise ShapeError(f"cannot broadcast {x.shape} with {y.shape}") from None
        need_a, need_b = a.requires_grad, b.requires_grad
        if tag == "add":
            out = x + y
            rule = lambda g: (_unbroadcast(g, x.shape) if need_a else None,
                              _unbroadcast(g, y.shape) if need_b else None)
        elif tag == "sub":
            out = x - y
            rule = lambda g: (_unbroadcast(g, x.shape) if need_a else None,
                              _unbroadcast(-g, y.shape) if need_b else None)
        else:
            out = x * y
            rule = lambda g: (_unbroadcast(g * y, x.shape) if need_a else None,
                              _unbroadcast(g * x, y.shape) if need_b else None)
        return _record(Tensor(out), (a, b), rule)

    if tag == "add_scalar":
        out, rule = x + scalar, lambda g: (g,)
    elif tag == "scale":
        out, rule = x * scalar, lambda g: (g * scalar,)
    elif tag == "neg":
        out, rule = -x, lambda g: (-g,)
    elif tag == "sigmoid":
        s = _sigmoid(x)
        out, rule = s, lambda g: (g * s * (1.0 - s),)
    elif tag == "leaky_relu":
        slope = 0.01 if scalar is None else scalar
        out = np.where(x > 0, x, slope * x)
        rule = lambda g: (g * np.where(x > 0, 1.0, slope),)
    elif tag == "exp":
        e = np.exp(x)
        out, rule = e, lambda g: (g * e,)
    elif tag == "log":
        out, rule = np.log(x), lambda g: (g / x,)
    elif tag == "square":
        out, rule = x * x, lambda g: (2.0 * x * g,)
    elif tag == "softplus":
        out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        rule = lambda g: (g * _sigmoid(x),)
    else:
        raise ValueError(f"unknown elementwise tag: {tag!r}")
    return _record(Tensor(out), (a,), rule)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of bounds for shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def rule(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), rule)


def reduce(tag: str, x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """sum / mean / variance reduction over one axis or the whole tensor.

    Variance is the population convention (divide by the element count).
    """
    if tag not in ("sum", "mean", "variance"):
        raise ValueError(f"unknown reduce tag: {tag!r}")
    data = x.data
    count = data.size if axis is None else data.shape[axis]
    if count == 0:
        raise ValueError("cannot reduce over an empty axis")

    def expand(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, data.shape)

    if tag == "sum":
        out, rule = data.sum(axis=axis, keepdims=keepdims), lambda g: (expand(g),)
    elif tag == "mean":
        out, rule = data.mean(axis=axis, keepdims=keepdims), lambda g: (expand(g) / count,)
    else:
        mu = data.mean(axis=axis, keepdims=True)
        centered = data - mu
        out = (centered * centered).mean(axis=axis, keepdims=keepdims)
        rule = lambda g: (2.0 * centered * expand(g) / count,)
    return _record(Tensor(out), (x,), rule)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along an axis by integer index array."""
    idx = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    out = Tensor(np.take(x.data, idx, axis=axis))

    def rule(g):
        if axis == 0:
            return (_segment_sum(g, idx, x.data.shape[0]),)
        moved = _segment_sum(np.ascontiguousarray(np.moveaxis(g, axis, 0)), idx,
                             x.data.shape[axis])
        return (np.ascontiguousarray(np.moveaxis(moved, 0, axis)),)

    return _record(out, (x,), rule)


def scatter_rows(x: Tensor, indices, num_rows: int) -> Tensor:
    """Sum rows of x into a (num_rows, ...) tensor at the given indices."""
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(_segment_sum(x.data, idx, num_rows))

    def rule(g):
        return (g[idx],)

    return _record(out, (x,), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(tuple(shape)))

    def rule(g):
        return (g.reshape(x.data.shape),)

    return _record(out, (x,), rule)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    out = Tensor(np.concatenate([t.data for t in parts], axis=axis))
    sizes = [t.data.shape[axis] for t in parts]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), rule)


def replace_where(x: Tensor, mask: np.ndarray, values: np.ndarray) -> Tensor:
    """Copy x with masked slots overwritten by constant values.

    Unmasked slots are bit-identical to x; gradient flows only through them,
    so the replacement values never receive or transmit gradient.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
    out = Tensor(np.where(mask, values, x.data))

    def rule(g):
        return (np.where(mask, 0.0, g),)

    return _record(out, (x,), rule)
