"""Dense float64 arrays with tape-based reverse-mode differentiation.

Only the operations the recognition model needs are provided.  Values are
plain numpy arrays; a ``Tape`` activated as a context manager records every
operation whose inputs are tracked, and :func:`backward` replays it in
reverse creation order (which is a reverse topological order by
construction).

    >>> w = DiffArray([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = reduce(matmul(w, DiffArray([[3.0], [4.0]])), axis=0, op="sum").sum()
    >>> backward(tape, loss)[w]
    array([[3., 4.]])

Forward values never depend on whether a tape is active.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DiffArray",
    "Tape",
    "ShapeError",
    "as_diff",
    "backward",
    "custom_op",
    "matmul",
    "einsum",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "softmax_axis",
    "log_softmax_axis",
    "leaky_relu",
    "reduce",
    "reshape",
    "transpose",
    "take",
    "concat",
    "pad_axis",
    "detach",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class DiffArray:
    """A real array that can take part in differentiation.

    ``requires_grad`` marks a leaf (a parameter or an input under test) whose
    gradient :func:`backward` reports.  Arrays produced by operations are
    tracked implicitly through the tape that was active when they were made.
    """

    __slots__ = ("value", "requires_grad", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else self.value.item()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffArray(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

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
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis, "sum", keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis, "mean", keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, axis, "max", keepdims=keepdims)


def as_diff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


class _Node:
    __slots__ = ("array", "parents", "vjp")

    def __init__(self, array, parents, vjp):
        self.array = array
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Records operations for one forward pass.

    A tape is a single-writer object: use one per thread.  Parameters shared
    between tapes are registered lazily as leaves on each tape that uses them.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._index: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def node_id(self, array: DiffArray) -> int | None:
        """Position of ``array`` on this tape, registering tracked leaves."""
        idx = self._index.get(id(array))
        if idx is None and array.requires_grad:
            idx = self._add(array, (), None)
        return idx

    def _add(self, array, parents, vjp) -> int:
        idx = len(self._nodes)
        self._nodes.append(_Node(array, parents, vjp))
        self._index[id(array)] = idx
        return idx

    def record(self, out: DiffArray, inputs: Sequence[DiffArray], vjp: Callable) -> None:
        parents = tuple(self.node_id(a) for a in inputs)
        if any(p is not None for p in parents):
            self._add(out, parents, vjp)

    def leaves(self) -> list[DiffArray]:
        return [n.array for n in self._nodes if n.vjp is None]


def custom_op(value, inputs: Sequence[DiffArray], vjp: Callable) -> DiffArray:
    """Wrap a precomputed ``value`` as an operation over ``inputs``.

    ``vjp(g)`` receives the output cotangent and returns one cotangent (or
    ``None``) per input, each shaped like that input.
    """
    out = DiffArray.__new__(DiffArray)
    out.value = value if isinstance(value, np.ndarray) and value.dtype == np.float64 else np.asarray(value, dtype=np.float64)
    out.requires_grad = False
    out.name = None
    tape = _active_tape()
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def backward(tape: Tape, root: DiffArray, wrt: Iterable[DiffArray] | None = None) -> dict:
    """Gradients of the scalar ``root`` with respect to tracked leaves.

    Returns a dict keyed by the leaf ``DiffArray`` objects.  With ``wrt``
    given, exactly those arrays are reported and unreached ones get zeros;
    otherwise every ``requires_grad`` leaf on the tape is reported.  The tape
    is not consumed, so calling this twice gives identical results.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape._nodes)
    root_id = tape._index.get(id(root))
    if root_id is not None:
        grads[root_id] = np.ones(root.shape)
        for i in range(root_id, -1, -1):
            g = grads[i]
            node = tape._nodes[i]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent is None or pg is None:
                    continue
                grads[parent] = pg if grads[parent] is None else grads[parent] + pg

    targets = list(wrt) if wrt is not None else tape.leaves()
    result = {}
    for arr in targets:
        idx = tape._index.get(id(arr))
        g = grads[idx] if idx is not None else None
        result[arr] = np.zeros(arr.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(arr.shape)
    return result


def detach(x) -> DiffArray:
    return DiffArray(as_diff(x).value)


# ----------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: DiffArray, b: DiffArray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def elementwise(a, b, op: str) -> DiffArray:
    """``add``, ``sub`` or ``mul`` with size-1 broadcasting."""
    a, b = as_diff(a), as_diff(b)
    if a.shape != b.shape:
        _broadcast_shape(a, b)
    av, bv = a.value, b.value
    if op == "add":
        value = av + bv

        def vjp(g):
            return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    elif op == "sub":
        value = av - bv

        def vjp(g):
            return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    elif op == "mul":
        value = av * bv

        def vjp(g):
            return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    elif op == "div":
        value = av / bv

        def vjp(g):
            return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * value / bv, bv.shape)

    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return custom_op(value, (a, b), vjp)


def add(a, b) -> DiffArray:
    return elementwise(a, b, "add")


def sub(a, b) -> DiffArray:
    return elementwise(a, b, "sub")


def mul(a, b) -> DiffArray:
    return elementwise(a, b, "mul")


def div(a, b) -> DiffArray:
    return elementwise(a, b, "div")


def neg(x) -> DiffArray:
    x = as_diff(x)
    return custom_op(-x.value, (x,), lambda g: (-g,))


def exp(x) -> DiffArray:
    x = as_diff(x)
    value = np.exp(x.value)
    return custom_op(value, (x,), lambda g: (g * value,))


def log(x) -> DiffArray:
    x = as_diff(x)
    xv = x.value
    return custom_op(np.log(xv), (x,), lambda g: (g / xv,))


def sqrt(x) -> DiffArray:
    x = as_diff(x)
    value = np.sqrt(x.value)
    return custom_op(value, (x,), lambda g: (g * 0.5 / value,))


def leaky_relu(x, slope: float = 0.01) -> DiffArray:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = as_diff(x)
    positive = x.value >= 0
    value = np.where(positive, x.value, slope * x.value)
    return custom_op(value, (x,), lambda g: (np.where(positive, g, slope * g),))


# ----------------------------------------------------------------------------
# contractions


def matmul(a, b) -> DiffArray:
    """Matrix product; leading axes (if any) broadcast as batch axes."""
    a, b = as_diff(a), as_diff(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None
    av, bv = a.value, b.value

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return custom_op(av @ bv, (a, b), vjp)


def _contract(subscripts: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Two-operand einsum via a single batched matmul.

    Indices are grouped as batch (both operands and output), free (one
    operand and output) and summed (both operands, not output).
    """
    lhs, out = subscripts.split("->")
    sa, sb = lhs.split(",")
    batch = [c for c in sa if c in sb and c in out]
    summed = [c for c in sa if c in sb and c not in out]
    free_a = [c for c in sa if c not in sb]
    free_b = [c for c in sb if c not in sa]
    size = {c: n for c, n in zip(sa, a.shape)}
    size.update(zip(sb, b.shape))

    def prod(chars):
        return math.prod(size[c] for c in chars)

    def arrange(arr, src, dst):
        perm = [src.index(c) for c in dst]
        return arr if perm == list(range(len(perm))) else arr.transpose(perm)

    at = arrange(a, sa, batch + free_a + summed).reshape(prod(batch), prod(free_a), prod(summed))
    bt = arrange(b, sb, batch + summed + free_b).reshape(prod(batch), prod(summed), prod(free_b))
    order = batch + free_a + free_b
    res = (at @ bt).reshape([size[c] for c in order])
    return arrange(res, order, list(out))


def einsum(subscripts: str, a, b) -> DiffArray:
    """Two-operand einsum without implicit output or repeated indices.

    Every index of an operand must appear in the other operand or in the
    output; that is all the model needs and keeps the adjoint another einsum.
    """
    a, b = as_diff(a), as_diff(b)
    lhs, out = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    if len(set(sa)) != len(sa) or len(set(sb)) != len(sb):
        raise ValueError(f"einsum: repeated index in {subscripts!r}")
    for own, other in ((sa, sb), (sb, sa)):
        missing = set(own) - set(other) - set(out)
        if missing:
            raise ValueError(f"einsum: index {sorted(missing)} of {own!r} is summed without a partner")
    if len(sa) != a.ndim or len(sb) != b.ndim:
        raise ShapeError(f"einsum {subscripts!r}: operand ranks {a.shape}, {b.shape} do not match")
    sizes: dict[str, int] = {}
    for s, shape in ((sa, a.shape), (sb, b.shape)):
        for ch, n in zip(s, shape):
            if sizes.setdefault(ch, n) != n:
                raise ShapeError(f"einsum {subscripts!r}: index {ch!r} has sizes {sizes[ch]} and {n}")
    av, bv = a.value, b.value
    value = _contract(f"{sa},{sb}->{out}", av, bv)

    def vjp(g):
        return _contract(f"{out},{sb}->{sa}", g, bv), _contract(f"{out},{sa}->{sb}", g, av)

    return custom_op(value, (a, b), vjp)


# ----------------------------------------------------------------------------
# normalisers and reductions


def _check_axis(x: DiffArray, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} is invalid for an array of rank {x.ndim}")
    return axis % x.ndim


def softmax_axis(x, axis: int) -> DiffArray:
    x = as_diff(x)
    axis = _check_axis(x, axis)
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return custom_op(y, (x,), vjp)


def log_softmax_axis(x, axis: int) -> DiffArray:
    x = as_diff(x)
    axis = _check_axis(x, axis)
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return custom_op(y, (x,), vjp)


def reduce(x, axis: int | None, op: str, keepdims: bool = False) -> DiffArray:
    """Sum, mean or max over one axis (or everything when ``axis`` is None).

    ``max`` routes the gradient to the first maximal element.
    """
    x = as_diff(x)
    xv = x.value
    if axis is None:
        flat = reduce(reshape(x, (xv.size,)), 0, op)
        return reshape(flat, (1,) * xv.ndim) if keepdims else flat
    axis = _check_axis(x, axis)
    n = xv.shape[axis]
    if op == "sum":
        value = xv.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            g = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g, xv.shape).copy(),)

    elif op == "mean":
        value = xv.mean(axis=axis, keepdims=keepdims)

        def vjp(g):
            g = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, xv.shape).copy(),)

    elif op == "max":
        arg = np.expand_dims(xv.argmax(axis=axis), axis)
        value = np.take_along_axis(xv, arg, axis=axis)
        if not keepdims:
            value = np.squeeze(value, axis=axis)

        def vjp(g):
            g = g if keepdims else np.expand_dims(g, axis)
            out = np.zeros(xv.shape)
            np.put_along_axis(out, arg, g, axis=axis)
            return (out,)

    else:
        raise ValueError(f"unknown reduction {op!r}")
    return custom_op(value, (x,), vjp)


# ----------------------------------------------------------------------------
# structural


def reshape(x, shape: Sequence[int]) -> DiffArray:
    x = as_diff(x)
    src = x.shape
    try:
        value = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from None
    return custom_op(value, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes: Sequence[int] | None = None) -> DiffArray:
    x = as_diff(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return custom_op(x.value.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def take(x, index) -> DiffArray:
    """numpy-style indexing (basic or advanced); repeated indices accumulate."""
    x = as_diff(x)
    src = x.shape
    value = x.value[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None for i in parts)

    def vjp(g):
        out = np.zeros(src)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return custom_op(np.array(value, dtype=np.float64), (x,), vjp)


def concat(arrays: Sequence, axis: int) -> DiffArray:
    arrays = [as_diff(a) for a in arrays]
    if not arrays:
        raise ValueError("concat needs at least one array")
    axis = _check_axis(arrays[0], axis)
    ref = arrays[0].shape
    for a in arrays[1:]:
        if a.ndim != len(ref) or any(m != n for i, (m, n) in enumerate(zip(a.shape, ref)) if i != axis):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {a.shape} disagree")
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(np.concatenate([a.value for a in arrays], axis=axis), arrays, vjp)


def pad_axis(x, axis: int, before: int, after: int) -> DiffArray:
    """Zero padding along a single axis."""
    x = as_diff(x)
    axis = _check_axis(x, axis)
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    value = np.pad(x.value, widths)
    n = x.shape[axis]
    window = [slice(None)] * x.ndim
    window[axis] = slice(before, before + n)
    window = tuple(window)
    return custom_op(value, (x,), lambda g: (g[window],))
