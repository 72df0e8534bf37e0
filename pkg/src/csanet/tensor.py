"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive appends one node to the active :class:`Tape`
(thread-local). :func:`backward` replays the tape in reverse insertion order,
accumulating gradients by summation, then resets the tape.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    __slots__ = ("tape", "generation", "index", "output", "inputs", "backward")

    def __init__(self, tape, generation, index, output, inputs, backward):
        self.tape = tape
        self.generation = generation
        self.index = index
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive operations.

    Insertion order is a valid topological order because an op can only
    consume tensors that already exist.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.generation = 0
        self.enabled = True

    def __len__(self):
        return len(self.nodes)

    def record(self, output: "Tensor", inputs: tuple["Tensor", ...], backward: BackwardFn) -> Node:
        node = Node(self, self.generation, len(self.nodes), output, inputs, backward)
        self.nodes.append(node)
        return node

    def reset(self):
        self.nodes = []
        self.generation += 1

    def backward(self, loss: "Tensor", visit: Callable[[Node], None] | None = None):
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        node = loss.node
        if node is None or node.tape is not self or node.generation != self.generation:
            raise ContractError("loss is not attached to the active tape")

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: node.index + 1]):
            if visit is not None:
                visit(node)
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.node is None or t.node.generation != self.generation:
                    # leaf: accumulate into .grad
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    pending[key] = gi if key not in pending else pending[key] + gi
        self.reset()


_local = threading.local()


def active_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def use_tape(tape: Tape):
    prev = getattr(_local, "tape", None)
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = prev


@contextlib.contextmanager
def no_grad():
    tape = active_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


class Tensor:
    """Dense row-major float64 array that may participate in the tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, copy: bool = True):
        self.data = np.array(data, dtype=np.float64, copy=copy or None)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # arithmetic
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

    def __pow__(self, p: float):
        return power(self, p)

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
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, inputs: Iterable[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap a forward result and register its backward rule if needed.

    ``backward_fn`` maps the upstream gradient to one gradient per input
    (``None`` where an input needs none).
    """
    inputs = tuple(inputs)
    out = Tensor(data, copy=False)
    tape = active_tape()
    if tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = tape.record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor):
    active_tape().backward(loss)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_op(out, (a, b),
                   lambda g: (unbroadcast(g / b.data, a.shape),
                              unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_SQRT1_2 = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return make_op(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                n != m for i, (n, m) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"cannot concat shapes {ref} and {t.shape} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def take(a, index) -> Tensor:
    """Basic (slice/int) indexing; gradient scatters back into zeros."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_op(a.data[index], (a,), bw)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def pad(a, widths) -> Tensor:
    a = as_tensor(a)
    widths = tuple(tuple(w) for w in widths)
    inner = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return make_op(np.pad(a.data, widths), (a,), lambda g: (g[inner],))


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    """Arithmetic mean, accumulated relative to a pivot entry.

    Summing x - c (c = first entry along the reduced axes) and adding c back
    keeps the mean of a constant array exactly equal to that constant, which
    plain sum-then-divide does not guarantee.
    """
    a = as_tensor(a)
    if axis is None:
        axes = tuple(range(a.ndim))
    else:
        axes = tuple(ax % a.ndim for ax in (axis if isinstance(axis, tuple) else (axis,)))
    n = int(np.prod([a.shape[ax] for ax in axes]))
    pivot = a.data[tuple(slice(0, 1) if ax in axes else slice(None) for ax in range(a.ndim))]
    out = pivot + np.sum(a.data - pivot, axis=axes, keepdims=True) / float(n)
    if not keepdims:
        out = out.reshape([d for ax, d in enumerate(a.shape) if ax not in axes])

    def bw(g):
        g = np.reshape(g, [1 if ax in axes else d for ax, d in enumerate(a.shape)])
        return (np.broadcast_to(g / float(n), a.shape).copy(),)

    return make_op(out, (a,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    Backward: dA = G @ B^T, dB = A^T @ G (reduced over broadcast axes).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_op(out, (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax with max subtraction for stability."""
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError("softmax input contains NaN")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (a,), bw)


def softmax_rows(a) -> Tensor:
    return softmax(a, axis=-1)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError("log_softmax input contains NaN")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (a,), bw)


# ---------------------------------------------------------------- oracle

def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, h: float = 1e-6,
                     indices: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x.data`` is perturbed in place and restored; ``f`` runs with recording
    disabled. When ``indices`` is given only those entries are filled.
    """
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    if indices is None:
        positions = range(flat.size)
    else:
        positions = [int(np.ravel_multi_index(ix, x.shape)) for ix in indices]
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(x))
            flat[i] = orig - h
            fm = _scalar(f(x))
            flat[i] = orig
            grad.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return grad


def _scalar(v) -> float:
    return float(v.data.reshape(-1)[0]) if isinstance(v, Tensor) else float(v)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)
