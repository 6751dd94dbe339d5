"""Dense tensors with reverse-mode automatic differentiation.

A small numpy-backed engine: each differentiable operation appends one node to
a per-thread tape, and ``backward`` on a scalar result walks that tape once in
reverse, accumulating gradients on the leaf tensors that requested them.

Shapes are always explicit. There is no implicit broadcasting; the only
broadcast-like behaviours are dedicated ops (``add_last``, ``pair_sum``) whose
semantics are fixed and shape-checked.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

# floor used by the clamped natural log
_LOG_FLOOR = 1e-300
# effectively -inf for masked attention logits; exp() underflows to exact 0.0
NEG_FILL = -1e30


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class GradError(RuntimeError):
    """Invalid use of the differentiation tape."""


class Tensor:
    """A dense real array, optionally tracked for differentiation.

    ``data`` is a float64 ndarray. ``grad`` is populated on leaves (tensors
    created with ``requires_grad=True``) by ``backward``; results of recorded
    operations never keep gradients after the backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor data contains non-finite values (shape {arr.shape})")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return _result(self.data.copy())

    def backward(self) -> None:
        """Run reverse-mode differentiation from this scalar, consuming the tape."""
        backward(self)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return tmean(self, axis)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: tuple, backward_fn: Callable):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations for one backward pass.

    Nodes are appended in execution order, so inputs always precede their
    consumers; ``backward`` walks the list once in reverse. A tape can be
    consumed exactly once.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, node: _Node) -> None:
        self._nodes.append(node)
        self._produced.add(id(node.output))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise GradError(f"backward requires a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise GradError("tape already consumed by a previous backward")
        self._consumed = True
        flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            grad_out = flowing.pop(id(node.output), None)
            if grad_out is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward_fn(grad_out)):
                if grad is None or not tensor.requires_grad:
                    continue
                if id(tensor) in self._produced:
                    key = id(tensor)
                    if key in flowing:
                        flowing[key] = flowing[key] + grad
                    else:
                        flowing[key] = grad
                else:
                    if tensor.grad is None:
                        tensor.grad = grad.copy()
                    else:
                        tensor.grad = tensor.grad + grad


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _active_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None or tape._consumed:
        tape = Tape()
        _state.tape = tape
    return tape


def current_tape() -> Tape | None:
    """The thread's live (unconsumed) tape, if any ops have been recorded."""
    tape = getattr(_state, "tape", None)
    if tape is not None and not tape._consumed:
        return tape
    return None


@contextmanager
def no_grad():
    """Disable tape recording; use for inference and finite-difference probes."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def backward(loss: Tensor) -> None:
    """Populate leaf gradients for a scalar loss and consume the tape.

    A constant scalar (nothing recorded for it) is a no-op apart from the
    scalar check: no tensor anywhere requested a gradient, so none are
    produced. Calling backward a second time on a result of a consumed tape
    is rejected.
    """
    if loss.data.size != 1:
        raise GradError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = getattr(_state, "tape", None)
    if tape is None:
        return
    if tape._consumed:
        if id(loss) in tape._produced:
            raise GradError("tape already consumed by a previous backward")
        return
    if len(tape) == 0:
        return
    tape.backward(loss)


def _result(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    return out


def _record(out: Tensor, inputs: tuple, backward_fn: Callable) -> Tensor:
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active_tape()._record(_Node(out, inputs, backward_fn))
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} must match")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = _result(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = _result(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = _result(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    out = _result(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    if not math.isfinite(c):
        raise ValueError(f"scale: non-finite constant {c!r}")
    out = _result(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def add_last(x: Tensor, v: Tensor) -> Tensor:
    """Add a 1-D vector along the last axis of ``x`` (explicit bias add)."""
    if v.data.ndim != 1 or x.shape[-1] != v.shape[0]:
        raise ShapeError(f"add_last: vector {v.shape} does not fit last axis of {x.shape}")
    out = _result(x.data + v.data)

    def bwd(g):
        return g, g.reshape(-1, v.shape[0]).sum(axis=0)

    return _record(out, (x, v), bwd)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched over leading axes by numpy matmul rules.

    Supported forms: (n,k)@(k,m), stacked (...,n,k)@(k,m), and batched
    (B,n,k)@(B,k,m). Operands must have ndim >= 2.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ")
    out = _result(np.matmul(a.data, b.data))

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got shape {a.shape}")
    out = _result(a.data.T.copy())
    return _record(out, (a,), lambda g: (g.T,))


def dot_last(x: Tensor, v: Tensor) -> Tensor:
    """Contract the last axis of ``x`` with a 1-D vector ``v``."""
    if v.data.ndim != 1 or x.shape[-1] != v.shape[0]:
        raise ShapeError(f"dot_last: vector {v.shape} does not fit last axis of {x.shape}")
    out = _result(np.tensordot(x.data, v.data, axes=([-1], [0])))

    def bwd(g):
        gx = g[..., None] * v.data
        axes = list(range(g.ndim))
        gv = np.tensordot(g, x.data, axes=(axes, axes))
        return gx, gv

    return _record(out, (x, v), bwd)


def pair_sum(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs sum over the second-to-last axis.

    ``a`` has shape (..., n, d) and ``b`` (..., m, d) with identical leading
    dims; the result (..., n, m, d) holds a[..., i, :] + b[..., j, :] for every
    pair (i, j). This is the expansion step of pairwise attention scores.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"pair_sum: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"pair_sum: shapes {a.shape} and {b.shape} are incompatible")
    out = _result(a.data[..., :, None, :] + b.data[..., None, :, :])
    return _record(out, (a, b), lambda g: (g.sum(axis=-2), g.sum(axis=-3)))


# -- shape ops ---------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != (axis % len(ref)) and t.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = _result(np.concatenate([t.data for t in tensors], axis=axis))
    offsets = np.cumsum([t.shape[axis % len(ref)] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(tensors), bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = _result(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    n = x.shape[axis]
    if not (0 <= start and start + length <= n):
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for size {n} axis {axis}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = _result(x.data[index].copy())

    def bwd(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _record(out, (x,), bwd)


# -- reductions --------------------------------------------------------------


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    out = _result(np.sum(x.data, axis=axis))

    def bwd(g):
        if axis is None:
            return (np.full_like(x.data, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record(out, (x,), bwd)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    out = _result(np.mean(x.data, axis=axis))

    def bwd(g):
        if axis is None:
            return (np.full_like(x.data, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), x.shape).copy(),)

    return _record(out, (x,), bwd)


def amax(x: Tensor, axis: int) -> Tensor:
    """Max along an axis; the gradient flows to the first max position."""
    idx = np.argmax(x.data, axis=axis)
    out = _result(np.max(x.data, axis=axis))

    def bwd(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(
            full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
        )
        return (full,)

    return _record(out, (x,), bwd)


# -- nonlinearities ----------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)
    out = _result(s)

    def bwd(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    out = _result(y)

    def bwd(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return _record(out, (x,), bwd)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)
    out = _result(x.data * factor)
    return _record(out, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = _result(s)
    return _record(out, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = _result(t)
    return _record(out, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = _result(e)
    return _record(out, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    """Natural log, clamped away from zero for stability."""
    clamped = np.maximum(x.data, _LOG_FLOOR)
    out = _result(np.log(clamped))
    return _record(out, (x,), lambda g: (g / clamped,))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true with a constant; their gradient is zero."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_fill: mask shape {mask.shape} != tensor shape {x.shape}")
    out = _result(np.where(mask, value, x.data))
    return _record(out, (x,), lambda g: (np.where(mask, 0.0, g),))


# -- gradient verification ----------------------------------------------------


def finite_difference_check(
    f: Callable[[Tensor], Tensor], theta: Tensor, step: float = 1e-5
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the parameter tensor to a scalar. The analytic gradient comes
    from one taped evaluation; each coordinate is then probed at theta +- step
    with recording disabled. Relative error per coordinate is
    |g_i - fd_i| / max(|g_i|, 1e-8).
    """
    theta.grad = None
    out = f(theta)
    if out.data.size != 1:
        raise GradError(f"finite_difference_check: f must return a scalar, got {out.shape}")
    out.backward()
    grad = np.zeros_like(theta.data) if theta.grad is None else theta.grad.copy()
    theta.grad = None

    flat = theta.data.reshape(-1)
    gflat = grad.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        with no_grad():
            f_plus = float(f(theta).data)
        flat[i] = orig - step
        with no_grad():
            f_minus = float(f(theta).data)
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise ArithmeticError(f"non-finite value while probing coordinate {i}")
        fd = (f_plus - f_minus) / (2.0 * step)
        err = abs(gflat[i] - fd) / max(abs(gflat[i]), 1e-8)
        worst = max(worst, err)
    return worst
