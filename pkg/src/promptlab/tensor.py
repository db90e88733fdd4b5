"""Dense f64 tensors with reverse-mode autodiff on an explicit tape.

Every operation records a backward closure on the thread-local active
tape.  Gradients are accumulated by replaying the tape in exact reverse
creation order, which makes repeated backward passes from identical
forward passes bitwise reproducible.  A central-difference oracle
(`finite_diff_grad`) is provided as the independent check for every
differentiable primitive.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class TapeError(RuntimeError):
    """Tape misuse: no active tape, wrong tape, or repeated backward."""


_LOCAL = threading.local()


def _active_tape():
    return getattr(_LOCAL, "tape", None)


class Tape:
    """Ordered record of primitive operations for one forward/backward pass.

    Use as a context manager; tensor operations executed inside the
    block are recorded.  `backward` may be called once per tape.
    """

    def __init__(self):
        self._records: list[tuple[Callable[[], None], "Tensor"]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise TapeError("nested tapes are not supported")
        _LOCAL.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _LOCAL.tape = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, backward_fn: Callable[[], None], out: "Tensor") -> None:
        self._records.append((backward_fn, out))

    def backward(self, root: "Tensor") -> None:
        """Populate grad buffers of every recorded tensor reachable from root."""
        if self._consumed:
            raise TapeError("backward already ran on this tape; build a new tape")
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        if root._tape is not self:
            raise TapeError("root tensor was not recorded on this tape")
        self._consumed = True
        root.grad = np.ones_like(root.data)
        for backward_fn, out in reversed(self._records):
            if out.grad is not None:
                backward_fn()


class Tensor:
    """Dense n-dimensional f64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def has_nonfinite(self) -> bool:
        """Explicit NaN/Inf check; validation is never silent elsewhere."""
        return not bool(np.all(np.isfinite(self.data)))

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if self.has_nonfinite():
            raise NumericError(f"{what} contains NaN or Inf")
        return self

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("tensor was not recorded on a tape")
        self._tape.backward(self)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return elementwise_mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return elementwise_mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def from_op(out_data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[Tensor], None] | None) -> Tensor:
    """Create an op output, recording `backward_fn` when gradients are needed.

    `backward_fn(out)` must read `out.grad` and accumulate into the inputs.
    Custom primitives (e.g. convolution) are registered through this hook.
    """
    out = Tensor(out_data)
    tape = _active_tape()
    needs_grad = any(t.requires_grad for t in inputs)
    if tape is not None and needs_grad and backward_fn is not None:
        out.requires_grad = True
        out._tape = tape
        tape._record(lambda: backward_fn(out), out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad, b.shape))

    return from_op(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def backward(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-out.grad, b.shape))

    return from_op(a.data - b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(c * out.grad)

    return from_op(a.data * c, (a,), backward)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "elementwise_mul")

    def backward(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * a.data, b.shape))

    return from_op(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")

    def backward(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    return from_op(a.data / b.data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking semantics on leading axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree for {a.shape} and {b.shape}")

    def backward(out: Tensor):
        if a.requires_grad:
            ga = np.matmul(out.grad, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), out.grad)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return from_op(np.matmul(a.data, b.data), (a, b), backward)


def relu(a: Tensor) -> Tensor:
    """Elementwise max(v, 0); the subgradient at exactly 0 is 0."""

    def backward(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(out.grad * (a.data > 0.0))

    return from_op(np.maximum(a.data, 0.0), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(out.grad * (0.5 / out.data))

    return from_op(out_data, (a,), backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Stable softmax along `axis`: each slice is nonnegative and sums to 1."""
    if a.has_nonfinite():
        raise NumericError("softmax input contains NaN or Inf")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def backward(out: Tensor):
        if a.requires_grad:
            g = out.grad
            inner = np.sum(g * out.data, axis=axis, keepdims=True)
            a.accumulate_grad(out.data * (g - inner))

    return from_op(out_data, (a,), backward)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    if a.has_nonfinite():
        raise NumericError("log_softmax input contains NaN or Inf")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(out: Tensor):
        if a.requires_grad:
            g = out.grad
            soft = np.exp(out.data)
            a.accumulate_grad(g - soft * np.sum(g, axis=axis, keepdims=True))

    return from_op(out_data, (a,), backward)


def _normalize_axis(axis, ndim: int, opname: str):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"{opname}: axis {ax} out of range for ndim {ndim}")
    return tuple(ax % ndim for ax in axes)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, a.data.ndim, "reduce_sum")

    def backward(out: Tensor):
        if a.requires_grad:
            g = out.grad
            if axes is not None and not keepdims:
                g = np.expand_dims(g, axes)
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    return from_op(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, a.data.ndim, "reduce_mean")
    n = a.data.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))

    def backward(out: Tensor):
        if a.requires_grad:
            g = out.grad
            if axes is not None and not keepdims:
                g = np.expand_dims(g, axes)
            a.accumulate_grad(np.broadcast_to(g, a.shape) / n)

    return from_op(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward)


def reduce_var(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divide by count, not count-1)."""
    axes = _normalize_axis(axis, a.data.ndim, "reduce_var")
    n = a.data.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    mu = a.data.mean(axis=axes, keepdims=True)

    def backward(out: Tensor):
        if a.requires_grad:
            g = out.grad
            if axes is not None and not keepdims:
                g = np.expand_dims(g, axes)
            a.accumulate_grad(np.broadcast_to(g, a.shape) * (2.0 / n) * (a.data - mu))

    return from_op(a.data.var(axis=axes, keepdims=keepdims), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(out.grad.reshape(a.shape))

    return from_op(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: Iterable[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(out.grad, inverse))

    return from_op(np.transpose(a.data, axes).copy(), (a,), backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out_data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot expand {a.shape} to {shape}")

    def backward(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))

    return from_op(out_data, (a,), backward)


def masked_embed(values: Tensor, mask: np.ndarray, base: np.ndarray) -> Tensor:
    """Place a flat value vector at mask positions of a constant base array.

    Gradients flow only into `values`; `base` is data, not a variable.
    """
    mask = np.asarray(mask, dtype=bool)
    if values.data.size != int(mask.sum()):
        raise ShapeError(
            f"masked_embed: {values.data.size} values for {int(mask.sum())} mask slots")
    out_data = np.array(base, dtype=np.float64, copy=True)
    out_data[mask] = values.data.reshape(-1)

    def backward(out: Tensor):
        if values.requires_grad:
            values.accumulate_grad(out.grad[mask].reshape(values.shape))

    return from_op(out_data, (values,), backward)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     h: float = 1e-5) -> np.ndarray:
    """Central difference (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.

    Independent of the tape; used as the oracle for every autodiff check.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(approx: np.ndarray, reference: np.ndarray) -> float:
    """Max per-coordinate |approx - reference| / (|reference| + 1e-8)."""
    approx = np.asarray(approx, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    return float(np.max(np.abs(approx - reference) / (np.abs(reference) + 1e-8)))
