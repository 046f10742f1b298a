"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tape`` records every differentiable operation executed inside its
``with`` block (define-by-run). ``backward(loss)`` replays the recorded
operations in reverse, accumulating gradients into every tensor that
requires them. Outside an active tape, operations compute forward values
only, which makes inference allocation-free and safe to run concurrently
on read-only parameters.

Only scalar broadcasting is supported; anything fancier must be written
with explicit reshapes or the dedicated row-vector ops.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ParameterError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_LAYER_NORM_EPS = 1e-12


class Tensor:
    """A dense n-dimensional grid of float64 values with optional gradient.

    ``data`` is treated as immutable after construction; the only mutation
    the library performs is gradient accumulation into ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

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

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Record:
    """One executed op: its inputs, its output, and per-input backward rules."""

    __slots__ = ("inputs", "output", "grad_fns")

    def __init__(self, inputs, output, grad_fns):
        self.inputs = inputs
        self.output = output
        self.grad_fns = grad_fns


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    def __init__(self):
        self._records: list[_Record] = []

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def _append(self, record: _Record) -> None:
        self._records.append(record)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _result(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    grad_fns: Sequence[Callable[[np.ndarray], np.ndarray] | None],
) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape._append(_Record(tuple(inputs), out, tuple(grad_fns)))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor that requires one.

    Repeated calls without zeroing accumulate into existing gradients.
    """
    if loss.data.shape != ():
        raise ParameterError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    if loss.tape is None:
        raise ParameterError("backward() needs a loss recorded on an active Tape")

    flowing: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    holders: dict[int, Tensor] = {id(loss): loss}

    for record in reversed(loss.tape._records):
        g_out = flowing.pop(id(record.output), None)
        if g_out is None:
            continue
        for inp, grad_fn in zip(record.inputs, record.grad_fns):
            if grad_fn is None or not inp.requires_grad:
                continue
            g_in = grad_fn(g_out)
            key = id(inp)
            if key in flowing:
                flowing[key] = flowing[key] + g_in
            else:
                flowing[key] = g_in
                holders[key] = inp
        out = record.output
        if out.requires_grad:
            out.grad = g_out if out.grad is None else out.grad + g_out

    # Whatever is still flowing belongs to leaves (parameters, inputs).
    for key, g in flowing.items():
        t = holders[key]
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


def _is_scalar_shape(shape: tuple[int, ...]) -> bool:
    return shape == ()


def _binary_shapes(a: Tensor, b: Tensor, op_name: str) -> None:
    if a.shape == b.shape:
        return
    if _is_scalar_shape(a.shape) or _is_scalar_shape(b.shape):
        return
    raise ShapeError(f"{op_name}: operand shapes {a.shape} and {b.shape} do not match")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Collapse a gradient down to a scalar operand's shape."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    """Elementwise sum; one operand may be a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        (lambda g: _reduce_to(g, a.shape), lambda g: _reduce_to(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    """Elementwise product; one operand may be a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        (
            lambda g: _reduce_to(g * b.data, a.shape),
            lambda g: _reduce_to(g * a.data, b.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with the standard dA = g·Bᵀ, dB = Aᵀ·g rules."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    return _result(
        a.data @ b.data,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def relu(x: Tensor) -> Tensor:
    """max(0, x); the backward pass masks negative inputs."""
    x = _as_tensor(x)
    mask = x.data > 0.0
    return _result(np.where(mask, x.data, 0.0), (x,), (lambda g: g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: 0.5·x·(1 + erf(x/√2))."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI

    def grad_fn(g):
        return g * (cdf + x.data * pdf)

    return _result(x.data * cdf, (x,), (grad_fn,))


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-d vector to every row of an [..., d] tensor."""
    x, v = _as_tensor(x), _as_tensor(v)
    if v.data.ndim != 1 or x.data.ndim < 1 or x.shape[-1] != v.shape[0]:
        raise ShapeError(f"add_rowvec: cannot add vector {v.shape} to rows of {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _result(
        x.data + v.data,
        (x, v),
        (lambda g: g, lambda g: np.sum(g, axis=lead) if lead else g),
    )


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stabilized softmax over the last dimension."""
    x = _as_tensor(x)
    if x.data.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_lastdim: last dimension must be >= 1, got shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    expd = np.exp(shifted)
    y = expd / np.sum(expd, axis=-1, keepdims=True)

    def grad_fn(g):
        return y * (g - np.sum(g * y, axis=-1, keepdims=True))

    return _result(y, (x,), (grad_fn,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last dimension to mean 0 / variance 1, then apply affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1] if x.data.ndim else 0
    if d < 1:
        raise ShapeError(f"layer_norm: last dimension must be >= 1, got shape {x.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} and bias {bias.shape} must both have shape ({d},)"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LAYER_NORM_EPS)
    xhat = xc * inv
    lead = tuple(range(x.data.ndim - 1))

    def grad_x(g):
        dxhat = g * gain.data
        dvar = np.sum(dxhat * xc, axis=-1, keepdims=True) * (-0.5) * inv**3
        dmu = np.sum(dxhat * -inv, axis=-1, keepdims=True) + dvar * np.mean(
            -2.0 * xc, axis=-1, keepdims=True
        )
        return dxhat * inv + dvar * 2.0 * xc / d + dmu / d

    def grad_gain(g):
        return np.sum(g * xhat, axis=lead) if lead else g * xhat

    def grad_bias(g):
        return np.sum(g, axis=lead) if lead else g

    return _result(xhat * gain.data + bias.data, (x, gain, bias), (grad_x, grad_gain, grad_bias))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared elementwise differences, as a scalar tensor."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape} do not match")
    diff = pred.data - target.data
    n = max(1, diff.size)
    loss = np.asarray(np.mean(diff * diff)) if diff.size else np.asarray(0.0)

    def grad_pred(g):
        return g * 2.0 * diff / n

    def grad_target(g):
        return g * -2.0 * diff / n

    return _result(loss.reshape(()), (pred, target), (grad_pred, grad_target))


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    x = _as_tensor(x)
    return _result(
        np.asarray(np.sum(x.data)).reshape(()),
        (x,),
        (lambda g: np.broadcast_to(g, x.shape).copy() if x.shape else g,),
    )


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return _result(x.data.reshape(shape), (x,), (lambda g: g.reshape(x.shape),))


def transpose2d(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose2d: expected a 2-D tensor, got shape {x.shape}")
    return _result(x.data.T.copy(), (x,), (lambda g: g.T,))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-D tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols: expected a 2-D tensor, got shape {x.shape}")
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_cols: range [{start}, {stop}) invalid for shape {x.shape}")

    def grad_fn(g):
        full = np.zeros(x.shape, dtype=np.float64)
        full[:, start:stop] = g
        return full

    return _result(x.data[:, start:stop].copy(), (x,), (grad_fn,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors with equal row counts along columns."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_cols: need at least one tensor")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_cols: incompatible shapes {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def make_grad(i):
        return lambda g: g[:, offsets[i]:offsets[i + 1]]

    return _result(
        np.concatenate([p.data for p in parts], axis=1),
        tuple(parts),
        tuple(make_grad(i) for i in range(len(parts))),
    )
