"""Reverse-mode automatic differentiation on dense numpy tensors.

A :class:`Tape` records every differentiable operation executed while it is
active.  Records are appended in execution order, which is already a
topological order of the data-flow graph, so :func:`backward` is a single
reverse sweep that visits each record at most once.

Training runs in float32; gradient checking runs the same code in float64.
Binary operations require matching shapes except that either operand may be
a scalar (0-d) tensor, which broadcasts.  No other broadcasting is supported.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ShapeError, TapeError

# ---------------------------------------------------------------------------
# Tape machinery


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Use as a context manager; entering makes it the active tape.  A tape is
    consumed by :func:`backward` and rejects further recording afterwards.
    """

    def __init__(self):
        self.records: list[OpRecord] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, rec: "OpRecord"):
        if self.consumed:
            raise TapeError("tape already consumed by backward; re-run the forward pass")
        rec.index = len(self.records)
        self.records.append(rec)


class OpRecord:
    """One tape entry: input tensors, the output, and the backward rule.

    ``backward_fn(grad_out) -> tuple`` returns one gradient array (or None)
    per input, aligned positionally.
    """

    __slots__ = ("inputs", "output", "backward_fn", "tape", "index")

    def __init__(self, inputs, output, backward_fn, tape):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape
        self.index = -1


_TAPE_STACK: list[Tape] = []
_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that suppresses tape recording (inference mode)."""

    def __enter__(self):
        _GRAD_ENABLED.append(False)
        return self

    def __exit__(self, exc_type, exc, tb):
        _GRAD_ENABLED.pop()


def _active_tape() -> Optional[Tape]:
    if _GRAD_ENABLED[-1] and _TAPE_STACK:
        return _TAPE_STACK[-1]
    return None


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    """Dense N-dimensional array with optional gradient tracking.

    Volumetric activations use the N x C x D x H x W layout.  ``grad`` is
    populated by :func:`backward` on tensors with ``requires_grad`` set.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape_node: Optional[OpRecord] = None
        self.name = name

    # -- introspection ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{tag})"

    # -- convenience operators ----------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __sub__(self, other):
        return subtract(self, _lift(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_multiply(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_multiply(self, -1.0)


def tensor(data, requires_grad: bool = False, dtype=None, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def parameter(data, dtype=None, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap op output; append a tape record when recording is live."""
    tape = _active_tape()
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req and tape is not None)
    if tape is not None and req:
        rec = OpRecord(tuple(inputs), out, backward_fn, tape)
        tape.record(rec)
        out.tape_node = rec
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _binary_shapes_ok(a: Tensor, b: Tensor, op: str):
    # exact match, or one side is a 0-d scalar
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    """Collapse a broadcast gradient back to a scalar operand's shape."""
    if grad.shape == tuple(shape):
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and reduction operations


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record((a, b), out, bwd)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b, "subtract")
    out = a.data - b.data

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _record((a, b), out, bwd)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b, "multiply")
    out = a.data * b.data

    def bwd(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _record((a, b), out, bwd)


def scalar_multiply(x: Tensor, c: float) -> Tensor:
    out = x.data * x.dtype.type(c)

    def bwd(g):
        return (g * x.dtype.type(c),)

    return _record((x,), out, bwd)


def divide(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b, "divide")
    out = a.data / b.data

    def bwd(g):
        return (_reduce_to(g / b.data, a.shape),
                _reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return _record((a, b), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign for overflow-free exponentials
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d)))).astype(d.dtype)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record((x,), out, bwd)


def natural_log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def bwd(g):
        return (g / x.data,)

    return _record((x,), out, bwd)


def clip_min(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); gradient passes only where x > floor."""
    out = np.maximum(x.data, x.dtype.type(floor))

    def bwd(g):
        return (g * (x.data > floor),)

    return _record((x,), out, bwd)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0,1), got {slope}")
    mask = x.data > 0  # subgradient at 0 is the slope
    out = np.where(mask, x.data, x.dtype.type(slope) * x.data)

    def bwd(g):
        return (np.where(mask, g, x.dtype.type(slope) * g),)

    return _record((x,), out, bwd)


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def bwd(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _record((x,), out, bwd)


def tmean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def bwd(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _record((x,), out, bwd)


def channel_mean(x: Tensor) -> Tensor:
    """Mean over the channel axis of an N x C x ... tensor, keeping the axis."""
    if x.data.ndim < 2:
        raise ShapeError(f"channel_mean expects at least 2 axes, got shape {x.shape}")
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)

    def bwd(g):
        return (np.broadcast_to(g / c, x.shape).astype(x.dtype, copy=False),)

    return _record((x,), out, bwd)


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    base = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != base[0] or p.shape[2:] != base[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {base} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=1)
    extents = [p.shape[1] for p in parts]

    def bwd(g):
        grads = []
        start = 0
        for ext in extents:
            grads.append(g[:, start:start + ext])
            start += ext
        return tuple(grads)

    return _record(tuple(parts), out, bwd)


def batch_item(x: Tensor, index: int) -> Tensor:
    """Select one sample along the batch axis; backward scatters into place."""
    out = x.data[index]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _record((x,), out, bwd)


def channel_item(x: Tensor, index: int) -> Tensor:
    """Select one channel of an N x C x ... tensor; backward scatters."""
    out = x.data[:, index]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, index] = g
        return (gx,)

    return _record((x,), out, bwd)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; the backward rule propagates exactly zero."""
    out = x.data.copy()

    def bwd(g):
        return (np.zeros_like(x.data),)

    return _record((x,), out, bwd)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine of the angle between flattened a and b; eps guards zero norms."""
    _check_same_shape(a, b, "cosine_similarity")
    av = a.data.ravel()
    bv = b.data.ravel()
    dot = float(av @ bv)
    na = float(np.sqrt(av @ av))
    nb = float(np.sqrt(bv @ bv))
    da = max(na, eps)
    db = max(nb, eps)
    cos = dot / (da * db)
    out = np.asarray(cos, dtype=a.dtype)

    def bwd(g):
        g = float(g)
        ga = bv / (da * db)
        if na > eps:
            ga = ga - (cos / (na * na)) * av
        gb = av / (da * db)
        if nb > eps:
            gb = gb - (cos / (nb * nb)) * bv
        return (
            (g * ga).reshape(a.shape).astype(a.dtype, copy=False),
            (g * gb).reshape(b.shape).astype(b.dtype, copy=False),
        )

    return _record((a, b), out, bwd)


def instance_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel standardization over the spatial axes.

    x is N x C x D x H x W; scale and shift are per-channel (C,).  Statistics
    use the population variance and are differentiated through.
    """
    if eps <= 0:
        raise ValueError("instance_norm eps must be positive")
    if x.data.ndim != 5:
        raise ShapeError(f"instance_norm expects N,C,D,H,W input, got {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"instance_norm affine shape must be ({c},)")
    axes = (2, 3, 4)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv
    gamma = scale.data.reshape(1, c, 1, 1, 1)
    out = xhat * gamma + shift.data.reshape(1, c, 1, 1, 1)

    def bwd(g):
        gxhat = g * gamma
        m1 = gxhat.mean(axis=axes, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        gscale = (g * xhat).sum(axis=(0, 2, 3, 4))
        gshift = g.sum(axis=(0, 2, 3, 4))
        return gx.astype(x.dtype, copy=False), gscale, gshift

    return _record((x, scale, shift), out, bwd)


def softmax_channels(x: Tensor) -> Tensor:
    """Numerically stable softmax over the channel axis."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _record((x,), out, bwd)


# ---------------------------------------------------------------------------
# Backward


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Populates ``grad`` on every requires_grad leaf reached by the sweep and
    returns the gradients keyed by the leaf tensors themselves.  The tape is
    consumed: a second call (or further recording) raises :class:`TapeError`.
    """
    if loss.data.ndim != 0:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    rec = loss.tape_node
    if rec is None:
        raise TapeError("loss is not attached to a live tape (no recorded operations)")
    tape = rec.tape
    if tape.consumed:
        raise TapeError("tape already consumed; re-run the forward pass before backward")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for r in reversed(tape.records[: rec.index + 1]):
        g_out = grads.pop(id(r.output), None)
        if g_out is None:
            continue
        in_grads = r.backward_fn(g_out)
        for t, g in zip(r.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if t.tape_node is None:  # leaf: parameter or input
                leaves[key] = t
    result: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        t.grad = np.asarray(grads[key], dtype=t.dtype)
        result[t] = t.grad
    return result
