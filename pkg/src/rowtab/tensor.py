"""Dense float tensors with tape-based reverse-mode automatic differentiation.

Every operation that sees a gradient-requiring input while a :class:`Tape` is
active appends one entry (output, parents, backward rule) to that tape. The
tape is therefore already in topological order, and :func:`backward` replays
it once, back to front, accumulating gradients additively into ``.grad``
buffers. With no active tape (inference/eval), operations run as plain numpy
with zero recording overhead.

Float32 is the working precision; building inputs and parameters as float64
gives the 64-bit mode used for finite-difference gradient checking. A tape is
confined to one thread; independent tapes on different threads may run
concurrently.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "set_debug_validation",
    "backward",
    "matmul",
    "softmax",
    "layer_norm",
    "leaky_relu",
    "gelu",
    "cross_entropy",
    "mse",
    "embedding",
    "concat",
    "stack",
    "broadcast_to",
    "index_select",
    "dropout",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "transpose",
    "reduce_max",
    "reduce_min",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf value was produced while debug validation is enabled."""


_debug_validation = False


def set_debug_validation(enabled: bool) -> None:
    """Toggle NaN/Inf checking of every op result. Off by default."""
    global _debug_validation
    _debug_validation = bool(enabled)


_TLS = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Entry:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: "Tensor", parents: tuple, backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of operations for one forward pass (one thread)."""

    __slots__ = ("entries",)

    def __init__(self) -> None:
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self, "tape stack corrupted"
        stack.pop()

    def __len__(self) -> int:
        return len(self.entries)


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A dense float array, optionally tracked for reverse-mode autodiff.

    ``data`` is immutable by convention once the tensor has been used in an
    op; only ``grad`` buffers and optimizer-owned parameter data mutate.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self._tape: Tape | None = None

    # -- metadata ---------------------------------------------------------

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __truediv__(self, other):
        return div(self, self._coerce(other))

    def __rtruediv__(self, other):
        return div(self._coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _scalar_error(t: Tensor):
    raise ShapeError(f"item() requires a single-element tensor, got shape {t.shape}")


def _from_op(data: np.ndarray, parents: Sequence[Tensor], backward_rule: Callable) -> Tensor:
    if _debug_validation and not np.isfinite(data).all():
        raise NonFiniteError("non-finite value produced (debug validation enabled)")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.is_leaf = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        tape.entries.append(_Entry(out, tuple(parents), backward_rule))
    else:
        out.requires_grad = False
        out._tape = None
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every reachable gradient-requiring tensor.

    Gradients accumulate additively, so a tensor used twice receives the sum
    of both contributions. Intermediate (non-leaf) grads are freed afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("backward: loss is not recorded on an active tape")
    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        g = entry.out.grad
        if g is None:
            continue
        grads = entry.backward(g)
        for parent, pg in zip(entry.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = pg
            else:
                parent.grad = parent.grad + pg
    for entry in tape.entries:
        if not entry.out.is_leaf:
            entry.out.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(a.data + b.data, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _from_op(a.data - b.data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _from_op(ad * bd, (a, b), rule)


def div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return _from_op(ad / bd, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return _from_op(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    if not isinstance(p, (int, float)):
        raise TypeError("power exponent must be a python scalar")
    ad = a.data

    def rule(g):
        return (g * p * ad ** (p - 1),)

    return _from_op(ad ** p, (a,), rule)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def rule(g):
        return (g * out_data,)

    return _from_op(out_data, (a,), rule)


def log(a: Tensor) -> Tensor:
    ad = a.data

    def rule(g):
        return (g / ad,)

    return _from_op(np.log(ad), (a,), rule)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def rule(g):
        return (g * (0.5 / out_data),)

    return _from_op(out_data, (a,), rule)


def absolute(a: Tensor) -> Tensor:
    ad = a.data

    def rule(g):
        return (g * np.sign(ad),)

    return _from_op(np.abs(ad), (a,), rule)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    """x where x >= 0, otherwise slope * x."""
    if slope < 0:
        raise ValueError(f"leaky_relu slope must be >= 0, got {slope}")
    ad = a.data
    pos = ad >= 0

    def rule(g):
        return (g * np.where(pos, np.asarray(1.0, ad.dtype), np.asarray(slope, ad.dtype)),)

    return _from_op(np.where(pos, ad, np.asarray(slope, ad.dtype) * ad), (a,), rule)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh approximation, BERT-family form)."""
    ad = a.data
    inner = _GELU_C * (ad + _GELU_K * ad * ad * ad)
    t = np.tanh(inner.astype(ad.dtype, copy=False))
    cdf = 0.5 * (1.0 + t)

    def rule(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_K * ad * ad)
        return ((cdf + ad * (0.5 * (1.0 - t * t)) * dinner) * g,)

    return _from_op(ad * cdf, (a,), rule)


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def rule(g):
        return (g.reshape(old),)

    return _from_op(a.data.reshape(shape), (a,), rule)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def rule(g):
        return (np.transpose(g, inverse),)

    return _from_op(np.transpose(a.data, axes), (a,), rule)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def rule(g):
        return (np.ascontiguousarray(_unbroadcast(g, old)),)

    return _from_op(np.broadcast_to(a.data, shape), (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i in range(len(sizes)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    return _from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def narrow(a: Tensor, key) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def rule(g):
        dz = np.zeros(shape, dtype=dtype)
        np.add.at(dz, key, g)
        return (dz,)

    return _from_op(a.data[key], (a,), rule)


def index_select(a: Tensor, indices) -> Tensor:
    """Rows of ``a`` (axis 0) at ``indices``; duplicate indices accumulate."""
    idx = np.asarray(indices, dtype=np.int64)
    shape, dtype = a.shape, a.dtype

    def rule(g):
        dz = np.zeros(shape, dtype=dtype)
        np.add.at(dz, idx, g)
        return (dz,)

    return _from_op(a.data[idx], (a,), rule)


# -- reductions --------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def rule(g):
        return (np.ascontiguousarray(_expand_reduced(g, shape, axis, keepdims)),)

    return _from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), rule)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    count = a.data.size if axis is None else np.prod(
        [shape[ax % len(shape)] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )
    inv = 1.0 / float(count)

    def rule(g):
        return (np.ascontiguousarray(_expand_reduced(g * inv, shape, axis, keepdims)),)

    return _from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), rule)


def _reduce_extreme(a: Tensor, axis, keepdims: bool, fn) -> Tensor:
    ad = a.data
    out_data = fn(ad, axis=axis, keepdims=keepdims)

    def rule(g):
        # Subgradient: split evenly among tied extreme positions.
        mask = (ad == _expand_reduced(out_data, ad.shape, axis, keepdims)).astype(ad.dtype)
        ties = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
        gexp = _expand_reduced(g, ad.shape, axis, keepdims)
        return (mask * gexp / ties,)

    return _from_op(out_data, (a,), rule)


def reduce_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce_extreme(a, axis, keepdims, np.max)


def reduce_min(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce_extreme(a, axis, keepdims, np.min)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >= 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    if ad.ndim > 2 and bd.ndim == 2:
        # One flat GEMM instead of a batched product plus a reduction.
        k, n = bd.shape
        a2 = np.ascontiguousarray(ad.reshape(-1, k))
        out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def rule(g):
            g2 = g.reshape(-1, n)
            da = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            db = a2.T @ g2 if b.requires_grad else None
            return da, db

        return _from_op(out, (a, b), rule)

    def rule(g):
        da = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape) if a.requires_grad else None
        db = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape) if b.requires_grad else None
        return da, db

    return _from_op(ad @ bd, (a, b), rule)


# -- neural-net specific ------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Exp-normalize along ``axis`` with max-subtraction for stability."""
    ad = a.data
    if not -ad.ndim <= axis < ad.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {ad.shape}")
    z = ad - ad.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    s = ez / ez.sum(axis=axis, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _from_op(s, (a,), rule)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization of the last axis, then affine."""
    dim = a.shape[-1]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({dim},), got {gain.shape} and {bias.shape}"
        )
    ad = a.data
    mu = ad.mean(axis=-1, keepdims=True)
    xc = ad - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxh = g * gd
        dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _from_op(xhat * gd + bias.data, (a, gain, bias), rule)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class.

    ``logits`` is [batch, classes]; ``labels`` an int array in ``[0, classes)``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = logits.shape
    if lab.shape[0] != batch:
        raise ShapeError(f"cross_entropy got {lab.shape[0]} labels for batch {batch}")
    if lab.min() < 0 or lab.max() >= classes:
        raise ValueError(f"cross_entropy label out of range [0, {classes})")
    ld = logits.data
    z = ld - ld.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = logp[np.arange(batch), lab]
    loss = np.asarray(-picked.mean(), dtype=ld.dtype)

    def rule(g):
        p = np.exp(logp)
        p[np.arange(batch), lab] -= 1.0
        return (p * (g / batch),)

    return _from_op(loss, (logits,), rule)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared elementwise differences."""
    if a.shape != b.shape:
        raise ShapeError(f"mse requires equal shapes, got {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    loss = np.asarray((diff * diff).mean(), dtype=a.dtype)

    def rule(g):
        da = diff * (2.0 * g / n)
        return da, -da

    return _from_op(loss, (a, b), rule)


def embedding(weight: Tensor, ids) -> Tensor:
    """Rows of ``weight`` at integer ``ids``; grads scatter-add back."""
    idx = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(
            f"embedding index out of range: valid [0, {vocab}), got min {idx.min()} max {idx.max()}"
        )
    shape, dtype = weight.shape, weight.dtype

    def rule(g):
        # Sort + reduceat is far faster than np.add.at for this scatter-add.
        dw = np.zeros(shape, dtype=dtype)
        flat_idx = idx.reshape(-1)
        flat_g = g.reshape(-1, shape[1])
        order = np.argsort(flat_idx, kind="stable")
        sorted_idx = flat_idx[order]
        starts = np.concatenate(([0], np.flatnonzero(np.diff(sorted_idx)) + 1))
        dw[sorted_idx[starts]] = np.add.reduceat(flat_g[order], starts, axis=0)
        return (dw,)

    return _from_op(weight.data[idx], (weight,), rule)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype.type) / np.asarray(1.0 - p, a.dtype)
    return mul(a, Tensor(keep))
