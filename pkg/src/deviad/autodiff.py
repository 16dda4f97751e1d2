"""Dense float tensors with reverse-mode automatic differentiation.

Implements exactly the operator set the deviation encoder and its training
losses need: matrix products, elementwise arithmetic, row/column broadcasts,
last-axis softmax with an additive bias, GELU, gathers, concatenation,
clamping and reductions.  Operations record themselves onto an explicit
tape; ``backward`` replays the tape once, in reverse.

Training runs at 32-bit.  The same graph code runs at 64-bit when fed
float64 leaves, which is how the finite-difference verification harness
checks every backward rule.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

# Additive bias value that saturates softmax: masked entries receive weight
# below 1e-6 without overflowing 32-bit exponentials.
MASK_BIAS = -1e9

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Tape/graph misuse, e.g. backward from a non-scalar node."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


@dataclass
class WarningCounters:
    """Non-fatal conditions worth surfacing to callers."""

    saturated_softmax_rows: int = 0

    def reset(self) -> None:
        self.saturated_softmax_rows = 0


counters = WarningCounters()


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialized with non-finite values")
        self.data = _readonly(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def assign(self, new_data: np.ndarray) -> None:
        """Rebind the value buffer (optimizer updates, checkpoint loads)."""
        arr = np.array(new_data, dtype=self.data.dtype, copy=True)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign shape {arr.shape} != {self.data.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("assign with non-finite values")
        self.data = _readonly(arr)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar for the common binary ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return affine(self, -1.0, 0.0)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


# --------------------------------------------------------------------------
# Tape

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeRecord:
    out: Tensor
    inputs: tuple
    rule: BackwardRule
    op: str


@dataclass
class Tape:
    """Ordered operation log; construction order is topological by design."""

    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


_local = threading.local()


def active_tape() -> Optional[Tape]:
    return getattr(_local, "tape", None)


@contextmanager
def recording(tape: Tape):
    prev = active_tape()
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = prev


@contextmanager
def no_grad():
    prev = active_tape()
    _local.tape = None
    try:
        yield
    finally:
        _local.tape = prev


def _out(op: str, data: np.ndarray, inputs: tuple, rule: BackwardRule) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    result = Tensor.__new__(Tensor)
    result.data = _readonly(np.ascontiguousarray(data))
    result.grad = None
    result.requires_grad = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.records.append(TapeRecord(result, inputs, rule, op))
    return result


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(node) through the tape, newest record first.

    Every record is visited at most once; gradients accumulate into the
    ``grad`` buffer of each tensor that requires them.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    needed = {id(loss)}
    for rec in reversed(tape.records):
        if id(rec.out) not in needed or rec.out.grad is None:
            continue
        grads = rec.rule(rec.out.grad)
        for tensor, grad in zip(rec.inputs, grads):
            if grad is None or not tensor.requires_grad:
                continue
            if grad.shape != tensor.data.shape:
                raise ShapeError(
                    f"{rec.op} backward produced grad {grad.shape} for input {tensor.data.shape}"
                )
            if tensor.grad is None:
                tensor.grad = grad.astype(tensor.data.dtype, copy=True)
            else:
                tensor.grad = tensor.grad + grad
            needed.add(id(tensor))


# --------------------------------------------------------------------------
# Elementwise and broadcast arithmetic


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _out("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _out("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _out("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def affine(a: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """scale * a + shift with python-float coefficients."""
    s = float(scale)
    return _out("affine", s * a.data + float(shift), (a,), lambda g: (s * g,))


def add_rowvec(mat: Tensor, vec: Tensor) -> Tensor:
    """Add a length-n vector to every row of an (m, n) matrix."""
    if mat.data.ndim != 2 or vec.data.ndim != 1 or mat.shape[1] != vec.shape[0]:
        raise ShapeError(f"add_rowvec: {mat.shape} + {vec.shape}")
    return _out(
        "add_rowvec",
        mat.data + vec.data[None, :],
        (mat, vec),
        lambda g: (g, g.sum(axis=0)),
    )


def mul_rowvec(mat: Tensor, vec: Tensor) -> Tensor:
    """Scale every column j of an (m, n) matrix by vec[j]."""
    if mat.data.ndim != 2 or vec.data.ndim != 1 or mat.shape[1] != vec.shape[0]:
        raise ShapeError(f"mul_rowvec: {mat.shape} * {vec.shape}")
    return _out(
        "mul_rowvec",
        mat.data * vec.data[None, :],
        (mat, vec),
        lambda g: (g * vec.data[None, :], (g * mat.data).sum(axis=0)),
    )


def mul_colvec(mat: Tensor, vec: Tensor) -> Tensor:
    """Scale every row i of an (m, n) matrix by vec[i]."""
    if mat.data.ndim != 2 or vec.data.ndim != 1 or mat.shape[0] != vec.shape[0]:
        raise ShapeError(f"mul_colvec: {mat.shape} * {vec.shape}")
    return _out(
        "mul_colvec",
        mat.data * vec.data[:, None],
        (mat, vec),
        lambda g: (g * vec.data[:, None], (g * mat.data).sum(axis=1)),
    )


# --------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape} disagree")
    return _out(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D operand")
    return _out("transpose", a.data.T, (a,), lambda g: (g.T,))


# --------------------------------------------------------------------------
# Reductions


def sum_all(a: Tensor) -> Tensor:
    return _out(
        "sum_all",
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),),
    )


def sum_lastdim(a: Tensor) -> Tensor:
    """Sum over the last axis, dropping it."""
    if a.data.ndim < 1:
        raise ShapeError("sum_lastdim expects ndim >= 1")
    n = a.shape[-1]
    return _out(
        "sum_lastdim",
        a.data.sum(axis=-1),
        (a,),
        lambda g: (np.repeat(g[..., None], n, axis=-1).astype(a.dtype, copy=False),),
    )


def mean_all(a: Tensor) -> Tensor:
    return affine(sum_all(a), 1.0 / a.size)


# --------------------------------------------------------------------------
# Nonlinearities


def softmax_lastdim(x: Tensor, additive_bias: Optional[Tensor] = None) -> Tensor:
    """Row-stochastic softmax over the last axis of ``x + bias``.

    Rows whose bias saturates every entry (all <= MASK_BIAS) still normalize
    uniformly after the max shift; such rows bump a warning counter rather
    than erroring.
    """
    z = x.data
    inputs: tuple = (x,)
    if additive_bias is not None:
        _same_shape("softmax_lastdim", x, additive_bias)
        z = z + additive_bias.data
        inputs = (x, additive_bias)
        saturated = int(np.sum(np.max(additive_bias.data, axis=-1) <= MASK_BIAS))
        if saturated:
            counters.saturated_softmax_rows += saturated
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    w = e / e.sum(axis=-1, keepdims=True)

    def rule(g: np.ndarray):
        inner = (g * w).sum(axis=-1, keepdims=True)
        gx = w * (g - inner)
        return (gx, gx) if len(inputs) == 2 else (gx,)

    return _out("softmax_lastdim", w, inputs, rule)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with the standard normal CDF in erf form."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * np.square(x.data))
    return _out(
        "gelu",
        x.data * cdf,
        (x,),
        lambda g: (g * (cdf + x.data * pdf),),
    )


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _out("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def pow_const(x: Tensor, p: float) -> Tensor:
    """x**p for a python-float exponent; x must be positive unless p is 0."""
    p = float(p)
    if p == 0.0:
        return _out("pow_const", np.ones_like(x.data), (x,), lambda g: (np.zeros_like(g),))
    if np.any(x.data <= 0):
        raise NonFiniteError("pow_const requires positive base")
    y = np.power(x.data, p)
    return _out("pow_const", y, (x,), lambda g: (g * p * np.power(x.data, p - 1.0),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through inside the interval."""
    mask = (x.data >= lo) & (x.data <= hi)
    return _out(
        "clamp",
        np.clip(x.data, lo, hi),
        (x,),
        lambda g: (g * mask,),
    )


def safe_reciprocal(x: Tensor, threshold: float = 1e-12) -> Tensor:
    """1/x where x >= threshold, 0 elsewhere (zero gradient there too)."""
    active = x.data >= threshold
    out = np.where(active, 1.0 / np.where(active, x.data, 1.0), 0.0)
    return _out(
        "safe_reciprocal",
        out.astype(x.dtype, copy=False),
        (x,),
        lambda g: ((-g * np.square(out)) * active,),
    )


def rsqrt_safe(x: Tensor, threshold: float = 1e-12) -> Tensor:
    """1/sqrt(x) where x >= threshold, 0 elsewhere."""
    active = x.data >= threshold
    safe = np.where(active, x.data, 1.0)
    out = np.where(active, 1.0 / np.sqrt(safe), 0.0)
    return _out(
        "rsqrt_safe",
        out.astype(x.dtype, copy=False),
        (x,),
        lambda g: ((-0.5 * g * out / safe) * active,),
    )


# --------------------------------------------------------------------------
# Structure ops


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] on shape {a.shape}")

    def rule(g: np.ndarray):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[:, start:stop] = g
        return (full,)

    return _out("slice_cols", a.data[:, start:stop].copy(), (a,), rule)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols of nothing")
    rows = parts[0].shape[0]
    if any(p.data.ndim != 2 or p.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: operands must be 2-D with equal row counts")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def rule(g: np.ndarray):
        return tuple(g[:, offsets[i]:offsets[i + 1]].copy() for i in range(len(parts)))

    return _out(
        "concat_cols",
        np.concatenate([p.data for p in parts], axis=1),
        tuple(parts),
        rule,
    )


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows (or elements of a 1-D tensor); repeats scatter-add back."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take_rows expects a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("take_rows index out of range")

    def rule(g: np.ndarray):
        full = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _out("take_rows", a.data[idx].copy(), (a,), rule)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a seeded Bernoulli mask (training path only)."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return affine(x, 1.0)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return _out("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# --------------------------------------------------------------------------
# Cosine geometry

ZERO_NORM_EPS = 1e-12


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Plain cosine similarity of two vectors; zero vectors map to 0."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cosine; the nearest-neighbor metric used across the pipeline."""
    return 1.0 - cosine(a, b)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two (n, c) tensors -> (n,).

    Rows where either side has norm < 1e-12 yield exactly 0 with zero
    gradient, matching the zero-vector convention.
    """
    _same_shape("cosine_rows", a, b)
    if a.data.ndim != 2:
        raise ShapeError("cosine_rows expects 2-D operands")
    out_dtype = np.result_type(a.dtype, b.dtype)
    na = np.linalg.norm(a.data.astype(out_dtype, copy=False), axis=1)
    nb = np.linalg.norm(b.data.astype(out_dtype, copy=False), axis=1)
    ok = (na >= ZERO_NORM_EPS) & (nb >= ZERO_NORM_EPS)
    na_safe = np.where(ok, na, 1.0)
    nb_safe = np.where(ok, nb, 1.0)
    dots = np.einsum("ij,ij->i", a.data, b.data, dtype=out_dtype)
    cos = np.where(ok, dots / (na_safe * nb_safe), 0.0).astype(out_dtype, copy=False)

    def rule(g: np.ndarray):
        gcol = (g * ok)[:, None]
        ga = gcol * (b.data / (na_safe * nb_safe)[:, None] - a.data * (cos / np.square(na_safe))[:, None])
        gb = gcol * (a.data / (na_safe * nb_safe)[:, None] - b.data * (cos / np.square(nb_safe))[:, None])
        return (ga.astype(a.dtype, copy=False), gb.astype(b.dtype, copy=False))

    return _out("cosine_rows", cos, (a, b), rule)
