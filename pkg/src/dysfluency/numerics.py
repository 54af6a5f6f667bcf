"""Dense matrix primitives with reverse-mode differentiation.

Values are 2-D float64 numpy arrays wrapped in :class:`Matrix`. Every
primitive optionally records onto a :class:`Tape`; replaying the tape in
reverse accumulates vector-Jacobian products into ``Matrix.grad``. The set of
primitives is exactly what the classification head and its losses need; there
is no broadcasting, no views, no higher-order gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Matrix",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "GradCheckError",
    "matmul",
    "transpose",
    "add",
    "sub",
    "hadamard",
    "affine",
    "sigmoid",
    "tanh",
    "log",
    "powf",
    "clamp",
    "softmax_row",
    "mean_over_rows",
    "mean_all",
    "select",
    "scaled_dot_product_attention",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand dimensions do not admit the requested operation."""


class NonFiniteError(ValueError):
    """A matrix would contain NaN or Inf."""


class GradCheckError(ValueError):
    """The function under check produced a non-finite value."""


class Matrix:
    """A 2-D float64 value, optionally carrying an accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"matrix must be 2-D, got ndim={arr.ndim}")
        if arr.size == 0:
            raise ShapeError(f"matrix must be non-empty, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("matrix entries must be finite")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Matrix":
        # Internal fast path for freshly computed op outputs: no copy.
        if not np.isfinite(arr).all():
            raise NonFiniteError("operation produced non-finite values")
        out = cls.__new__(cls)
        out.data = arr
        out.grad = None
        out.requires_grad = requires_grad
        return out

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:  # pragma: no cover
        return f"Matrix(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive applications.

    Creation order is a topological order of the graph, so the reversed
    record visits every node after all of its consumers; gradients therefore
    accumulate additively at fan-out before being propagated further.
    A tape is single-owner: never share one across concurrent executions.
    """

    def __init__(self):
        self._records: list[tuple[Matrix, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, root: Matrix) -> None:
        """Seed d(root)/d(root)=1 and propagate to every recorded input."""
        if root.shape != (1, 1):
            raise ShapeError(f"backward root must be 1x1, got {root.shape}")
        root.grad = np.ones((1, 1))
        for out, backward_fn in reversed(self._records):
            if out.grad is not None:
                backward_fn(out.grad)


def _emit(
    tape: Tape | None,
    data: np.ndarray,
    inputs: Sequence[Matrix],
    backward_fn: Callable[[np.ndarray], None],
) -> Matrix:
    requires_grad = any(m.requires_grad for m in inputs)
    out = Matrix._wrap(data, requires_grad)
    if tape is not None and requires_grad:
        tape._records.append((out, backward_fn))
    return out


def matmul(a: Matrix, b: Matrix, tape: Tape | None = None) -> Matrix:
    """Matrix product a @ b with vjps dA = G B^T, dB = A^T G."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _emit(tape, a.data @ b.data, (a, b), backward_fn)


def transpose(a: Matrix, tape: Tape | None = None) -> Matrix:
    def backward_fn(g: np.ndarray) -> None:
        a._accumulate(g.T)

    return _emit(tape, np.ascontiguousarray(a.data.T), (a,), backward_fn)


def _require_same_shape(op: str, a: Matrix, b: Matrix) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes disagree: {a.shape} vs {b.shape}")


def add(a: Matrix, b: Matrix, tape: Tape | None = None) -> Matrix:
    _require_same_shape("add", a, b)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _emit(tape, a.data + b.data, (a, b), backward_fn)


def sub(a: Matrix, b: Matrix, tape: Tape | None = None) -> Matrix:
    _require_same_shape("sub", a, b)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _emit(tape, a.data - b.data, (a, b), backward_fn)


def hadamard(a: Matrix, b: Matrix, tape: Tape | None = None) -> Matrix:
    """Elementwise product."""
    _require_same_shape("hadamard", a, b)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _emit(tape, a.data * b.data, (a, b), backward_fn)


def affine(a: Matrix, mult: float, shift: float = 0.0, tape: Tape | None = None) -> Matrix:
    """Elementwise mult*a + shift."""

    def backward_fn(g: np.ndarray) -> None:
        a._accumulate(g * mult)

    return _emit(tape, a.data * mult + shift, (a,), backward_fn)


def sigmoid(a: Matrix, tape: Tape | None = None) -> Matrix:
    """Elementwise 1/(1+e^-x), computed piecewise so large |x| cannot overflow."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward_fn(g: np.ndarray) -> None:
        a._accumulate(g * out * (1.0 - out))

    return _emit(tape, out, (a,), backward_fn)


def tanh(a: Matrix, tape: Tape | None = None) -> Matrix:
    out = np.tanh(a.data)

    def backward_fn(g: np.ndarray) -> None:
        a._accumulate(g * (1.0 - out * out))

    return _emit(tape, out, (a,), backward_fn)


def log(a: Matrix, tape: Tape | None = None) -> Matrix:
    if (a.data <= 0).any():
        raise ValueError(f"log: non-positive entry (min={a.data.min()})")

    def backward_fn(g: np.ndarray) -> None:
        a._accumulate(g / a.data)

    return _emit(tape, np.log(a.data), (a,), backward_fn)


def powf(a: Matrix, exponent: float, tape: Tape | None = None) -> Matrix:
    """Elementwise a**exponent for non-negative bases."""
    if (a.data < 0).any():
        raise ValueError(f"powf: negative base (min={a.data.min()})")

    def backward_fn(g: np.ndarray) -> None:
        if exponent == 0.0:
            return
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _emit(tape, a.data**exponent, (a,), backward_fn)


def clamp(a: Matrix, lo: float, hi: float, tape: Tape | None = None) -> Matrix:
    """Clip to [lo, hi]; gradient passes through strictly inside the interval."""
    if not lo < hi:
        raise ValueError(f"clamp: empty interval [{lo}, {hi}]")
    inside = (a.data > lo) & (a.data < hi)

    def backward_fn(g: np.ndarray) -> None:
        a._accumulate(g * inside)

    return _emit(tape, np.clip(a.data, lo, hi), (a,), backward_fn)


def softmax_row(v: Matrix, tape: Tape | None = None) -> Matrix:
    """Row softmax of a 1xn matrix, max-subtracted for overflow safety."""
    if v.rows != 1:
        raise ShapeError(f"softmax_row: expected a 1xn row, got {v.shape}")
    shifted = v.data - v.data.max()
    e = np.exp(shifted)
    s = e / e.sum()

    def backward_fn(g: np.ndarray) -> None:
        dot = float((g * s).sum())
        v._accumulate(s * (g - dot))

    return _emit(tape, s, (v,), backward_fn)


def mean_over_rows(m: Matrix, tape: Tape | None = None) -> Matrix:
    """Column-wise arithmetic mean, collapsing t x d to 1 x d."""
    t = m.rows

    def backward_fn(g: np.ndarray) -> None:
        m._accumulate(np.broadcast_to(g / t, m.shape))

    return _emit(tape, m.data.mean(axis=0, keepdims=True), (m,), backward_fn)


def mean_all(a: Matrix, tape: Tape | None = None) -> Matrix:
    """Mean of all entries as a 1x1 matrix."""
    n = a.data.size

    def backward_fn(g: np.ndarray) -> None:
        a._accumulate(np.full(a.shape, g[0, 0] / n))

    return _emit(tape, np.array([[a.data.mean()]]), (a,), backward_fn)


def select(a: Matrix, i: int, j: int, tape: Tape | None = None) -> Matrix:
    """Entry (i, j) as a 1x1 matrix."""
    if not (0 <= i < a.rows and 0 <= j < a.cols):
        raise ShapeError(f"select: index ({i},{j}) out of range for {a.shape}")

    def backward_fn(g: np.ndarray) -> None:
        z = np.zeros(a.shape)
        z[i, j] = g[0, 0]
        a._accumulate(z)

    return _emit(tape, np.array([[a.data[i, j]]]), (a,), backward_fn)


def scaled_dot_product_attention(
    q: Matrix, k: Matrix, v: Matrix, tape: Tape | None = None
) -> tuple[Matrix, Matrix]:
    """Single-query attention: weights = softmax(q k^T / sqrt(d)), context = weights v.

    q is 1xd, k and v are txd with the same t. Returns (context, weights).
    Composed from recorded primitives, so gradients flow through both outputs.
    """
    if q.rows != 1:
        raise ShapeError(f"attention: query must be 1xd, got {q.shape}")
    if q.cols != k.cols:
        raise ShapeError(f"attention: query/key widths disagree: {q.shape} vs {k.shape}")
    if k.rows != v.rows:
        raise ShapeError(f"attention: key/value row counts disagree: {k.shape} vs {v.shape}")
    scores = affine(matmul(q, transpose(k, tape), tape), 1.0 / np.sqrt(q.cols), 0.0, tape)
    weights = softmax_row(scores, tape)
    context = matmul(weights, v, tape)
    return context, weights


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Max relative disagreement between analytic and central-difference gradients.

    ``f`` maps a 1-D parameter vector to ``(value, gradient)``; only the value
    is used for the finite differences, so the comparison is independent of
    the analytic path it checks. The per-coordinate error is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if eps <= 0:
        raise ValueError(f"grad_check: eps must be positive, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"grad_check: x must be a 1-D vector, got shape {x.shape}")
    value, analytic = f(x)
    if not np.isfinite(value):
        raise GradCheckError(f"non-finite value {value} at base point")
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ShapeError(
            f"grad_check: gradient shape {analytic.shape} does not match point {x.shape}"
        )
    max_err = 0.0
    for i in range(x.size):
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        fp = f(xp)[0]
        fm = f(xm)[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradCheckError(f"non-finite value at coordinate {i}: f+={fp}, f-={fm}")
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
        if err > max_err:
            max_err = err
    return max_err
