"""Brute-force reference implementations used only for verification.

Everything here is double precision and scalar loops over a plain row-major
DenseMatrix. Nothing is shared with the fast path on purpose: agreement
between the two routes is the point.
"""

from __future__ import annotations

import math

from .errors import ShapeError


class DenseMatrix:
    """Row-major matrix of Python floats."""

    def __init__(self, rows: int, cols: int, values=None):
        if values is None:
            values = [0.0] * (rows * cols)
        values = [float(v) for v in values]
        if rows * cols != len(values):
            raise ShapeError(
                f"DenseMatrix: {rows}x{cols} needs {rows * cols} values, got {len(values)}"
            )
        self.rows = rows
        self.cols = cols
        self.values = values

    @classmethod
    def from_rows(cls, rows) -> "DenseMatrix":
        rows = [list(r) for r in rows]
        n = len(rows)
        m = len(rows[0]) if n else 0
        flat = []
        for r in rows:
            if len(r) != m:
                raise ShapeError("from_rows: ragged input")
            flat.extend(r)
        return cls(n, m, flat)

    def get(self, i: int, j: int) -> float:
        return self.values[i * self.cols + j]

    def set(self, i: int, j: int, v: float) -> None:
        self.values[i * self.cols + j] = float(v)

    def to_rows(self):
        return [
            self.values[i * self.cols:(i + 1) * self.cols] for i in range(self.rows)
        ]

    def matmul(self, other: "DenseMatrix") -> "DenseMatrix":
        if self.cols != other.rows:
            raise ShapeError(
                f"matmul: {self.rows}x{self.cols} @ {other.rows}x{other.cols}"
            )
        out = DenseMatrix(self.rows, other.cols)
        for i in range(self.rows):
            for j in range(other.cols):
                acc = 0.0
                for k in range(self.cols):
                    acc += self.get(i, k) * other.get(k, j)
                out.set(i, j, acc)
        return out


def dense_power_propagate(a: DenseMatrix, h: DenseMatrix, k: int) -> DenseMatrix:
    """k repeated dense products a @ (a @ ... @ h)."""
    if a.rows != a.cols or a.cols != h.rows:
        raise ShapeError(f"propagate: {a.rows}x{a.cols} vs {h.rows}x{h.cols}")
    out = DenseMatrix(h.rows, h.cols, list(h.values))
    for _ in range(k):
        out = a.matmul(out)
    return out


def naive_attention(q: DenseMatrix, k: DenseMatrix, v: DenseMatrix) -> DenseMatrix:
    """Scaled dot-product attention as an explicit double loop over node pairs."""
    if q.rows != k.rows or q.rows != v.rows or q.cols != k.cols:
        raise ShapeError(
            f"naive_attention: q {q.rows}x{q.cols}, k {k.rows}x{k.cols}, "
            f"v {v.rows}x{v.cols}"
        )
    n = q.rows
    inv_scale = 1.0 / math.sqrt(q.cols)
    out = DenseMatrix(n, v.cols)
    for i in range(n):
        logits = []
        for j in range(n):
            s = 0.0
            for t in range(q.cols):
                s += q.get(i, t) * k.get(j, t)
            logits.append(s * inv_scale)
        m = max(logits)
        weights = [math.exp(s - m) for s in logits]
        total = 0.0
        for w in weights:
            total += w
        for c in range(v.cols):
            acc = 0.0
            for j in range(n):
                acc += (weights[j] / total) * v.get(j, c)
            out.set(i, c, acc)
    return out


def numerical_gradient(f, params, step: float = 1e-5):
    """Central-difference gradient of a scalar function, per parameter scalar.

    ``params`` is an iterable of (name, tensor) pairs; each tensor's buffer is
    perturbed in place one scalar at a time and restored afterwards. ``f``
    must be deterministic (disable dropout).
    """
    grads = {}
    for name, tensor in params:
        flat = tensor.data.reshape(-1)
        grad = [0.0] * flat.size
        for i in range(flat.size):
            orig = float(flat[i])
            flat[i] = orig + step
            f_plus = float(f())
            flat[i] = orig - step
            f_minus = float(f())
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise FloatingPointError(
                    f"numerical_gradient: non-finite f at {name}[{i}]"
                )
            grad[i] = (f_plus - f_minus) / (2.0 * step)
        rows = tensor.shape[0] if tensor.ndim == 2 else 1
        cols = tensor.shape[1] if tensor.ndim == 2 else tensor.size
        grads[name] = DenseMatrix(rows, cols, grad)
    return grads
