"""Dense rank<=2 tensors with tape-based reverse-mode automatic differentiation.

Every learned computation in the model is expressed through the ops in this
module. Ops executed while a Tape is active get recorded; Tape.backward walks
the record once in reverse, accumulating gradients additively into every
grad-enabled leaf. Without an active tape the ops are plain numpy forwards.

Backward rules live in module-level ``_*_backward`` helpers so the
verification suite can exercise (and deliberately corrupt) them one op at a
time.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DataError, ShapeError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


class Tensor:
    """A numpy buffer plus autodiff participation flag.

    ``grad`` is populated on grad-enabled leaves by Tape.backward and is
    always the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "grad_enabled")

    def __init__(self, data, grad_enabled: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are rank <= 2, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.grad_enabled = bool(grad_enabled)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), grad_enabled=self.grad_enabled)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad_enabled={self.grad_enabled})"


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed ops for one forward/backward pass.

    Single-threaded by design: one pass owns one tape. backward() may be
    called once; a second call raises, gradient accumulation across passes
    is deliberately unsupported.
    """

    def __init__(self):
        self._entries = []  # (out, inputs, backward_fn) in execution order
        self._output_ids = set()
        self._consumed = False

    @staticmethod
    def active():
        return _TAPE_STACK[-1] if _TAPE_STACK else None

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, out: Tensor, inputs, backward_fn) -> None:
        self._entries.append((out, inputs, backward_fn))
        self._output_ids.add(id(out))

    def backward(self, loss: Tensor):
        """Reverse-traverse the tape from ``loss``; returns {leaf: grad array}.

        Sets ``.grad`` on every grad-enabled leaf seen by this tape (zeros for
        leaves not on the loss path).
        """
        if self._consumed:
            raise RuntimeError(
                "backward() already called on this tape; build a fresh tape per pass"
            )
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        by_id: dict[int, Tensor] = {id(loss): loss}

        def accumulate(t: Tensor, g: np.ndarray) -> None:
            if not t.grad_enabled:
                return
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                by_id[key] = t

        for out, inputs, backward_fn in reversed(self._entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue  # not on the path to the loss
            backward_fn(g, accumulate)

        leaf_grads: dict[Tensor, np.ndarray] = {}
        for key, t in by_id.items():
            if key in self._output_ids or not t.grad_enabled:
                continue
            t.grad = grads.get(key)
            if t.grad is not None:
                leaf_grads[t] = t.grad
        # leaves recorded as inputs but never reached get an explicit zero
        for _, inputs, _ in self._entries:
            for t in inputs:
                if t.grad_enabled and id(t) not in self._output_ids and t.grad is None:
                    t.grad = np.zeros_like(t.data)
                    leaf_grads[t] = t.grad
        return leaf_grads


def _wants_grad(*tensors) -> bool:
    return Tape.active() is not None and any(t.grad_enabled for t in tensors)


def _emit(out_data, inputs, backward_fn) -> Tensor:
    out = Tensor(out_data, grad_enabled=True)
    Tape.active().record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# backward rules (module-level so the verify suite can patch them singly)
# ---------------------------------------------------------------------------

def _matmul_backward_a(g, b_data):
    return g @ b_data.T


def _matmul_backward_b(g, a_data):
    return a_data.T @ g


def _add_backward_bias(g, b_shape):
    # second operand was broadcast over rows
    if len(b_shape) == 1:
        return g.sum(axis=0)
    return g.sum(axis=0, keepdims=True)


def _mul_backward(g, other_data, own_shape):
    full = g * other_data
    if full.shape == tuple(own_shape):
        return full
    if own_shape[0] == 1:
        return full.sum(axis=0, keepdims=True)
    return full.sum(axis=1, keepdims=True)


def _softmax_backward(g, s):
    return (g - (g * s).sum(axis=1, keepdims=True)) * s


def _layer_norm_backward_x(g, gamma_data, xhat, inv_std):
    d = xhat.shape[1]
    dxhat = g * gamma_data.reshape(1, -1)
    return (inv_std / d) * (
        d * dxhat
        - dxhat.sum(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    )


def _gelu_backward(g, x, t, exact):
    if exact:
        cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return g * (cdf + x * pdf)
    # t = tanh(u) saved from the forward pass
    du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _relu_backward(g, x):
    return g * (x > 0)


def _tanh_backward(g, y):
    return g * (1.0 - y * y)


def _dropout_backward(g, mask_scaled):
    return g * mask_scaled


def _cross_entropy_backward(g, probs, labels):
    d = probs.copy()
    d[np.arange(len(labels)), labels] -= 1.0
    return (float(g) / len(labels)) * d


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out_data = a.data @ b.data
    if not _wants_grad(a, b):
        return Tensor(out_data)

    def backward(g, acc):
        if a.grad_enabled:
            acc(a, _matmul_backward_a(g, b.data))
        if b.grad_enabled:
            acc(b, _matmul_backward_b(g, a.data))

    return _emit(out_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; the second operand may be a (d,) or (1,d) row bias."""
    if a.shape != b.shape:
        bias_ok = a.ndim == 2 and (
            b.shape == (a.shape[1],) or b.shape == (1, a.shape[1])
        )
        if not bias_ok:
            raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}")
    out_data = a.data + b.data
    if not _wants_grad(a, b):
        return Tensor(out_data)

    def backward(g, acc):
        if a.grad_enabled:
            acc(a, g)
        if b.grad_enabled:
            acc(b, g if b.shape == a.shape else _add_backward_bias(g, b.shape))

    return _emit(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a (n,1) column or (1,d) row factor."""
    if a.shape != b.shape:
        ok = a.ndim == 2 and b.ndim == 2 and (
            b.shape == (a.shape[0], 1) or b.shape == (1, a.shape[1])
        )
        if not ok:
            raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}")
    out_data = a.data * b.data
    if not _wants_grad(a, b):
        return Tensor(out_data)

    def backward(g, acc):
        if a.grad_enabled:
            acc(a, _mul_backward(g, b.data, a.shape))
        if b.grad_enabled:
            acc(b, _mul_backward(g, a.data, b.shape))

    return _emit(out_data, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = x.data * s
    if not _wants_grad(x):
        return Tensor(out_data)
    return _emit(out_data, (x,), lambda g, acc: acc(x, g * s))


def transpose(x: Tensor) -> Tensor:
    out_data = x.data.T.copy()
    if not _wants_grad(x):
        return Tensor(out_data)
    return _emit(out_data, (x,), lambda g, acc: acc(x, g.T))


def concat_cols(parts) -> Tensor:
    """Horizontal concatenation, preserving column order."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_cols: empty input")
    rows = parts[0].shape[0]
    if any(p.ndim != 2 or p.shape[0] != rows for p in parts):
        raise ShapeError(
            f"concat_cols: row counts differ: {[p.shape for p in parts]}"
        )
    out_data = np.concatenate([p.data for p in parts], axis=1)
    if not _wants_grad(*parts):
        return Tensor(out_data)
    widths = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g, acc):
        for i, p in enumerate(parts):
            if p.grad_enabled:
                acc(p, g[:, widths[i]:widths[i + 1]])

    return _emit(out_data, tuple(parts), backward)


def concat_rows(parts) -> Tensor:
    """Vertical concatenation."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows: empty input")
    cols = parts[0].shape[1]
    if any(p.ndim != 2 or p.shape[1] != cols for p in parts):
        raise ShapeError(
            f"concat_rows: column counts differ: {[p.shape for p in parts]}"
        )
    out_data = np.concatenate([p.data for p in parts], axis=0)
    if not _wants_grad(*parts):
        return Tensor(out_data)
    heights = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g, acc):
        for i, p in enumerate(parts):
            if p.grad_enabled:
                acc(p, g[heights[i]:heights[i + 1], :])

    return _emit(out_data, tuple(parts), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] invalid for shape {x.shape}")
    out_data = x.data[start:stop].copy()
    if not _wants_grad(x):
        return Tensor(out_data)

    def backward(g, acc):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        acc(x, full)

    return _emit(out_data, (x,), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not (0 <= start <= stop <= x.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] invalid for shape {x.shape}")
    out_data = x.data[:, start:stop].copy()
    if not _wants_grad(x):
        return Tensor(out_data)

    def backward(g, acc):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        acc(x, full)

    return _emit(out_data, (x,), backward)


def _softmax_rows_np(z: np.ndarray) -> np.ndarray:
    # max subtraction keeps exp() in range for any finite input
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax; each output row is a probability vector."""
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax_rows: needs n x m with m >= 1, got {x.shape}")
    if not np.isfinite(x.data).all():
        raise FloatingPointError("softmax_rows: non-finite input")
    s = _softmax_rows_np(x.data)
    if not _wants_grad(x):
        return Tensor(s)
    return _emit(s, (x,), lambda g, acc: acc(x, _softmax_backward(g, s)))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to mean 0 / variance 1, then apply the affine map."""
    d = x.shape[1]
    if gamma.data.reshape(-1).shape != (d,) or beta.data.reshape(-1).shape != (d,):
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = xhat * gamma.data.reshape(1, -1) + beta.data.reshape(1, -1)
    if not _wants_grad(x, gamma, beta):
        return Tensor(out_data)

    def backward(g, acc):
        if x.grad_enabled:
            acc(x, _layer_norm_backward_x(g, gamma.data, xhat, inv_std))
        if gamma.grad_enabled:
            acc(gamma, (g * xhat).sum(axis=0).reshape(gamma.shape))
        if beta.grad_enabled:
            acc(beta, g.sum(axis=0).reshape(beta.shape))

    return _emit(out_data, (x, gamma, beta), backward)


def gelu(x: Tensor, exact: bool = False) -> Tensor:
    """GeLU activation; tanh approximation by default, exact erf behind the flag."""
    t = None
    if exact:
        out_data = 0.5 * x.data * (1.0 + erf(x.data / math.sqrt(2.0)))
    else:
        xd = x.data
        t = np.tanh(_SQRT_2_OVER_PI * (xd + _GELU_CUBIC * (xd * xd * xd)))
        out_data = 0.5 * xd * (1.0 + t)
    if not _wants_grad(x):
        return Tensor(out_data)
    return _emit(
        out_data, (x,), lambda g, acc: acc(x, _gelu_backward(g, x.data, t, exact))
    )


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)
    if not _wants_grad(x):
        return Tensor(out_data)
    return _emit(out_data, (x,), lambda g, acc: acc(x, _relu_backward(g, x.data)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    if not _wants_grad(x):
        return Tensor(y)
    return _emit(y, (x,), lambda g, acc: acc(x, _tanh_backward(g, y)))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Identity in eval mode and at p=0, so inference never depends on the rng.
    """
    if not (0.0 <= p < 1.0):
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype)
    mask_scaled = keep / (1.0 - p)
    out_data = x.data * mask_scaled
    if not _wants_grad(x):
        return Tensor(out_data)
    return _emit(out_data, (x,), lambda g, acc: acc(x, _dropout_backward(g, mask_scaled)))


def mean_rows(x: Tensor) -> Tensor:
    """Mean over rows, keeping a single output row."""
    out_data = x.data.mean(axis=0, keepdims=True)
    if not _wants_grad(x):
        return Tensor(out_data)
    n = x.shape[0]
    return _emit(out_data, (x,), lambda g, acc: acc(x, np.repeat(g / n, n, axis=0)))


def sum_rows(x: Tensor) -> Tensor:
    """Sum over rows, keeping a single output row."""
    out_data = x.data.sum(axis=0, keepdims=True)
    if not _wants_grad(x):
        return Tensor(out_data)
    n = x.shape[0]
    return _emit(out_data, (x,), lambda g, acc: acc(x, np.repeat(g, n, axis=0)))


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)
    if not _wants_grad(x):
        return Tensor(out_data)
    return _emit(out_data, (x,), lambda g, acc: acc(x, np.full_like(x.data, float(g))))


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy_logits: logits {logits.shape} vs labels {labels.shape}"
        )
    n_classes = logits.shape[1]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise DataError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(np.mean(lse - shifted[np.arange(len(labels)), labels, None]))
    out_data = np.asarray(loss, dtype=z.dtype)
    if not _wants_grad(logits):
        return Tensor(out_data)
    probs = np.exp(shifted - lse)

    def backward(g, acc):
        acc(logits, _cross_entropy_backward(g, probs, labels).astype(z.dtype))

    return _emit(out_data, (logits,), backward)
