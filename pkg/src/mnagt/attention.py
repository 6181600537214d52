"""Multi-neighborhood attention: hop-indexed attention kernels, per-kernel
multi-head attention, and the adaptive per-node aggregation over kernels.

An attention kernel is the triplet of matrices fed to scaled dot-product
attention. Kernel k scores queries/keys on the k-step smoothed features while
the values stay unsmoothed, so each kernel sees one neighborhood radius; the
adaptive aggregator then weights the kernels per node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, ShapeError
from .graph import SparseMatrix, propagate
from .tensor import (
    Tensor,
    _emit,
    _softmax_rows_np,
    _wants_grad,
    add,
    concat_cols,
    matmul,
    mul,
    relu,
    scale,
    slice_cols,
    softmax_rows,
    tanh,
    transpose,
)


class Aggregator(Enum):
    ADAPTIVE = "adaptive"
    SUM = "sum"
    AVERAGE = "average"
    CONCATENATE = "concat"


_SCORE_ACTIVATIONS = {
    "tanh": tanh,
    "relu": relu,
    "identity": lambda t: t,
}


@dataclass(frozen=True)
class KernelSpec:
    """One attention kernel: hop for the query/key source, hop for the values.

    value_hop=0 is the standard kernel family (values stay raw); the
    GraphTrans-style reduction smooths the values as well.
    """

    hop: int
    value_hop: int = 0

    def __post_init__(self):
        if self.hop < 0 or self.value_hop < 0:
            raise ConfigError(f"kernel hops must be >= 0, got {self}")


@dataclass
class KernelParams:
    """Per-head projections plus the shared output projection of one kernel."""

    wq: list  # m tensors, each d x d_h
    wk: list
    wv: list
    wo: Tensor  # (m * d_h) x d

    def __post_init__(self):
        m = len(self.wq)
        if not (len(self.wk) == len(self.wv) == m) or m < 1:
            raise ConfigError("kernel needs the same number of Q/K/V heads")
        d_h = self.wq[0].shape[1]
        if self.wo.shape[0] != m * d_h:
            raise ShapeError(
                f"W_O rows {self.wo.shape[0]} != heads x head width {m}x{d_h}"
            )

    def named(self, prefix: str):
        for j, (q, k, v) in enumerate(zip(self.wq, self.wk, self.wv)):
            yield f"{prefix}.wq.{j}", q
            yield f"{prefix}.wk.{j}", k
            yield f"{prefix}.wv.{j}", v
        yield f"{prefix}.wo", self.wo


@dataclass
class AdaptiveParams:
    """Scoring parameters of the per-node kernel aggregation."""

    w: Tensor  # d x d projection
    score: Tensor  # 1 x d scoring vector

    def named(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.score", self.score


@dataclass(frozen=True)
class MNAConfig:
    """Shape and behavior of one multi-neighborhood attention block."""

    max_hop: int = 3  # c: kernels use hops 0..c unless `kernels` overrides
    heads: int = 3  # m per kernel
    dim: int = 128  # model width d
    head_dim: int | None = None  # d_h; default keeps m*(c+1) subspaces ~ d
    aggregator: Aggregator = Aggregator.ADAPTIVE
    dropout: float = 0.2
    score_activation: str = "tanh"
    kernels: tuple = field(default=None)

    def __post_init__(self):
        if self.max_hop < 0:
            raise ConfigError(f"max hop count must be >= 0, got {self.max_hop}")
        if self.heads < 1:
            raise ConfigError(f"heads per kernel must be >= 1, got {self.heads}")
        if self.score_activation not in _SCORE_ACTIVATIONS:
            raise ConfigError(
                f"unknown score activation {self.score_activation!r}; "
                f"choose from {sorted(_SCORE_ACTIVATIONS)}"
            )
        if self.kernels is not None:
            specs = tuple(
                k if isinstance(k, KernelSpec) else KernelSpec(int(k))
                for k in self.kernels
            )
            if any(s.hop > self.max_hop for s in specs):
                raise ConfigError(
                    f"kernel hops {specs} exceed max hop {self.max_hop}"
                )
            object.__setattr__(self, "kernels", specs)

    @property
    def kernel_specs(self) -> tuple:
        if self.kernels is not None:
            return self.kernels
        return tuple(KernelSpec(k) for k in range(self.max_hop + 1))

    @property
    def n_kernels(self) -> int:
        return len(self.kernel_specs)

    def resolved_head_dim(self) -> int:
        if self.head_dim is not None:
            return self.head_dim
        return max(1, self.dim // (self.heads * (self.max_hop + 1)))


# ---------------------------------------------------------------------------
# scaled dot-product attention over batch blocks (one fused tape op)
# ---------------------------------------------------------------------------

def _attention_backward_rule(g_b, q_b, k_b, v_b, p, mask, inv_scale):
    """Gradients of out = (p * mask) @ v with p = softmax(q k^T * inv_scale).

    Shape-agnostic over a leading stack axis: works on one 2-D block or a
    3-D stack of same-size blocks.
    """
    p_used = p if mask is None else p * mask
    dv = np.swapaxes(p_used, -1, -2) @ g_b
    dp = g_b @ np.swapaxes(v_b, -1, -2)
    if mask is not None:
        dp = dp * mask
    ds = (dp - (dp * p).sum(axis=-1, keepdims=True)) * p
    dq = (ds @ k_b) * inv_scale
    dk = (np.swapaxes(ds, -1, -2) @ q_b) * inv_scale
    return dq, dk, dv


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    blocks=None,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """softmax(q k^T / sqrt(d_h)) v, restricted to each batch block.

    Cross-block entries never enter the softmax support. Runs as a single
    fused op; same-size blocks are stacked and processed together, so the
    n x n score matrices only ever exist per block.
    """
    n, d_h = q.shape
    if k.shape != (n, d_h) or v.shape[0] != n:
        raise ShapeError(
            f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    if blocks is None:
        blocks = [(0, n)]
    if blocks[0][0] != 0 or blocks[-1][1] != n or any(
        blocks[i][1] != blocks[i + 1][0] for i in range(len(blocks) - 1)
    ):
        raise ShapeError(f"blocks {blocks} do not partition [0, {n})")
    use_dropout = training and dropout_p > 0.0
    inv_scale = 1.0 / math.sqrt(d_h)
    d_v = v.shape[1]

    out_data = np.empty((n, d_v), dtype=v.dtype)
    saved = []
    if len(blocks) == 1:
        s, e = blocks[0]
        p = _softmax_rows_np((q.data @ k.data.T) * inv_scale)
        mask = None
        if use_dropout:
            keep = (rng.random(p.shape) >= dropout_p).astype(p.dtype)
            mask = keep / (1.0 - dropout_p)
        out_data[:] = (p if mask is None else p * mask) @ v.data
        saved.append((slice(None), None, p, mask, q.data, k.data, v.data))
    else:
        # gather equal-size blocks into one stacked computation each
        by_size: dict[int, list[int]] = {}
        for s, e in blocks:
            by_size.setdefault(e - s, []).append(s)
        for size, starts in by_size.items():
            rows = (
                np.asarray(starts)[:, None] + np.arange(size)[None, :]
            ).reshape(-1)
            shape = (len(starts), size)
            qg = q.data[rows].reshape(*shape, d_h)
            kg = k.data[rows].reshape(*shape, d_h)
            vg = v.data[rows].reshape(*shape, d_v)
            p = _softmax_rows_np((qg @ np.swapaxes(kg, -1, -2)) * inv_scale)
            mask = None
            if use_dropout:
                keep = (rng.random(p.shape) >= dropout_p).astype(p.dtype)
                mask = keep / (1.0 - dropout_p)
            out_data[rows] = ((p if mask is None else p * mask) @ vg).reshape(-1, d_v)
            saved.append((rows, shape, p, mask, qg, kg, vg))

    if not _wants_grad(q, k, v):
        return Tensor(out_data)

    def backward(g, acc):
        dq = np.zeros_like(q.data) if q.grad_enabled else None
        dk = np.zeros_like(k.data) if k.grad_enabled else None
        dv = np.zeros_like(v.data) if v.grad_enabled else None
        for rows, shape, p, mask, qg, kg, vg in saved:
            gg = g[rows] if shape is None else g[rows].reshape(*shape, d_v)
            bq, bk, bv = _attention_backward_rule(gg, qg, kg, vg, p, mask, inv_scale)
            if dq is not None:
                dq[rows] = bq.reshape(-1, d_h) if shape else bq
            if dk is not None:
                dk[rows] = bk.reshape(-1, d_h) if shape else bk
            if dv is not None:
                dv[rows] = bv.reshape(-1, d_v) if shape else bv
        if dq is not None:
            acc(q, dq)
        if dk is not None:
            acc(k, dk)
        if dv is not None:
            acc(v, dv)

    return _emit(out_data, (q, k, v), backward)


def attention_weights(q: Tensor, k: Tensor, blocks=None) -> list:
    """Per-block softmax attention matrices (inspection/testing only)."""
    n, d_h = q.shape
    if blocks is None:
        blocks = [(0, n)]
    inv_scale = 1.0 / math.sqrt(d_h)
    return [
        _softmax_rows_np((q.data[s:e] @ k.data[s:e].T) * inv_scale)
        for s, e in blocks
    ]


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def hop_features(h: Tensor, a_hat: SparseMatrix, hops) -> dict:
    """Smoothed feature matrices for every requested hop.

    Built incrementally, one sparse product per step from the previous power.
    """
    hops = sorted(set(int(k) for k in hops) | {0})
    out = {0: h}
    current = h
    for step in range(1, hops[-1] + 1):
        current = propagate(current, a_hat, 1)
        if step in hops:
            out[step] = current
    return {k: out[k] for k in hops}


def kernel_mha(
    h: Tensor,
    a_hat: SparseMatrix,
    spec: KernelSpec,
    params: KernelParams,
    blocks=None,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    propagated: dict | None = None,
) -> Tensor:
    """Multi-head attention of one kernel: queries/keys from the hop-smoothed
    features, values from the value source (raw features by default), heads
    concatenated and projected by W_O."""
    if propagated is None:
        propagated = hop_features(h, a_hat, {spec.hop, spec.value_hop})
    h_qk = propagated[spec.hop]
    h_v = propagated[spec.value_hop]
    heads = []
    for wq, wk, wv in zip(params.wq, params.wk, params.wv):
        q = matmul(h_qk, wq)
        k = matmul(h_qk, wk)
        v = matmul(h_v, wv)
        heads.append(
            scaled_dot_attention(
                q, k, v, blocks, dropout_p=dropout_p, training=training, rng=rng
            )
        )
    stacked = heads[0] if len(heads) == 1 else concat_cols(heads)
    return matmul(stacked, params.wo)


def make_kernel_outputs(
    h: Tensor,
    a_hat: SparseMatrix,
    config: MNAConfig,
    kernel_params,
    blocks=None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> list:
    """Run every configured kernel; returns [Z^0, ..., Z^c] in kernel order."""
    specs = config.kernel_specs
    kernel_params = list(kernel_params)
    if len(kernel_params) != len(specs):
        raise ConfigError(
            f"{len(kernel_params)} kernel parameter sets for {len(specs)} kernels"
        )
    needed = {s.hop for s in specs} | {s.value_hop for s in specs}
    propagated = hop_features(h, a_hat, needed)
    return [
        kernel_mha(
            h,
            a_hat,
            spec,
            params,
            blocks,
            dropout_p=config.dropout,
            training=training,
            rng=rng,
            propagated=propagated,
        )
        for spec, params in zip(specs, kernel_params)
    ]


# ---------------------------------------------------------------------------
# aggregation over kernels
# ---------------------------------------------------------------------------

def adaptive_aggregate(z_list, params: AdaptiveParams, score_activation: str = "tanh"):
    """Per-node softmax mixture of the kernel outputs.

    Returns (Z, alpha) with alpha rows on the simplex; each node's output is a
    convex combination of its kernel outputs.
    """
    shapes = {z.shape for z in z_list}
    if len(shapes) != 1:
        raise ShapeError(f"kernel outputs disagree in shape: {sorted(shapes)}")
    act = _SCORE_ACTIVATIONS[score_activation]
    score_col = transpose(params.score)
    scores = [matmul(act(matmul(z, params.w)), score_col) for z in z_list]
    alpha = softmax_rows(scores[0] if len(scores) == 1 else concat_cols(scores))
    out = None
    for idx, z in enumerate(z_list):
        weighted = mul(z, slice_cols(alpha, idx, idx + 1))
        out = weighted if out is None else add(out, weighted)
    return out, alpha


def aggregate_variant(z_list, variant: Aggregator, projection: Tensor | None = None):
    """Non-adaptive aggregators: sum, mean, or concat + learned projection."""
    if variant is Aggregator.SUM:
        out = z_list[0]
        for z in z_list[1:]:
            out = add(out, z)
        return out
    if variant is Aggregator.AVERAGE:
        out = z_list[0]
        for z in z_list[1:]:
            out = add(out, z)
        return scale(out, 1.0 / len(z_list))
    if variant is Aggregator.CONCATENATE:
        if projection is None:
            raise ConfigError("concatenate aggregation needs its projection matrix")
        stacked = z_list[0] if len(z_list) == 1 else concat_cols(z_list)
        return matmul(stacked, projection)
    raise ConfigError(f"unknown aggregator: {variant!r}")


@dataclass
class MNAParams:
    """All learnable parameters of one multi-neighborhood attention block."""

    kernels: list  # KernelParams per kernel
    adaptive: AdaptiveParams | None = None
    concat_projection: Tensor | None = None

    def named(self, prefix: str):
        for i, kp in enumerate(self.kernels):
            yield from kp.named(f"{prefix}.kernels.{i}")
        if self.adaptive is not None:
            yield from self.adaptive.named(f"{prefix}.adaptive")
        if self.concat_projection is not None:
            yield f"{prefix}.concat_projection", self.concat_projection


def mna_forward(
    h: Tensor,
    a_hat: SparseMatrix,
    config: MNAConfig,
    params: MNAParams,
    blocks=None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    return_alpha: bool = False,
):
    """Full attention block: kernels, aggregation, output dropout."""
    from .tensor import dropout  # local import keeps the op table in one place

    z_list = make_kernel_outputs(
        h, a_hat, config, params.kernels, blocks, training=training, rng=rng
    )
    alpha = None
    if config.aggregator is Aggregator.ADAPTIVE:
        out, alpha = adaptive_aggregate(
            z_list, params.adaptive, config.score_activation
        )
    else:
        out = aggregate_variant(z_list, config.aggregator, params.concat_projection)
    out = dropout(out, config.dropout, training, rng)
    if return_alpha:
        return out, alpha
    return out


# ---------------------------------------------------------------------------
# reductions to earlier graph transformers
# ---------------------------------------------------------------------------

def special_case_kernel(kind: str, hop: int, n_layers: int) -> list:
    """Per-layer kernel configurations reproducing earlier architectures.

    "graphtrans": one fully smoothed kernel in the first layer, plain
    attention after; "sat": one kernel with smoothed queries/keys and raw
    values in every layer. hop=0 is the vanilla transformer in both.
    """
    if hop < 0:
        raise ConfigError(f"hop must be >= 0, got {hop}")
    if n_layers < 1:
        raise ConfigError(f"need at least one layer, got {n_layers}")
    if kind == "graphtrans":
        first = (KernelSpec(hop, value_hop=hop),)
        rest = (KernelSpec(0),)
        return [first] + [rest] * (n_layers - 1)
    if kind == "sat":
        return [(KernelSpec(hop),)] * n_layers
    raise ConfigError(f"unknown special case {kind!r}; use 'graphtrans' or 'sat'")
