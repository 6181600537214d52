"""Layer and model assembly: pre-LN residual layers with the smoothed-input
residual term, feed-forward blocks, pooling, classification head, parameter
accounting, and checkpoint I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .attention import (
    Aggregator,
    AdaptiveParams,
    KernelParams,
    MNAConfig,
    MNAParams,
    mna_forward,
)
from .errors import ConfigError, ShapeError
from .graph import GraphBatch, NormalizationKind, propagate
from .tensor import Tensor, add, concat_rows, gelu, layer_norm, matmul, mean_rows, slice_rows, sum_rows

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Everything the forward pass needs, and nothing it has to guess."""

    in_dim: int
    n_classes: int
    dim: int = 128
    n_layers: int = 3
    max_hop: int = 3
    heads: int = 3
    head_dim: int | None = None
    ffn_dim: int | None = None  # default 2 * dim
    aggregator: Aggregator = Aggregator.ADAPTIVE
    pooling: str = "mean"
    dropout: float = 0.2
    normalization: NormalizationKind = NormalizationKind.SYMMETRIC
    score_activation: str = "tanh"
    gelu_exact: bool = False
    ln_eps: float = 1e-5
    dtype: str = "float32"
    layer_kernels: tuple | None = None  # per-layer KernelSpec tuples

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError(f"need at least one layer, got {self.n_layers}")
        if self.pooling not in ("mean", "sum"):
            raise ConfigError(f"pooling must be 'mean' or 'sum', got {self.pooling!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.layer_kernels is not None and len(self.layer_kernels) != self.n_layers:
            raise ConfigError(
                f"{len(self.layer_kernels)} kernel configurations for "
                f"{self.n_layers} layers"
            )

    @property
    def resolved_ffn_dim(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 2 * self.dim

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def mna_config(self, layer: int) -> MNAConfig:
        kernels = None
        if self.layer_kernels is not None:
            kernels = tuple(self.layer_kernels[layer])
        return MNAConfig(
            max_hop=self.max_hop,
            heads=self.heads,
            dim=self.dim,
            head_dim=self.head_dim,
            aggregator=self.aggregator,
            dropout=self.dropout,
            score_activation=self.score_activation,
            kernels=kernels,
        )


@dataclass
class LayerParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    mna: MNAParams
    ln2_gamma: Tensor
    ln2_beta: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    def named(self, prefix: str):
        yield f"{prefix}.ln1_gamma", self.ln1_gamma
        yield f"{prefix}.ln1_beta", self.ln1_beta
        yield from self.mna.named(f"{prefix}.mna")
        yield f"{prefix}.ln2_gamma", self.ln2_gamma
        yield f"{prefix}.ln2_beta", self.ln2_beta
        yield f"{prefix}.ffn_w1", self.ffn_w1
        yield f"{prefix}.ffn_b1", self.ffn_b1
        yield f"{prefix}.ffn_w2", self.ffn_w2
        yield f"{prefix}.ffn_b2", self.ffn_b2


@dataclass
class ModelParams:
    input_proj: Tensor
    layers: list
    head_w1: Tensor
    head_b1: Tensor
    head_w2: Tensor
    head_b2: Tensor

    def named(self):
        yield "input_proj", self.input_proj
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"layers.{i}")
        yield "head_w1", self.head_w1
        yield "head_b1", self.head_b1
        yield "head_w2", self.head_w2
        yield "head_b2", self.head_b2

    def tensors(self):
        return [t for _, t in self.named()]

    def copy(self) -> "ModelParams":
        def cp(t):
            return Tensor(t.data.copy(), grad_enabled=t.grad_enabled)

        return ModelParams(
            input_proj=cp(self.input_proj),
            layers=[
                LayerParams(
                    ln1_gamma=cp(l.ln1_gamma),
                    ln1_beta=cp(l.ln1_beta),
                    mna=MNAParams(
                        kernels=[
                            KernelParams(
                                wq=[cp(t) for t in kp.wq],
                                wk=[cp(t) for t in kp.wk],
                                wv=[cp(t) for t in kp.wv],
                                wo=cp(kp.wo),
                            )
                            for kp in l.mna.kernels
                        ],
                        adaptive=(
                            AdaptiveParams(w=cp(l.mna.adaptive.w), score=cp(l.mna.adaptive.score))
                            if l.mna.adaptive is not None
                            else None
                        ),
                        concat_projection=(
                            cp(l.mna.concat_projection)
                            if l.mna.concat_projection is not None
                            else None
                        ),
                    ),
                    ln2_gamma=cp(l.ln2_gamma),
                    ln2_beta=cp(l.ln2_beta),
                    ffn_w1=cp(l.ffn_w1),
                    ffn_b1=cp(l.ffn_b1),
                    ffn_w2=cp(l.ffn_w2),
                    ffn_b2=cp(l.ffn_b2),
                )
                for l in self.layers
            ],
            head_w1=cp(self.head_w1),
            head_b1=cp(self.head_b1),
            head_w2=cp(self.head_w2),
            head_b2=cp(self.head_b2),
        )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(
        rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype),
        grad_enabled=True,
    )


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), grad_enabled=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), grad_enabled=True)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases, identity layer norms."""
    dt = config.np_dtype
    d = config.dim
    layers = []
    for layer in range(config.n_layers):
        mna_cfg = config.mna_config(layer)
        d_h = mna_cfg.resolved_head_dim()
        kernels = [
            KernelParams(
                wq=[_glorot(rng, d, d_h, dt) for _ in range(mna_cfg.heads)],
                wk=[_glorot(rng, d, d_h, dt) for _ in range(mna_cfg.heads)],
                wv=[_glorot(rng, d, d_h, dt) for _ in range(mna_cfg.heads)],
                wo=_glorot(rng, mna_cfg.heads * d_h, d, dt),
            )
            for _ in mna_cfg.kernel_specs
        ]
        adaptive = None
        concat_projection = None
        if config.aggregator is Aggregator.ADAPTIVE:
            adaptive = AdaptiveParams(
                w=_glorot(rng, d, d, dt),
                score=_glorot(rng, 1, d, dt),
            )
        elif config.aggregator is Aggregator.CONCATENATE:
            concat_projection = _glorot(rng, mna_cfg.n_kernels * d, d, dt)
        layers.append(
            LayerParams(
                ln1_gamma=_ones(d, dt),
                ln1_beta=_zeros(d, dt),
                mna=MNAParams(
                    kernels=kernels,
                    adaptive=adaptive,
                    concat_projection=concat_projection,
                ),
                ln2_gamma=_ones(d, dt),
                ln2_beta=_zeros(d, dt),
                ffn_w1=_glorot(rng, d, config.resolved_ffn_dim, dt),
                ffn_b1=_zeros(config.resolved_ffn_dim, dt),
                ffn_w2=_glorot(rng, config.resolved_ffn_dim, d, dt),
                ffn_b2=_zeros(d, dt),
            )
        )
    return ModelParams(
        input_proj=_glorot(rng, config.in_dim, d, dt),
        layers=layers,
        head_w1=_glorot(rng, d, d, dt),
        head_b1=_zeros(d, dt),
        head_w2=_glorot(rng, d, config.n_classes, dt),
        head_b2=_zeros(config.n_classes, dt),
    )


def layer_forward(
    x: Tensor,
    a_hat,
    params: LayerParams,
    config: ModelConfig,
    layer: int,
    blocks=None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One block: attention on the normalized input with a smoothed residual,
    then a pre-LN feed-forward with its own residual."""
    normed = layer_norm(x, params.ln1_gamma, params.ln1_beta, config.ln_eps)
    z = mna_forward(
        normed,
        a_hat,
        config.mna_config(layer),
        params.mna,
        blocks,
        training=training,
        rng=rng,
    )
    z_res = add(z, propagate(x, a_hat, 1))
    normed2 = layer_norm(z_res, params.ln2_gamma, params.ln2_beta, config.ln_eps)
    hidden = gelu(add(matmul(normed2, params.ffn_w1), params.ffn_b1), config.gelu_exact)
    ffn = add(matmul(hidden, params.ffn_w2), params.ffn_b2)
    return add(ffn, z_res)


def model_forward(
    batch: GraphBatch,
    params: ModelParams,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Input projection, layer stack, per-graph pooling, MLP head."""
    if batch.features.shape[1] != config.in_dim:
        raise ShapeError(
            f"batch feature width {batch.features.shape[1]} != config in_dim {config.in_dim}"
        )
    x = matmul(batch.features, params.input_proj)
    blocks = batch.blocks
    for layer, layer_params in enumerate(params.layers):
        x = layer_forward(
            x, batch.a_hat, layer_params, config, layer, blocks, training, rng
        )
    reduce = mean_rows if config.pooling == "mean" else sum_rows
    pooled_rows = [reduce(slice_rows(x, s, e)) for s, e in blocks]
    pooled = pooled_rows[0] if len(pooled_rows) == 1 else concat_rows(pooled_rows)
    hidden = gelu(add(matmul(pooled, params.head_w1), params.head_b1), config.gelu_exact)
    return add(matmul(hidden, params.head_w2), params.head_b2)


def parameter_count(params) -> int:
    """Number of learnable scalars; accepts ModelParams or (name, tensor) pairs."""
    named = params.named() if hasattr(params, "named") else params
    return int(sum(t.size for _, t in named))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _config_to_dict(config: ModelConfig) -> dict:
    out = {}
    for key, value in vars(config).items():
        if isinstance(value, Aggregator):
            value = value.value
        elif isinstance(value, NormalizationKind):
            value = value.value
        elif key == "layer_kernels" and value is not None:
            value = [[(s.hop, s.value_hop) for s in layer] for layer in value]
        out[key] = value
    return out


def _config_from_dict(data: dict) -> ModelConfig:
    from .attention import KernelSpec

    data = dict(data)
    data["aggregator"] = Aggregator(data["aggregator"])
    data["normalization"] = NormalizationKind(data["normalization"])
    if data.get("layer_kernels") is not None:
        data["layer_kernels"] = tuple(
            tuple(KernelSpec(h, v) for h, v in layer) for layer in data["layer_kernels"]
        )
    return ModelConfig(**data)


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    """Versioned npz container: config echo plus named row-major tensors."""
    arrays = {f"param/{name}": t.data for name, t in params.named()}
    meta = {"version": CHECKPOINT_VERSION, "config": _config_to_dict(config)}
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    """Load (params, config); every tensor shape is verified against config."""
    with np.load(path) as archive:
        meta = json.loads(bytes(archive["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(
                f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}"
            )
        config = _config_from_dict(meta["config"])
        skeleton = init_params(config, np.random.default_rng(0))
        stored = {
            name[len("param/"):]: archive[name]
            for name in archive.files
            if name.startswith("param/")
        }
    expected = dict(skeleton.named())
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise ConfigError(
            f"checkpoint parameters do not match config: missing {missing}, extra {extra}"
        )
    for name, tensor in expected.items():
        if stored[name].shape != tensor.data.shape:
            raise ConfigError(
                f"checkpoint tensor {name}: shape {stored[name].shape} != "
                f"expected {tensor.data.shape}"
            )
        tensor.data = stored[name].astype(config.np_dtype)
    return skeleton, config


def with_layer_kernels(config: ModelConfig, layer_kernels) -> ModelConfig:
    """Config variant with explicit per-layer kernel sets (special cases)."""
    return replace(config, layer_kernels=tuple(tuple(k) for k in layer_kernels))
