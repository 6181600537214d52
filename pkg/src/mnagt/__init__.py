"""Multi-neighborhood attention graph transformer for graph classification."""

from .attention import (
    AdaptiveParams,
    Aggregator,
    KernelParams,
    KernelSpec,
    MNAConfig,
    MNAParams,
    adaptive_aggregate,
    aggregate_variant,
    kernel_mha,
    make_kernel_outputs,
    mna_forward,
    scaled_dot_attention,
    special_case_kernel,
)
from .datasets import (
    dataset_stats,
    load_tudataset,
    planted_clique_task,
    triangles_vs_paths,
    write_tudataset,
)
from .errors import ConfigError, DataError, ShapeError
from .estimator import MNAGTClassifier
from .graph import (
    Graph,
    GraphBatch,
    NormalizationKind,
    SparseMatrix,
    make_batch,
    normalized_adjacency,
    propagate,
    split_dataset,
)
from .model import (
    LayerParams,
    ModelConfig,
    ModelParams,
    init_params,
    layer_forward,
    load_checkpoint,
    model_forward,
    parameter_count,
    save_checkpoint,
)
from .tensor import Tape, Tensor
from .training import (
    AdamW,
    MetricsRecord,
    TrainConfig,
    adamw_update,
    evaluate,
    lr_at,
    run_experiment,
    train_epoch,
    train_single_seed,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "AdaptiveParams",
    "Aggregator",
    "ConfigError",
    "DataError",
    "Graph",
    "GraphBatch",
    "KernelParams",
    "KernelSpec",
    "LayerParams",
    "MNAConfig",
    "MNAGTClassifier",
    "MNAParams",
    "MetricsRecord",
    "ModelConfig",
    "ModelParams",
    "NormalizationKind",
    "ShapeError",
    "SparseMatrix",
    "Tape",
    "Tensor",
    "TrainConfig",
    "adamw_update",
    "adaptive_aggregate",
    "aggregate_variant",
    "dataset_stats",
    "evaluate",
    "init_params",
    "kernel_mha",
    "layer_forward",
    "load_checkpoint",
    "load_tudataset",
    "lr_at",
    "make_batch",
    "make_kernel_outputs",
    "mna_forward",
    "model_forward",
    "normalized_adjacency",
    "parameter_count",
    "planted_clique_task",
    "propagate",
    "run_experiment",
    "save_checkpoint",
    "scaled_dot_attention",
    "special_case_kernel",
    "split_dataset",
    "train_epoch",
    "train_single_seed",
    "triangles_vs_paths",
    "write_tudataset",
]
