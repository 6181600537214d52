"""Scikit-learn style wrapper around the model and training loop.

X is a list of Graph objects; y defaults to the labels stored on the graphs.
Hyperparameters are stored verbatim at __init__ (sklearn convention) and
validated in fit, so get_params/set_params/clone compose with the usual
model-selection machinery.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .attention import Aggregator
from .errors import ConfigError, DataError
from .graph import Graph, NormalizationKind, make_batch, normalized_adjacency
from .model import ModelConfig, init_params, model_forward
from .tensor import Tape, _softmax_rows_np, cross_entropy_logits
from .training import AdamW, TrainConfig, clip_global_norm, lr_at, seed_streams


def _validate_graphs(X):
    graphs = list(X)
    if not graphs:
        raise DataError("need at least one graph")
    if not all(isinstance(g, Graph) for g in graphs):
        raise DataError("X must be a sequence of Graph objects")
    width = graphs[0].features.shape[1]
    for g in graphs:
        if g.features.shape[1] != width:
            raise DataError(
                f"feature widths differ: {width} vs {g.features.shape[1]}"
            )
    return graphs, width


class MNAGTClassifier(ClassifierMixin, BaseEstimator):
    """Graph classifier built on multi-neighborhood attention.

    Parameters mirror the model/training configs; see ModelConfig and
    TrainConfig for semantics. ``validation_fraction > 0`` holds out part of
    the training set and keeps the best-validation-epoch parameters.
    """

    def __init__(
        self,
        dim=64,
        n_layers=2,
        max_hop=3,
        heads=3,
        head_dim=None,
        ffn_dim=None,
        aggregator="adaptive",
        pooling="mean",
        normalization="sym",
        dropout=0.2,
        lr=2e-4,
        weight_decay=1e-5,
        epochs=100,
        batch_size=256,
        warmup_steps=None,
        grad_clip=1.0,
        validation_fraction=0.1,
        random_state=0,
    ):
        self.dim = dim
        self.n_layers = n_layers
        self.max_hop = max_hop
        self.heads = heads
        self.head_dim = head_dim
        self.ffn_dim = ffn_dim
        self.aggregator = aggregator
        self.pooling = pooling
        self.normalization = normalization
        self.dropout = dropout
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.grad_clip = grad_clip
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _build_configs(self, in_dim, n_classes):
        model_config = ModelConfig(
            in_dim=in_dim,
            n_classes=n_classes,
            dim=self.dim,
            n_layers=self.n_layers,
            max_hop=self.max_hop,
            heads=self.heads,
            head_dim=self.head_dim,
            ffn_dim=self.ffn_dim,
            aggregator=Aggregator(self.aggregator),
            pooling=self.pooling,
            dropout=self.dropout,
            normalization=NormalizationKind(self.normalization),
        )
        train_config = TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            warmup_steps=self.warmup_steps,
            grad_clip=self.grad_clip,
            seeds=(self.random_state,),
        )
        return model_config, train_config

    def fit(self, X, y=None):
        graphs, width = _validate_graphs(X)
        if y is None:
            y = [g.label for g in graphs]
            if any(label is None for label in y):
                raise DataError("y not given and some graphs carry no label")
        y = np.asarray(y)
        if len(y) != len(graphs):
            raise DataError(f"{len(graphs)} graphs but {len(y)} labels")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if not (0.0 <= self.validation_fraction < 1.0):
            raise ConfigError(
                f"validation_fraction must be in [0, 1), got {self.validation_fraction}"
            )

        config, train_config = self._build_configs(width, len(self.classes_))
        init_rng, shuffle_rng, dropout_rng = seed_streams(self.random_state)
        params = init_params(config, init_rng)
        optimizer = AdamW(params, train_config)
        adjacencies = [normalized_adjacency(g, config.normalization) for g in graphs]

        n = len(graphs)
        n_val = int(n * self.validation_fraction)
        order = np.random.default_rng(self.random_state).permutation(n)
        val_idx, train_idx = order[:n_val], order[n_val:]
        if len(train_idx) == 0:
            raise DataError("validation fraction leaves no training graphs")

        steps_per_epoch = (len(train_idx) + self.batch_size - 1) // self.batch_size
        total_steps = steps_per_epoch * self.epochs
        warmup = train_config.resolved_warmup(total_steps)

        def batches(idx, order_rng=None):
            idx = idx if order_rng is None else idx[order_rng.permutation(len(idx))]
            for start in range(0, len(idx), self.batch_size):
                chunk = idx[start:start + self.batch_size]
                yield chunk, make_batch(
                    [graphs[i] for i in chunk],
                    kind=config.normalization,
                    adjacencies=[adjacencies[i] for i in chunk],
                    dtype=config.np_dtype,
                )

        best = None
        history = []
        for epoch in range(1, self.epochs + 1):
            losses = 0.0
            for chunk, batch in batches(train_idx, shuffle_rng):
                with Tape() as tape:
                    logits = model_forward(
                        batch, params, config, training=True, rng=dropout_rng
                    )
                    loss = cross_entropy_logits(logits, encoded[chunk])
                tape.backward(loss)
                if self.grad_clip is not None:
                    clip_global_norm(params, self.grad_clip)
                optimizer.step(lr_at(optimizer.step_count + 1, train_config, warmup, total_steps))
                optimizer.zero_grad()
                losses += loss.item() * len(chunk)
            record = {"epoch": epoch, "train_loss": losses / len(train_idx)}
            if n_val:
                correct = 0
                for chunk, batch in batches(val_idx):
                    logits = model_forward(batch, params, config, training=False)
                    correct += int(
                        (np.argmax(logits.data, axis=1) == encoded[chunk]).sum()
                    )
                record["val_accuracy"] = correct / n_val
                if best is None or record["val_accuracy"] > best[0]:
                    best = (record["val_accuracy"], params.copy())
            history.append(record)
        self.params_ = best[1] if best is not None else params
        self.config_ = config
        self.history_ = history
        self.n_features_in_ = width
        return self

    def _decision(self, X):
        if not hasattr(self, "params_"):
            raise ConfigError("estimator is not fitted; call fit first")
        graphs, width = _validate_graphs(X)
        if width != self.n_features_in_:
            raise DataError(
                f"feature width {width} != fitted width {self.n_features_in_}"
            )
        logits = []
        for start in range(0, len(graphs), self.batch_size):
            batch = make_batch(
                graphs[start:start + self.batch_size],
                kind=self.config_.normalization,
                dtype=self.config_.np_dtype,
            )
            logits.append(model_forward(batch, self.params_, self.config_).data)
        return np.concatenate(logits, axis=0)

    def predict_proba(self, X):
        return _softmax_rows_np(self._decision(X))

    def predict(self, X):
        decision = self._decision(X)
        return self.classes_[np.argmax(decision, axis=1)]
