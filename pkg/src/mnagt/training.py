"""Training loop: AdamW with decoupled weight decay, linear warmup, epoch
driver, metrics records, and the multi-seed experiment protocol."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .graph import make_batch, normalized_adjacency, split_dataset
from .model import ModelConfig, ModelParams, init_params, model_forward
from .tensor import Tape, cross_entropy_logits


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-5
    epochs: int = 100
    batch_size: int = 256
    warmup_steps: int | None = None  # default: 10% of total steps
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    schedule: str = "constant"  # lr after warmup: constant | cosine
    seeds: tuple = (0, 1, 2)
    split_ratios: tuple = (0.8, 0.1, 0.1)
    eval_batch_size: int | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(
                f"epochs/batch_size must be >= 1, got {self.epochs}/{self.batch_size}"
            )
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def resolved_warmup(self, total_steps: int) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return max(1, total_steps // 10)


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    lr: float
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def lr_at(step: int, config: TrainConfig, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from 0 to lr, then constant (or cosine decay to 0)."""
    if step < 1:
        raise ConfigError(f"step counts from 1, got {step}")
    if warmup_steps > 0 and step <= warmup_steps:
        return config.lr * step / warmup_steps
    if config.schedule == "cosine" and total_steps > warmup_steps:
        progress = (step - warmup_steps) / (total_steps - warmup_steps)
        return config.lr * 0.5 * (1.0 + np.cos(np.pi * min(progress, 1.0)))
    return config.lr


def adamw_update(theta, g, m, v, step, lr, betas, eps, weight_decay):
    """One decoupled-weight-decay Adam step, in place on (theta, m, v).

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """
    b1, b2 = betas
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * np.square(g)
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    theta -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * theta)


class AdamW:
    """Optimizer over named parameter tensors; state keyed by name."""

    def __init__(self, params: ModelParams, config: TrainConfig):
        self.config = config
        self._named = list(params.named())
        self.state = {
            name: (np.zeros_like(t.data), np.zeros_like(t.data))
            for name, t in self._named
        }
        self.step_count = 0

    def step(self, lr: float) -> None:
        self.step_count += 1
        for name, tensor in self._named:
            if tensor.grad is None:
                continue
            m, v = self.state[name]
            adamw_update(
                tensor.data,
                tensor.grad,
                m,
                v,
                self.step_count,
                lr,
                self.config.betas,
                self.config.eps,
                self.config.weight_decay,
            )

    def zero_grad(self) -> None:
        for _, tensor in self._named:
            tensor.grad = None


def clip_global_norm(params: ModelParams, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    grads = [t.grad for t in params.tensors() if t.grad is not None]
    for g in grads:
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm


def _iter_batches(graphs, adjacencies, order, batch_size, config: ModelConfig):
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield make_batch(
            [graphs[i] for i in idx],
            kind=config.normalization,
            adjacencies=[adjacencies[i] for i in idx],
            dtype=config.np_dtype,
        )


def train_epoch(
    params: ModelParams,
    graphs,
    adjacencies,
    model_config: ModelConfig,
    train_config: TrainConfig,
    optimizer: AdamW,
    shuffle_rng: np.random.Generator,
    dropout_rng: np.random.Generator,
    epoch: int,
    steps_per_epoch: int,
    total_steps: int,
) -> MetricsRecord:
    """One pass over the training split; returns the aggregated record."""
    if not graphs:
        raise DataError("train_epoch: empty split")
    started = time.perf_counter()
    order = shuffle_rng.permutation(len(graphs))
    warmup = train_config.resolved_warmup(total_steps)
    loss_sum = 0.0
    correct = 0
    lr = train_config.lr
    for batch in _iter_batches(
        graphs, adjacencies, order, train_config.batch_size, model_config
    ):
        with Tape() as tape:
            logits = model_forward(
                batch, params, model_config, training=True, rng=dropout_rng
            )
            loss = cross_entropy_logits(logits, batch.labels)
        tape.backward(loss)
        if train_config.grad_clip is not None:
            clip_global_norm(params, train_config.grad_clip)
        lr = lr_at(optimizer.step_count + 1, train_config, warmup, total_steps)
        optimizer.step(lr)
        optimizer.zero_grad()
        loss_sum += loss.item() * batch.n_graphs
        correct += int((np.argmax(logits.data, axis=1) == batch.labels).sum())
    return MetricsRecord(
        epoch=epoch,
        split="train",
        loss=loss_sum / len(graphs),
        accuracy=correct / len(graphs),
        lr=lr,
        seconds=time.perf_counter() - started,
    )


def evaluate(
    params: ModelParams,
    graphs,
    adjacencies,
    model_config: ModelConfig,
    train_config: TrainConfig,
    split: str,
    epoch: int = 0,
) -> MetricsRecord:
    """Eval-mode pass: no tape, no dropout, no parameter mutation."""
    if not graphs:
        raise DataError(f"evaluate: empty split {split!r}")
    started = time.perf_counter()
    batch_size = train_config.eval_batch_size or train_config.batch_size
    order = np.arange(len(graphs))
    loss_sum = 0.0
    correct = 0
    for batch in _iter_batches(graphs, adjacencies, order, batch_size, model_config):
        logits = model_forward(batch, params, model_config, training=False)
        loss = cross_entropy_logits(logits, batch.labels)
        loss_sum += loss.item() * batch.n_graphs
        correct += int((np.argmax(logits.data, axis=1) == batch.labels).sum())
    return MetricsRecord(
        epoch=epoch,
        split=split,
        loss=loss_sum / len(graphs),
        accuracy=correct / len(graphs),
        lr=0.0,
        seconds=time.perf_counter() - started,
    )


def seed_streams(root_seed: int):
    """Deterministic child generators: (init, shuffle, dropout)."""
    init_ss, shuffle_ss, dropout_ss = np.random.SeedSequence(root_seed).spawn(3)
    return (
        np.random.default_rng(init_ss),
        np.random.default_rng(shuffle_ss),
        np.random.default_rng(dropout_ss),
    )


@dataclass
class SeedResult:
    seed: int
    best_epoch: int
    best_val_accuracy: float
    test_accuracy: float
    test_loss: float
    params: ModelParams = field(repr=False, default=None)


def train_single_seed(
    graphs,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seed: int,
    on_record=None,
    evaluate_test_each_epoch: bool = True,
) -> SeedResult:
    """Train once: split, fit, select the best-validation epoch, score test."""
    train, val, test = split_dataset(graphs, train_config.split_ratios, seed)
    init_rng, shuffle_rng, dropout_rng = seed_streams(seed)
    params = init_params(model_config, init_rng)
    optimizer = AdamW(params, train_config)
    adj = {
        id(g): normalized_adjacency(g, model_config.normalization)
        for split in (train, val, test)
        for g in split
    }

    def adjacency_list(split):
        return [adj[id(g)] for g in split]

    steps_per_epoch = (len(train) + train_config.batch_size - 1) // train_config.batch_size
    total_steps = steps_per_epoch * train_config.epochs
    best = None
    for epoch in range(1, train_config.epochs + 1):
        records = [
            train_epoch(
                params,
                train,
                adjacency_list(train),
                model_config,
                train_config,
                optimizer,
                shuffle_rng,
                dropout_rng,
                epoch,
                steps_per_epoch,
                total_steps,
            ),
            evaluate(
                params, val, adjacency_list(val), model_config, train_config, "val", epoch
            ),
        ]
        if evaluate_test_each_epoch:
            records.append(
                evaluate(
                    params, test, adjacency_list(test), model_config, train_config,
                    "test", epoch,
                )
            )
        if on_record is not None:
            for record in records:
                on_record(record)
        val_acc = records[1].accuracy
        if best is None or val_acc > best[1]:
            best = (epoch, val_acc, params.copy())
    best_epoch, best_val, best_params = best
    final = evaluate(
        params=best_params,
        graphs=test,
        adjacencies=adjacency_list(test),
        model_config=model_config,
        train_config=train_config,
        split="test",
        epoch=best_epoch,
    )
    return SeedResult(
        seed=seed,
        best_epoch=best_epoch,
        best_val_accuracy=best_val,
        test_accuracy=final.accuracy,
        test_loss=final.loss,
        params=best_params,
    )


def run_experiment(
    graphs,
    model_config: ModelConfig,
    train_config: TrainConfig,
    on_record=None,
    on_seed_result=None,
) -> dict:
    """Multi-seed protocol: per-seed best-validation checkpoint, test metric
    aggregated as mean and standard deviation."""
    if not train_config.seeds:
        raise ConfigError("run_experiment: need at least one seed")
    results = []
    for seed in train_config.seeds:
        result = train_single_seed(
            graphs,
            model_config,
            train_config,
            seed,
            on_record=(lambda r, s=seed: on_record(s, r)) if on_record else None,
        )
        if on_seed_result is not None:
            on_seed_result(result)
        results.append(result)
    accuracies = np.array([r.test_accuracy for r in results])
    return {
        "mean_test_accuracy": float(accuracies.mean()),
        "std_test_accuracy": float(accuracies.std()),
        "per_seed": [
            {
                "seed": r.seed,
                "best_epoch": r.best_epoch,
                "best_val_accuracy": r.best_val_accuracy,
                "test_accuracy": r.test_accuracy,
                "test_loss": r.test_loss,
            }
            for r in results
        ],
        "results": results,
    }
