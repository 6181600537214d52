"""Command-line entry point: train, ablate, inspect, gradcheck, verify.

Exit codes: 0 success, 1 config/usage error, 2 data error, 3 verification
failure. Every command validates its full configuration before any
long-running work; flags override config-file values which override defaults.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .attention import Aggregator
from .datasets import DATA_DIR_ENV, dataset_stats, default_data_dir, load_tudataset
from .errors import ConfigError, DataError
from .graph import NormalizationKind
from .model import ModelConfig, parameter_count, save_checkpoint
from .training import TrainConfig, run_experiment
from . import verify as verify_mod


@dataclass
class RunConfig:
    dataset: str = ""
    data_dir: str = ""
    norm: str = "sym"
    c: int = 3
    heads: int = 3
    dim: int = 128
    head_dim: int | None = None
    ffn_dim: int | None = None
    layers: int = 3
    aggregator: str = "adaptive"
    pooling: str = "mean"
    lr: float = 2e-4
    weight_decay: float = 1e-5
    dropout: float = 0.2
    epochs: int = 100
    batch_size: int = 256
    warmup_steps: int | None = None
    seeds: tuple = (0, 1, 2)
    out: str = "runs"
    grad_clip: float | None = 1.0
    degree_cap: int = 0
    score_activation: str = "tanh"

    def validate(self) -> None:
        if not self.dataset:
            raise ConfigError("no dataset given (--dataset)")
        if self.norm not in ("sym", "rw"):
            raise ConfigError(f"--norm must be sym or rw, got {self.norm!r}")
        if self.aggregator not in ("adaptive", "sum", "average", "concat"):
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")
        if self.pooling not in ("mean", "sum"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.c < 0 or self.heads < 1 or self.dim < 1 or self.layers < 1:
            raise ConfigError(
                f"invalid model shape: c={self.c} heads={self.heads} "
                f"dim={self.dim} layers={self.layers}"
            )
        directory = self.dataset_dir()
        for suffix in ("A", "graph_indicator", "graph_labels"):
            path = directory / f"{self.dataset}_{suffix}.txt"
            if not path.is_file():
                raise DataError(f"missing dataset file: {path}")

    def dataset_dir(self) -> Path:
        base = Path(self.data_dir) if self.data_dir else default_data_dir()
        return base / self.dataset

    def model_config(self, in_dim: int, n_classes: int) -> ModelConfig:
        return ModelConfig(
            in_dim=in_dim,
            n_classes=n_classes,
            dim=self.dim,
            n_layers=self.layers,
            max_hop=self.c,
            heads=self.heads,
            head_dim=self.head_dim,
            ffn_dim=self.ffn_dim,
            aggregator=Aggregator(self.aggregator),
            pooling=self.pooling,
            dropout=self.dropout,
            normalization=NormalizationKind(self.norm),
            score_activation=self.score_activation,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            warmup_steps=self.warmup_steps,
            grad_clip=self.grad_clip,
            seeds=tuple(self.seeds),
        )


_INT_KEYS = {"c", "heads", "dim", "layers", "epochs", "batch_size", "degree_cap"}
_OPT_INT_KEYS = {"head_dim", "ffn_dim", "warmup_steps"}
_FLOAT_KEYS = {"lr", "weight_decay", "dropout"}
_OPT_FLOAT_KEYS = {"grad_clip"}


def _coerce(key: str, raw):
    if isinstance(raw, str):
        raw = raw.strip()
    if key in _INT_KEYS:
        return int(raw)
    if key in _OPT_INT_KEYS:
        return None if raw in (None, "", "none") else int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key in _OPT_FLOAT_KEYS:
        return None if raw in (None, "", "none") else float(raw)
    if key == "seeds":
        if isinstance(raw, (tuple, list)):
            return tuple(int(s) for s in raw)
        return tuple(int(s) for s in str(raw).split(",") if s.strip() != "")
    return raw


def read_config_file(path) -> dict:
    """key=value pairs, optionally grouped into [sections]; sections are
    flattened and ignored for addressing."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    text = path.read_text()
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError:
        parser.read_string("[run]\n" + text)
    values = {}
    known = set(RunConfig.__dataclass_fields__)
    for section in parser.sections():
        for key, raw in parser.items(section):
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r} in {path}")
            values[key] = _coerce(key, raw)
    return values


def build_run_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key in RunConfig.__dataclass_fields__:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            values[key] = _coerce(key, flag_value)
    return RunConfig(**values)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are config errors (exit 1)
        raise ConfigError(message)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; flags win")
    p.add_argument("--dataset", help="TUDataset name, e.g. NCI1")
    p.add_argument("--data-dir", dest="data_dir",
                   help=f"dataset root (default ${DATA_DIR_ENV} or ./data)")
    p.add_argument("--norm", choices=["sym", "rw"])
    p.add_argument("--c", type=int, help="max neighborhood hop (kernels 0..c)")
    p.add_argument("--heads", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--head-dim", dest="head_dim", type=int)
    p.add_argument("--ffn-dim", dest="ffn_dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--aggregator", choices=["adaptive", "sum", "average", "concat"])
    p.add_argument("--pooling", choices=["mean", "sum"])
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    p.add_argument("--seeds", help="comma-separated, e.g. 0,1,2")
    p.add_argument("--out")
    p.add_argument("--degree-cap", dest="degree_cap", type=int, nargs="?",
                   const=64,
                   help="one-hot degree features for featureless datasets, "
                        "capped here (bare flag: 64; omit for scalar degrees)")


def build_parser() -> _Parser:
    parser = _Parser(prog="mnagt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on a dataset over several seeds")
    _add_run_flags(p_train)

    p_ablate = sub.add_parser("ablate", help="compare all four kernel aggregators")
    _add_run_flags(p_ablate)

    p_inspect = sub.add_parser("inspect", help="print dataset statistics")
    _add_run_flags(p_inspect)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_grad.add_argument("--seed", type=int, default=0)

    p_verify = sub.add_parser(
        "verify", help="gradient, oracle-equivalence, and invariant suites"
    )
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--trials", type=int, default=100)
    p_verify.add_argument("--graphs", type=int, default=50)
    return parser


def _load(config: RunConfig):
    return load_tudataset(
        config.dataset_dir(),
        config.dataset,
        degree_onehot_cap=config.degree_cap or None,
    )


def _effective_config(config: RunConfig) -> dict:
    echo = asdict(config)
    echo["seeds"] = list(config.seeds)
    return echo


def _metrics_writer(path: Path):
    handle = open(path, "w")

    def write(seed, record):
        line = {"seed": seed, **asdict(record)}
        handle.write(json.dumps(line) + "\n")
        handle.flush()

    return write, handle


def cmd_train(args) -> int:
    config = build_run_config(args)
    config.validate()
    graphs = _load(config)
    stats = dataset_stats(graphs)
    model_config = config.model_config(stats["feature_dim"], stats["classes"])
    train_config = config.train_config()
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    print(
        f"training on {config.dataset}: {stats['graphs']} graphs, "
        f"{stats['classes']} classes, {parameter_count_of(model_config)} parameters"
    )
    write, handle = _metrics_writer(out_dir / "metrics.jsonl")
    try:
        summary = run_experiment(
            graphs,
            model_config,
            train_config,
            on_record=write,
            on_seed_result=lambda r: save_checkpoint(
                out_dir / f"checkpoint_seed{r.seed}.npz", r.params, model_config
            ),
        )
    finally:
        handle.close()
    summary.pop("results")
    summary["config"] = _effective_config(config)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(
        f"test accuracy over seeds {list(config.seeds)}: "
        f"{summary['mean_test_accuracy']:.4f} +/- {summary['std_test_accuracy']:.4f}"
    )
    print(f"artifacts in {out_dir}")
    return 0


def parameter_count_of(model_config: ModelConfig) -> int:
    from .model import init_params

    return parameter_count(init_params(model_config, np.random.default_rng(0)))


def cmd_ablate(args) -> int:
    config = build_run_config(args)
    config.validate()
    graphs = _load(config)
    stats = dataset_stats(graphs)
    train_config = config.train_config()
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    print(f"ablation on {config.dataset}, shared seeds {list(config.seeds)}")
    write, handle = _metrics_writer(out_dir / "ablation_metrics.jsonl")
    try:
        for aggregator in ("sum", "average", "concat", "adaptive"):
            variant = RunConfig(**{**asdict(config), "aggregator": aggregator})
            model_config = variant.model_config(stats["feature_dim"], stats["classes"])
            summary = run_experiment(
                graphs,
                model_config,
                train_config,
                on_record=lambda s, r, a=aggregator: write(f"{a}/{s}", r),
            )
            rows.append(
                {
                    "aggregator": aggregator,
                    "mean_test_accuracy": summary["mean_test_accuracy"],
                    "std_test_accuracy": summary["std_test_accuracy"],
                    "per_seed": summary["per_seed"],
                }
            )
    finally:
        handle.close()
    print(f"{'aggregator':<12} {'mean acc':>9} {'std':>8}")
    for row in rows:
        print(
            f"{row['aggregator']:<12} {row['mean_test_accuracy']:>9.4f} "
            f"{row['std_test_accuracy']:>8.4f}"
        )
    report = {
        "dataset": config.dataset,
        "seeds": list(config.seeds),
        "rows": rows,
        "config": _effective_config(config),
    }
    (out_dir / "ablation.json").write_text(json.dumps(report, indent=2) + "\n")
    return 0


def cmd_inspect(args) -> int:
    config = build_run_config(args)
    config.validate()
    stats = dataset_stats(_load(config))
    print(f"dataset        {config.dataset}")
    print(f"graphs         {stats['graphs']}")
    print(f"avg nodes      {stats['avg_nodes']:.2f}")
    print(f"avg edges      {stats['avg_edges']:.2f}")
    print(f"classes        {stats['classes']}")
    print(f"feature dim    {stats['feature_dim']}")
    print(f"class histogram {stats['class_histogram']}")
    return 0


def _report(results) -> int:
    width = max(len(r.name) for r in results)
    failures = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failures += not r.passed
        detail = f"  ({r.detail})" if r.detail else ""
        print(f"{status} {r.name:<{width}} max err {r.max_error:.3e} "
              f"tol {r.tolerance:.0e}{detail}")
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return 3 if failures else 0


def cmd_gradcheck(args) -> int:
    results = verify_mod.finite_difference_checks(args.seed)
    results += verify_mod.model_gradient_check(args.seed)
    return _report(results)


def cmd_verify(args) -> int:
    results = verify_mod.run_all(args.seed, trials=args.trials, n_graphs=args.graphs)
    return _report(results)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "train": cmd_train,
            "ablate": cmd_ablate,
            "inspect": cmd_inspect,
            "gradcheck": cmd_gradcheck,
            "verify": cmd_verify,
        }[args.command]
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
