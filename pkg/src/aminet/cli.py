"""Command-line entry point.

Settings come from built-in defaults, then an optional flat YAML mapping
given with ``--config``, then command-line flags (``--d_model 32`` or
``--d-model 32``); later sources win. Reports are CSV files whose leading
``#`` lines record the resolved configuration.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import experiments as ex
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    Record,
    SyntheticSpec,
    Vocabulary,
    build_vocabulary,
    encode_and_pad,
    generate_synthetic,
    read_records,
    stratified_holdout,
    write_records,
)
from .errors import AmiNetError, ConfigError, DataError
from .metrics import COLUMNS
from .model import ModelConfig
from .training import CVReport, TrainConfig, cross_validate, fit

log = logging.getLogger("aminet")

EXIT_CONFIG, EXIT_DATA, EXIT_IO = 2, 3, 4

COMMANDS = (
    "train",
    "cv",
    "ablate-heads",
    "ablate-pooling",
    "noise-sweep",
    "incomplete-sweep",
    "attention-export",
    "make-synthetic",
)


@dataclass
class ExperimentConfig:
    # data source: exactly one of dataset / synthetic
    dataset: str | None = None
    synthetic: bool = False
    synth_num_bags: int = 1000
    synth_vocab_size: int = 100
    synth_key_tokens: list[int] = dataclasses.field(default_factory=lambda: [0, 1, 2, 3, 4])
    synth_bag_size_min: int = 3
    synth_bag_size_max: int = 17
    synth_positive_rate: float = 0.3
    synth_rule: str = "any-key"
    synth_decoy_rate: float = 0.0
    # model
    d_model: int = 128
    num_heads: int = 4
    hidden_sizes: list[int] = dataclasses.field(default_factory=lambda: [64, 32])
    instance_pooling: str = "sum"
    bag_pooling: str = "gated_attention"
    d_l: int = 32
    # training
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    max_epochs: int = 1000
    patience: int = 50
    batch_size: int = 32
    threshold: float = 0.5
    folds: int = 10
    repetitions: int = 5
    validation_fraction: float = 0.1
    seed: int = 0
    # sweep grids
    heads_grid: list[int] = dataclasses.field(default_factory=lambda: list(ex.HEADS_GRID))
    instance_grid: list[str] = dataclasses.field(default_factory=lambda: list(ex.INSTANCE_GRID))
    bag_grid: list[str] = dataclasses.field(default_factory=lambda: list(ex.BAG_GRID))
    noise_kind: str = "feature"
    feature_grid: list[int] = dataclasses.field(default_factory=lambda: list(ex.FEATURE_NOISE_GRID))
    label_grid: list[float] = dataclasses.field(default_factory=lambda: list(ex.LABEL_NOISE_GRID))
    deletion_grid: list[int] = dataclasses.field(default_factory=lambda: list(ex.DELETION_GRID))
    # io
    out: str = "aminet-out"
    checkpoint: str | None = None
    allow_oov: bool = False
    log_timing: bool = False

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            num_bags=self.synth_num_bags,
            vocab_size=self.synth_vocab_size,
            key_tokens=tuple(self.synth_key_tokens),
            bag_size_range=(self.synth_bag_size_min, self.synth_bag_size_max),
            positive_rate_target=self.synth_positive_rate,
            rule=self.synth_rule,
            decoy_rate=self.synth_decoy_rate,
            seed=self.seed,
        )

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            num_heads=self.num_heads,
            hidden_sizes=tuple(self.hidden_sizes),
            instance_pooling=self.instance_pooling,
            bag_pooling=self.bag_pooling,
            d_l=self.d_l,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def header(self) -> dict:
        """Configuration recorded in reports (the output directory is not part of it)."""
        d = dataclasses.asdict(self)
        del d["out"]
        return d


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(key: str, value):
    """Convert a config-file or flag value to the field's declared type."""
    kind = _FIELD_TYPES[key]
    try:
        if kind == "bool":
            return _parse_bool(value)
        if kind.startswith("list["):
            item = {"list[int]": int, "list[float]": float, "list[str]": str}[kind]
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            elif not isinstance(value, (list, tuple)):
                value = [value]
            return [item(v.strip() if isinstance(v, str) else v) for v in value]
        if value is None:
            if "None" in kind:
                return None
            raise ConfigError(f"{key} cannot be empty")
        if kind.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind.startswith("float"):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value for {key}: {value!r}") from None


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat key-value mapping")
    unknown = sorted(set(data) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(f"{path}: key {k} is nested; the config file must be flat")
    return data


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aminet", description="Multi-instance bag classifier: training, cross-validation and sweeps")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat YAML file of settings")
        for key, kind in _FIELD_TYPES.items():
            flags = [f"--{key}"]
            if "_" in key:
                flags.append(f"--{key.replace('_', '-')}")
            if kind == "bool":
                p.add_argument(*flags, dest=key, nargs="?", const="true", default=argparse.SUPPRESS)
            else:
                p.add_argument(*flags, dest=key, default=argparse.SUPPRESS, metavar=key.upper())
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    values: dict = {}
    if args.config:
        values.update(load_config_file(args.config))
    values.update({k: v for k, v in vars(args).items() if k in _FIELD_TYPES})
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in values.items()})


# ---------------------------------------------------------------- data and reports


def load_records(cfg: ExperimentConfig) -> list[Record]:
    if cfg.dataset and cfg.synthetic:
        raise ConfigError("give either dataset or synthetic, not both")
    if cfg.synthetic:
        return generate_synthetic(cfg.synthetic_spec())
    if not cfg.dataset:
        raise ConfigError("no data source: pass --dataset PATH or --synthetic")
    try:
        return read_records(cfg.dataset)
    except OSError as exc:
        raise OSError(f"cannot read dataset {cfg.dataset}: {exc.strerror or exc}") from exc


def _fmt(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def render_csv(cfg: ExperimentConfig, command: str, header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    buf.write(f"# command: {command}\n")
    for k, v in sorted(cfg.header().items()):
        buf.write(f"# {k}: {json.dumps(v)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def _write(cfg: ExperimentConfig, name: str, text: str) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text, encoding="utf-8")
    print(path)
    return path


def cv_rows(report: CVReport):
    for f in report.folds:
        yield (f.repetition, f.fold, *f.report.as_row().values())
    yield ("mean", "", *report.aggregate.as_row().values())


# ---------------------------------------------------------------- commands


def cmd_train(cfg: ExperimentConfig) -> int:
    records = load_records(cfg)
    vocab = build_vocabulary(records)
    mc, tc = cfg.model_config(vocab.size), cfg.train_config()
    inner, held = stratified_holdout([r.label for r in records], tc.validation_fraction, tc.seed)
    if len(held) == 0 or len(inner) == 0:
        raise DataError("dataset too small for a train/validation split")
    batch = encode_and_pad(records, vocab)
    result = fit(batch.subset(inner), batch.subset(held), mc, tc)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        out / "model.aminet",
        mc,
        result.params,
        {"vocabulary": vocab.tokens, "best_epoch": result.best_epoch, "best_val_f1": result.best_f1},
    )
    lines = [json.dumps(e.to_dict(timing=cfg.log_timing)) for e in result.log]
    _write(cfg, "train_log.jsonl", "\n".join(lines) + "\n")
    print(f"best epoch {result.best_epoch}, validation F1 {result.best_f1:.4f}, checkpoint {out / 'model.aminet'}")
    return 0


def cmd_cv(cfg: ExperimentConfig) -> int:
    records = load_records(cfg)
    vocab = build_vocabulary(records)
    report = cross_validate(records, cfg.model_config(vocab.size), cfg.train_config(), vocabulary=vocab)
    _write(cfg, "cv_report.csv", render_csv(cfg, "cv", ("repetition", "fold", *COLUMNS), cv_rows(report)))
    return 0


def cmd_ablate_heads(cfg: ExperimentConfig) -> int:
    for h in cfg.heads_grid:
        if h < 0 or (h and cfg.d_model % h):
            raise ConfigError(f"head count {h} does not divide d_model={cfg.d_model}")
    records = load_records(cfg)
    vocab = build_vocabulary(records)
    res = ex.heads_sweep(records, vocab, cfg.model_config(vocab.size), cfg.train_config(), cfg.heads_grid)
    rows = [(h, r.aggregate.f1) for h, r in res]
    _write(cfg, "ablate_heads.csv", render_csv(cfg, "ablate-heads", ("heads", "F1"), rows))
    return 0


def cmd_ablate_pooling(cfg: ExperimentConfig) -> int:
    records = load_records(cfg)
    vocab = build_vocabulary(records)
    res = ex.pooling_sweep(
        records, vocab, cfg.model_config(vocab.size), cfg.train_config(), cfg.instance_grid, cfg.bag_grid
    )
    rows = [(i, b, r.aggregate.f1) for (i, b), r in res]
    _write(cfg, "ablate_pooling.csv", render_csv(cfg, "ablate-pooling", ("instance_pooling", "bag_pooling", "F1"), rows))
    return 0


def cmd_noise_sweep(cfg: ExperimentConfig) -> int:
    records = load_records(cfg)
    vocab = build_vocabulary(records)
    grid = cfg.feature_grid if cfg.noise_kind == "feature" else cfg.label_grid
    res = ex.noise_sweep(records, vocab, cfg.model_config(vocab.size), cfg.train_config(), cfg.noise_kind, grid)
    rows = [(cfg.noise_kind, level, r.aggregate.f1) for level, r in res]
    name = f"noise_sweep_{cfg.noise_kind}.csv"
    _write(cfg, name, render_csv(cfg, "noise-sweep", ("kind", "level", "F1"), rows))
    return 0


def cmd_incomplete_sweep(cfg: ExperimentConfig) -> int:
    records = load_records(cfg)
    vocab = build_vocabulary(records)
    res = ex.incomplete_sweep(records, vocab, cfg.model_config(vocab.size), cfg.train_config(), cfg.deletion_grid)
    rows = [(n, r.aggregate.f1) for n, r in res]
    _write(cfg, "incomplete_sweep.csv", render_csv(cfg, "incomplete-sweep", ("deleted", "F1"), rows))
    return 0


def cmd_attention_export(cfg: ExperimentConfig) -> int:
    if not cfg.checkpoint:
        raise ConfigError("attention-export needs --checkpoint PATH")
    try:
        ckpt = load_checkpoint(cfg.checkpoint)
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {cfg.checkpoint}: {exc.strerror or exc}") from exc
    tokens = ckpt.metadata.get("vocabulary")
    if tokens is None:
        raise ConfigError(f"checkpoint {cfg.checkpoint} carries no vocabulary")
    vocab = Vocabulary(tokens)
    if vocab.size != ckpt.config.vocab_size:
        raise ConfigError(f"checkpoint vocabulary has {vocab.size} ids but the model expects {ckpt.config.vocab_size}")
    records = load_records(cfg)
    unknown = sorted({t for r in records for t in r.instances if t not in vocab})
    if unknown and not cfg.allow_oov:
        raise ConfigError(
            f"dataset has {len(unknown)} tokens missing from the checkpoint vocabulary "
            f"(first: {unknown[0]!r}); pass --allow_oov to map them to the OOV embedding"
        )
    rows = ex.attention_rows(records, vocab, ckpt.params, ckpt.config)
    table = [(r.record, r.token, r.weight, r.score, r.probability, r.label) for r in rows]
    _write(
        cfg,
        "attention.csv",
        render_csv(cfg, "attention-export", ("record", "token", "attention", "instance_score", "probability", "label"), table),
    )
    return 0


def cmd_make_synthetic(cfg: ExperimentConfig) -> int:
    records = generate_synthetic(cfg.synthetic_spec())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_records(out / "synthetic.jsonl", records)
    rate = np.mean([r.label for r in records])
    print(f"{out / 'synthetic.jsonl'}: {len(records)} bags, positive rate {rate:.3f}")
    return 0


HANDLERS = {
    "train": cmd_train,
    "cv": cmd_cv,
    "ablate-heads": cmd_ablate_heads,
    "ablate-pooling": cmd_ablate_pooling,
    "noise-sweep": cmd_noise_sweep,
    "incomplete-sweep": cmd_incomplete_sweep,
    "attention-export": cmd_attention_export,
    "make-synthetic": cmd_make_synthetic,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = resolve_config(args)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AmiNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
