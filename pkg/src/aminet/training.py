"""Adam training with F1-based early stopping and repeated stratified CV."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import Record, Vocabulary, build_vocabulary, encode_and_pad, max_bag_size, stratified_folds, stratified_holdout
from .errors import ConfigError, ContractError
from .metrics import MetricReport, confusion, evaluate, mean_report, precision_recall_f1
from .model import PAD_ID, BagBatch, ModelConfig, ModelParameters, forward, init_parameters, loss_and_gradients

log = logging.getLogger(__name__)

# rows excluded from every update
FROZEN_ROWS = {"embedding": (PAD_ID,)}


@dataclass(frozen=True)
class TrainConfig:
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

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 0:
            raise ConfigError("max_epochs and batch_size must be positive, patience non-negative")
        if self.folds < 2 or self.repetitions < 1:
            raise ConfigError("need folds >= 2 and repetitions >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def derive_seed(*keys: int) -> int:
    """Independent 32-bit seed for a labelled random stream."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# ---------------------------------------------------------------- loss and optimiser


def bce_loss(probabilities, labels) -> float:
    p = np.asarray(probabilities, dtype=np.float64)
    if p.size == 0:
        raise ContractError("bce_loss of an empty batch")
    return float(ad.binary_cross_entropy(ad.Tensor(p), labels).data)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads: Mapping[str, np.ndarray], state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update, applied in place. Returns (params, state)."""
    arrays = params.arrays if isinstance(params, ModelParameters) else params
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, theta in arrays.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != theta.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        frozen = FROZEN_ROWS.get(name)
        if frozen:
            g = g.copy()
            g[list(frozen)] = 0.0
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
    return params, state


# ---------------------------------------------------------------- fitting


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_f1: float
    wall_clock: float

    def to_dict(self, timing: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not timing:
            del d["wall_clock"]
        return d


@dataclass
class FitResult:
    params: ModelParameters
    log: list[EpochRecord]
    best_epoch: int
    best_f1: float


def dataset_loss(batch: BagBatch, params: ModelParameters, config: ModelConfig) -> float:
    return bce_loss(forward(batch, params, config).probability, batch.labels)


def validation_f1(batch: BagBatch, params: ModelParameters, config: ModelConfig, threshold: float) -> float:
    probs = forward(batch, params, config).probability
    return precision_recall_f1(confusion(probs, batch.labels, threshold))[2]


def fit(
    train: BagBatch,
    val: BagBatch,
    model_config: ModelConfig,
    train_config: TrainConfig,
    params: ModelParameters | None = None,
) -> FitResult:
    """Mini-batch Adam on mean BCE, keeping the best-validation-F1 epoch.

    Ties go to the earliest epoch. Training stops once ``patience`` epochs
    pass without improvement, or at ``max_epochs``.
    """
    if len(train) == 0 or len(val) == 0:
        raise ContractError("fit needs non-empty training and validation sets")
    if not val.labels.any():
        log.warning("validation set has no positive bag; F1 stays 0 and early stopping is uninformative")
    params = init_parameters(model_config) if params is None else params.copy()
    rng = np.random.default_rng(train_config.seed)
    state = AdamState()
    history: list[EpochRecord] = []
    best_params, best_f1, best_epoch = params.copy(), -1.0, 0
    start = time.perf_counter()
    bs = train_config.batch_size
    for epoch in range(1, train_config.max_epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for lo in range(0, len(order), bs):
            batch = train.subset(order[lo : lo + bs])
            loss, grads = loss_and_gradients(batch, params, model_config)
            adam_step(params, grads, state, train_config)
            total += loss * len(batch)
        f1 = validation_f1(val, params, model_config, train_config.threshold)
        history.append(EpochRecord(epoch, total / len(train), f1, time.perf_counter() - start))
        log.debug("epoch %d loss %.6f val_f1 %.4f", epoch, history[-1].train_loss, f1)
        if f1 > best_f1:
            best_params, best_f1, best_epoch = params.copy(), f1, epoch
        if epoch - best_epoch >= train_config.patience:
            break
    return FitResult(best_params, history, best_epoch, best_f1)


def predict_proba(
    records: Sequence[Record], vocabulary: Vocabulary, params: ModelParameters, model_config: ModelConfig
) -> np.ndarray:
    return forward(encode_and_pad(records, vocabulary), params, model_config).probability


def fit_records(
    train: Sequence[Record],
    val: Sequence[Record],
    vocabulary: Vocabulary,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> FitResult:
    width = max(max_bag_size(train), max_bag_size(val))
    return fit(
        encode_and_pad(train, vocabulary, width),
        encode_and_pad(val, vocabulary, width),
        model_config,
        train_config,
    )


# ---------------------------------------------------------------- cross validation

Predictor = Callable[[Sequence[Record]], np.ndarray]
Fitter = Callable[[Sequence[Record], Sequence[Record], Vocabulary, ModelConfig, TrainConfig], Predictor]
TrainTransform = Callable[[list[Record], int], list[Record]]


def aminet_fitter(train, val, vocabulary, model_config, train_config) -> Predictor:
    result = fit_records(train, val, vocabulary, model_config, train_config)

    def predict(records):
        return predict_proba(records, vocabulary, result.params, model_config)

    return predict


@dataclass(frozen=True)
class FoldResult:
    repetition: int
    fold: int
    report: MetricReport
    test_indices: np.ndarray


@dataclass
class CVReport:
    folds: list[FoldResult]
    aggregate: MetricReport


def cross_validate(
    records: Sequence[Record],
    model_config: ModelConfig,
    train_config: TrainConfig,
    *,
    vocabulary: Vocabulary | None = None,
    train_transform: TrainTransform | None = None,
    fitter: Fitter = aminet_fitter,
) -> CVReport:
    """Repeated stratified k-fold evaluation.

    Within each training portion a stratified ``validation_fraction`` is
    held out for early stopping. ``train_transform(records, seed)`` is
    applied to the training portion only; test folds are never modified.
    """
    records = list(records)
    vocabulary = vocabulary or build_vocabulary(records)
    if model_config.vocab_size != vocabulary.size:
        raise ConfigError(f"model vocab_size {model_config.vocab_size} != vocabulary size {vocabulary.size}")
    labels = np.array([r.label for r in records])
    k = train_config.folds
    assignments = stratified_folds(labels, k, train_config.repetitions, train_config.seed)
    results = []
    for rep, folds in enumerate(assignments):
        for fold in range(k):
            stream = rep * k + fold
            test_idx = np.flatnonzero(folds == fold)
            train_recs = [records[i] for i in np.flatnonzero(folds != fold)]
            if train_transform is not None:
                train_recs = train_transform(train_recs, derive_seed(train_config.seed, stream, 0))
            inner, held = stratified_holdout(
                [r.label for r in train_recs], train_config.validation_fraction, derive_seed(train_config.seed, stream, 1)
            )
            predict = fitter(
                [train_recs[i] for i in inner],
                [train_recs[i] for i in held],
                vocabulary,
                dataclasses.replace(model_config, seed=derive_seed(model_config.seed, stream, 2)),
                dataclasses.replace(train_config, seed=derive_seed(train_config.seed, stream, 3)),
            )
            test_recs = [records[i] for i in test_idx]
            report = evaluate(predict(test_recs), labels[test_idx], train_config.threshold)
            log.info("repetition %d fold %d: F1 %.4f", rep, fold, report.f1)
            results.append(FoldResult(rep, fold, report, test_idx))
    return CVReport(results, mean_report(r.report for r in results))
