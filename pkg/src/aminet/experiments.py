"""Ablation and robustness sweeps built on :func:`training.cross_validate`.

Each sweep returns ``(grid value, CVReport)`` pairs in grid order. Noise and
deletion are applied to training folds only.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Record, Vocabulary, delete_instances, encode_and_pad, inject_feature_noise, inject_label_noise
from .errors import ConfigError
from .model import ModelConfig, ModelParameters, forward
from .training import CVReport, Fitter, TrainConfig, aminet_fitter, cross_validate

HEADS_GRID = (0, 2, 4, 8, 16, 32)
INSTANCE_GRID = ("sum", "max", "mean")
BAG_GRID = ("attention", "gated_attention", "max", "mean")
FEATURE_NOISE_GRID = (1, 2, 3, 4, 5)
LABEL_NOISE_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))
DELETION_GRID = (1, 2, 3, 4, 5)


def heads_sweep(
    records: Sequence[Record],
    vocabulary: Vocabulary,
    model_config: ModelConfig,
    train_config: TrainConfig,
    grid: Sequence[int] = HEADS_GRID,
    fitter: Fitter = aminet_fitter,
) -> list[tuple[int, CVReport]]:
    # validate every head count before any training
    configs = [dataclasses.replace(model_config, num_heads=int(h)) for h in grid]
    return [
        (c.num_heads, cross_validate(records, c, train_config, vocabulary=vocabulary, fitter=fitter)) for c in configs
    ]


def pooling_sweep(
    records: Sequence[Record],
    vocabulary: Vocabulary,
    model_config: ModelConfig,
    train_config: TrainConfig,
    instance_grid: Sequence[str] = INSTANCE_GRID,
    bag_grid: Sequence[str] = BAG_GRID,
    fitter: Fitter = aminet_fitter,
) -> list[tuple[tuple[str, str], CVReport]]:
    configs = [
        dataclasses.replace(model_config, instance_pooling=i, bag_pooling=b)
        for i, b in itertools.product(instance_grid, bag_grid)
    ]
    return [
        ((c.instance_pooling, c.bag_pooling), cross_validate(records, c, train_config, vocabulary=vocabulary, fitter=fitter))
        for c in configs
    ]


def noise_sweep(
    records: Sequence[Record],
    vocabulary: Vocabulary,
    model_config: ModelConfig,
    train_config: TrainConfig,
    kind: str,
    grid: Sequence[float] | None = None,
    fitter: Fitter = aminet_fitter,
) -> list[tuple[float, CVReport]]:
    """Feature noise (``n`` tokens changed per record) or label noise (flip ratio)."""
    if kind == "feature":
        grid = FEATURE_NOISE_GRID if grid is None else grid
        for n in grid:
            if int(n) != n or not 1 <= n <= 5:
                raise ConfigError(f"feature noise levels must be integers in 1..5, got {n}")

        def transform(level):
            return lambda recs, seed: inject_feature_noise(recs, vocabulary, int(level), seed)

    elif kind == "label":
        grid = LABEL_NOISE_GRID if grid is None else grid
        for r in grid:
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"label noise ratios must lie in [0, 1], got {r}")

        def transform(level):
            return lambda recs, seed: inject_label_noise(recs, float(level), seed)

    else:
        raise ConfigError(f"noise kind must be 'feature' or 'label', got {kind!r}")
    return [
        (
            level,
            cross_validate(
                records, model_config, train_config, vocabulary=vocabulary, train_transform=transform(level), fitter=fitter
            ),
        )
        for level in grid
    ]


def incomplete_sweep(
    records: Sequence[Record],
    vocabulary: Vocabulary,
    model_config: ModelConfig,
    train_config: TrainConfig,
    grid: Sequence[int] = DELETION_GRID,
    fitter: Fitter = aminet_fitter,
) -> list[tuple[int, CVReport]]:
    for n in grid:
        if int(n) != n or not 1 <= n <= 5:
            raise ConfigError(f"deletion counts must be integers in 1..5, got {n}")
    return [
        (
            int(n),
            cross_validate(
                records,
                model_config,
                train_config,
                vocabulary=vocabulary,
                train_transform=lambda recs, seed, n=int(n): delete_instances(recs, n, seed),
                fitter=fitter,
            ),
        )
        for n in grid
    ]


@dataclass(frozen=True)
class AttentionRow:
    record: int
    token: str
    weight: float
    score: float
    probability: float
    label: int


def attention_rows(
    records: Sequence[Record], vocabulary: Vocabulary, params: ModelParameters, config: ModelConfig
) -> list[AttentionRow]:
    """Per-instance bag-pooling weights, heaviest first within each record."""
    batch = encode_and_pad(records, vocabulary)
    out = forward(batch, params, config)
    rows = []
    for i, rec in enumerate(records):
        toks = rec.tokens or ["<empty>"]
        order = sorted(range(len(toks)), key=lambda j: (-out.attention_weights[i, j], toks[j]))
        for j in order:
            rows.append(
                AttentionRow(
                    i,
                    toks[j],
                    float(out.attention_weights[i, j]),
                    float(out.instance_scores[i, j]),
                    float(out.probability[i]),
                    rec.label,
                )
            )
    return rows


def key_token_hit_rate(rows: Sequence[AttentionRow], keys: set[str]) -> float:
    """Share of positive records whose heaviest instance is a key token."""
    top: dict[int, AttentionRow] = {}
    for r in rows:
        top.setdefault(r.record, r)
    positives = [r for r in top.values() if r.label == 1]
    if not positives:
        return float("nan")
    return float(np.mean([r.token in keys for r in positives]))
