"""The multi-instance bag classifier.

Pipeline per bag: embedding lookup, multi-head self-attention with a residual
connection, instance-wise fully connected tanh layers, instance-level pooling
to one score per instance, bag-level pooling to one bag score, sigmoid.

All layer functions accept a leading batch axis: instance tensors are
``[B, M, d]`` and masks ``[B, M]``, or ``[M, d]`` and ``[M]`` for one bag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, DataError, DegenerateBagError

INSTANCE_POOLINGS = ("sum", "max", "mean")
BAG_POOLINGS = ("attention", "gated_attention", "max", "mean")
PAD_ID = 0


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``vocab_size`` counts the padding id, so token ids run ``0..vocab_size-1``;
    the embedding table has one extra row (id ``vocab_size``) for
    out-of-vocabulary tokens.
    """

    vocab_size: int
    d_model: int = 128
    num_heads: int = 4
    hidden_sizes: tuple[int, ...] = (64, 32)
    instance_pooling: str = "sum"
    bag_pooling: str = "gated_attention"
    d_l: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.vocab_size < 1:
            raise ConfigError(f"vocab_size must be positive, got {self.vocab_size}")
        if self.d_model < 1 or self.d_l < 1:
            raise ConfigError("d_model and d_l must be positive")
        if self.num_heads < 0:
            raise ConfigError(f"num_heads must be >= 0, got {self.num_heads}")
        if self.num_heads and self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ConfigError(f"hidden_sizes must be non-empty and positive, got {self.hidden_sizes}")
        if self.instance_pooling not in INSTANCE_POOLINGS:
            raise ConfigError(f"unknown instance pooling {self.instance_pooling!r}")
        if self.bag_pooling not in BAG_POOLINGS:
            raise ConfigError(f"unknown bag pooling {self.bag_pooling!r}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads if self.num_heads else 0

    @property
    def oov_id(self) -> int:
        return self.vocab_size

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass
class ModelParameters:
    """Named weight arrays. Row ``PAD_ID`` of ``embedding`` is frozen at zero."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ModelParameters":
        return ModelParameters({k: v.copy() for k, v in self.arrays.items()})

    def attach(self, tape: Tape) -> dict[str, Tensor]:
        return {k: tape.variable(v, name=k) for k, v in self.arrays.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.arrays.items()}


@dataclass
class BagBatch:
    """Index-encoded bags padded to a common length."""

    token_ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.token_ids.ndim != 2 or self.token_ids.shape != self.mask.shape:
            raise DataError(f"token_ids {self.token_ids.shape} and mask {self.mask.shape} must be equal 2-D shapes")
        if self.labels.shape != (self.token_ids.shape[0],):
            raise DataError(f"expected {self.token_ids.shape[0]} labels, got shape {self.labels.shape}")
        if len(self) and not self.mask.any(axis=1).all():
            raise DataError("every bag needs at least one real instance")
        if (self.token_ids[~self.mask] != PAD_ID).any():
            raise DataError("padded positions must carry the padding id")

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def subset(self, index) -> "BagBatch":
        index = np.asarray(index)
        return BagBatch(self.token_ids[index], self.mask[index], self.labels[index])


@dataclass
class ForwardOutput:
    probability: np.ndarray
    attention_weights: np.ndarray
    instance_scores: np.ndarray
    bag_score: np.ndarray


def init_parameters(config: ModelConfig) -> ModelParameters:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases, zero padding row."""
    rng = np.random.default_rng(config.seed)

    def normal(rows, cols):
        return rng.normal(0.0, 1.0 / math.sqrt(rows), size=(rows, cols))

    d, arrays = config.d_model, {}
    # one-hot input view: fan-in of the table is its row count
    emb = normal(config.vocab_size + 1, d)
    emb[PAD_ID] = 0.0
    arrays["embedding"] = emb
    for i in range(config.num_heads):
        for role in ("query", "key", "value"):
            arrays[f"head{i}.{role}"] = normal(d, config.d_k)
    if config.num_heads:
        arrays["attn_out"] = normal(config.num_heads * config.d_k, d)
    width = d
    for j, h in enumerate(config.hidden_sizes):
        arrays[f"ffn{j}.weight"] = normal(width, h)
        arrays[f"ffn{j}.bias"] = np.zeros(h)
        width = h
    if config.bag_pooling in ("attention", "gated_attention"):
        arrays["pool.w2"] = normal(width, config.d_l)
        if config.bag_pooling == "gated_attention":
            arrays["pool.w3"] = normal(width, config.d_l)
        arrays["pool.w1"] = normal(config.d_l, 1)
    return ModelParameters(arrays)


def _key_mask(mask: np.ndarray) -> np.ndarray:
    # [..., M] -> [..., 1, M]: every query row sees the same valid keys
    return np.asarray(mask, dtype=bool)[..., None, :]


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V with padded keys excluded."""
    if not q.shape == k.shape == v.shape:
        raise ConfigError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    return ad.matmul(ad.masked_softmax(logits, _key_mask(mask)), v)


def multi_head_attention(x: Tensor, weights: Mapping[str, Tensor], mask, num_heads: int) -> Tensor:
    if num_heads < 1:
        raise ConfigError("multi_head_attention needs at least one head")
    heads = [
        scaled_dot_attention(
            ad.matmul(x, weights[f"head{i}.query"]),
            ad.matmul(x, weights[f"head{i}.key"]),
            ad.matmul(x, weights[f"head{i}.value"]),
            mask,
        )
        for i in range(num_heads)
    ]
    joined = heads[0] if num_heads == 1 else ad.concat(heads, axis=-1)
    return ad.matmul(joined, weights["attn_out"])


def residual_block(x: Tensor, weights: Mapping[str, Tensor], mask, config: ModelConfig) -> Tensor:
    if config.num_heads == 0:
        return x
    return ad.add(x, multi_head_attention(x, weights, mask, config.num_heads))


def instance_ffn(x: Tensor, weights: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    for j in range(len(config.hidden_sizes)):
        x = ad.tanh(ad.add_bias(ad.matmul(x, weights[f"ffn{j}.weight"]), weights[f"ffn{j}.bias"]))
    return x


def instance_pool(h: Tensor, kind: str, mask) -> Tensor:
    """One score per instance from its feature vector; padded instances score 0."""
    if kind == "sum":
        s = ad.reduce_sum(h, -1)
    elif kind == "max":
        s = ad.reduce_max(h, -1)
    elif kind == "mean":
        s = ad.scale(ad.reduce_sum(h, -1), 1.0 / h.shape[-1])
    else:
        raise ConfigError(f"unknown instance pooling {kind!r}")
    return ad.multiply(s, Tensor(np.asarray(mask, dtype=np.float64)))


def bag_pool(
    h: Tensor, scores: Tensor, kind: str, weights: Mapping[str, Tensor], mask
) -> tuple[Tensor, np.ndarray]:
    """Aggregate instance scores into the bag score.

    Returns the bag score tensor and the instance weights as an array.
    Attention weights are computed from the instance vectors ``h``; the
    weighted values are the scalar ``scores``.
    """
    mask = np.asarray(mask, dtype=bool)
    if kind in ("attention", "gated_attention"):
        a = ad.tanh(ad.matmul(h, weights["pool.w2"]))
        if kind == "gated_attention":
            a = ad.multiply(a, ad.sigmoid(ad.matmul(h, weights["pool.w3"])))
        logits = ad.matmul(a, weights["pool.w1"])
        attn = ad.masked_softmax(ad.reshape(logits, logits.shape[:-1]), mask)
        return ad.reduce_sum(ad.multiply(attn, scores), -1), attn.data
    if kind == "max":
        v = ad.reduce_max(scores, -1, mask=mask)
        masked = np.where(mask, scores.data, -np.inf)
        onehot = np.zeros(mask.shape)
        np.put_along_axis(onehot, np.argmax(masked, axis=-1)[..., None], 1.0, axis=-1)
        return v, onehot
    if kind == "mean":
        counts = mask.sum(axis=-1, keepdims=True)
        if (counts == 0).any():
            raise DegenerateBagError("mean pooling over an empty bag")
        uniform = mask / counts
        return ad.reduce_sum(ad.multiply(scores, Tensor(uniform)), -1), uniform
    raise ConfigError(f"unknown bag pooling {kind!r}")


@dataclass
class _Trace:
    probability: Tensor
    bag_score: Tensor
    scores: Tensor
    attention: np.ndarray


def _run(token_ids, mask, weights: Mapping[str, Tensor], config: ModelConfig) -> _Trace:
    x = ad.gather_rows(weights["embedding"], token_ids)
    x = residual_block(x, weights, mask, config)
    h = instance_ffn(x, weights, config)
    scores = instance_pool(h, config.instance_pooling, mask)
    v, attn = bag_pool(h, scores, config.bag_pooling, weights, mask)
    return _Trace(ad.sigmoid(v), v, scores, attn)


def forward(batch: BagBatch, params: ModelParameters, config: ModelConfig) -> ForwardOutput:
    """Inference pass without recording gradients."""
    t = _run(batch.token_ids, batch.mask, params.constants(), config)
    return ForwardOutput(t.probability.data, t.attention, t.scores.data, t.bag_score.data)


def loss_and_gradients(batch: BagBatch, params: ModelParameters, config: ModelConfig):
    """Mean binary cross-entropy of the batch and its gradient per parameter."""
    tape = Tape()
    weights = params.attach(tape)
    t = _run(batch.token_ids, batch.mask, weights, config)
    loss = ad.binary_cross_entropy(t.probability, batch.labels)
    grads = tape.backward(loss)
    return float(loss.data), {k: grads[w.node_id] for k, w in weights.items()}
