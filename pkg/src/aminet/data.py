"""Records, vocabulary, padding, synthetic bags and noise injectors.

A record is an unordered set of token strings plus a 0/1 label. Every
randomised function here is a pure function of its inputs and ``seed``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, GenerationError
from .model import PAD_ID, BagBatch

log = logging.getLogger(__name__)

RULES = ("any-key", "co-occurrence")
MAX_REJECTION_ROUNDS = 1000


@dataclass(frozen=True)
class Record:
    instances: frozenset[str]
    label: int

    def __init__(self, instances: Iterable[str], label: int):
        toks = frozenset(instances)
        if any(not isinstance(t, str) or not t for t in toks):
            raise DataError(f"instances must be non-empty strings, got {sorted(map(repr, toks))}")
        if label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {label!r}")
        object.__setattr__(self, "instances", toks)
        object.__setattr__(self, "label", int(label))

    @property
    def tokens(self) -> list[str]:
        """Instances in sorted order, the canonical iteration order."""
        return sorted(self.instances)

    def __len__(self) -> int:
        return len(self.instances)


class Vocabulary:
    """Token <-> id map. Id 0 is padding; unknown tokens map to ``oov_id``."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens: list[str] = sorted(set(tokens))
        self._ids = {t: i + 1 for i, t in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens) + 1

    @property
    def oov_id(self) -> int:
        return self.size

    def __len__(self) -> int:
        return self.size

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self._ids.get(token, self.oov_id)

    def token(self, token_id: int) -> str | None:
        if token_id == PAD_ID:
            return None
        if token_id == self.oov_id:
            return "<oov>"
        return self.tokens[token_id - 1]


def build_vocabulary(records: Sequence[Record]) -> Vocabulary:
    if not records:
        raise DataError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(t for r in records for t in r.instances)


def max_bag_size(records: Sequence[Record]) -> int:
    return max((len(r) for r in records), default=1) or 1


def encode_and_pad(records: Sequence[Record], vocabulary: Vocabulary, max_len: int | None = None) -> BagBatch:
    """Index-encode records into a padded batch.

    Unknown tokens become ``vocabulary.oov_id``. A record emptied by
    instance deletion is encoded as a single OOV instance.
    """
    if max_len is None:
        max_len = max_bag_size(records)
    ids = np.full((len(records), max_len), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(records), max_len), dtype=bool)
    for row, rec in enumerate(records):
        if len(rec) > max_len:
            raise DataError(f"record {row} has {len(rec)} instances, more than max_len={max_len}")
        toks = rec.tokens
        if not toks:
            log.warning("record %d has no instances; encoding as a single OOV sentinel", row)
            ids[row, 0] = vocabulary.oov_id
            mask[row, 0] = True
            continue
        ids[row, : len(toks)] = [vocabulary.id(t) for t in toks]
        mask[row, : len(toks)] = True
    return BagBatch(ids, mask, np.array([r.label for r in records], dtype=np.int64))


# ---------------------------------------------------------------- file format


def read_records(path: str | Path) -> list[Record]:
    """Read line-delimited JSON objects ``{"instances": [...], "label": 0|1}``."""
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = Record(obj["instances"], obj["label"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from None
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not rec.instances:
                raise DataError(f"{path}:{lineno}: record has no instances")
            records.append(rec)
    if not records:
        raise DataError(f"{path}: no records")
    return records


def write_records(path: str | Path, records: Iterable[Record]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"instances": r.tokens, "label": r.label}, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic MIL dataset.

    Token ``i`` of the universe is named ``tok{i}`` (zero padded). A bag is
    positive under ``any-key`` when it holds any key token and under
    ``co-occurrence`` when it holds all of them; an empty key set never
    fires. ``decoy_rate`` is the share of negative bags that receive a strict
    subset of the keys, which only matters for ``co-occurrence``.
    """

    num_bags: int = 1000
    vocab_size: int = 100
    key_tokens: tuple[int, ...] = (0, 1, 2, 3, 4)
    bag_size_range: tuple[int, int] = (3, 17)
    positive_rate_target: float = 0.3
    rule: str = "any-key"
    decoy_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "key_tokens", tuple(sorted(set(int(k) for k in self.key_tokens))))
        object.__setattr__(self, "bag_size_range", tuple(int(x) for x in self.bag_size_range))
        lo, hi = self.bag_size_range
        if self.num_bags < 1 or self.vocab_size < 1:
            raise DataError("num_bags and vocab_size must be positive")
        if not 1 <= lo <= hi:
            raise DataError(f"bag_size_range must satisfy 1 <= min <= max, got {self.bag_size_range}")
        if hi > self.vocab_size:
            raise DataError(f"bags of {hi} distinct tokens need vocab_size >= {hi}")
        if any(not 0 <= k < self.vocab_size for k in self.key_tokens):
            raise DataError(f"key tokens {self.key_tokens} outside the universe of {self.vocab_size}")
        if self.rule not in RULES:
            raise DataError(f"unknown rule {self.rule!r}; expected one of {RULES}")
        if not 0.0 <= self.positive_rate_target <= 1.0 or not 0.0 <= self.decoy_rate <= 1.0:
            raise DataError("positive_rate_target and decoy_rate must lie in [0, 1]")

    def token_name(self, i: int) -> str:
        return f"tok{i:0{len(str(self.vocab_size - 1))}d}"

    @property
    def key_names(self) -> frozenset[str]:
        return frozenset(self.token_name(k) for k in self.key_tokens)


def rule_label(instances: Iterable[str], key_names: frozenset[str], rule: str) -> int:
    """Bag label implied by the key-token rule."""
    if not key_names:
        return 0
    present = key_names.intersection(instances)
    if rule == "any-key":
        return int(bool(present))
    return int(present == key_names)


def generate_synthetic(spec: SyntheticSpec) -> list[Record]:
    """Draw bags whose labels follow the key-token rule exactly.

    Exactly ``round(rate * num_bags)`` bags are aimed at the positive class;
    each bag is proposed and re-drawn until the rule yields its intended
    label.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.num_bags
    n_pos = math.floor(spec.positive_rate_target * n + 0.5)
    if abs(n_pos / n - spec.positive_rate_target) > 0.02:
        raise GenerationError(f"positive rate {spec.positive_rate_target} is not reachable with {n} bags")
    intended = np.array([1] * n_pos + [0] * (n - n_pos))
    rng.shuffle(intended)

    keys = np.array(spec.key_tokens, dtype=np.int64)
    key_set = set(spec.key_tokens)
    non_keys = np.array([i for i in range(spec.vocab_size) if i not in key_set], dtype=np.int64)
    everything = np.arange(spec.vocab_size)
    lo, hi = spec.bag_size_range
    key_names = spec.key_names

    def fill(chosen: np.ndarray, size: int, pool: np.ndarray) -> np.ndarray:
        pool = np.setdiff1d(pool, chosen)
        extra = max(0, size - len(chosen))
        if extra > len(pool):
            return chosen
        return np.concatenate([chosen, rng.choice(pool, extra, replace=False)])

    if spec.rule == "co-occurrence" and n_pos and len(keys) > hi:
        raise GenerationError(f"{len(keys)} co-occurring keys do not fit in bags of at most {hi} tokens")

    def propose(label: int) -> np.ndarray:
        if label == 1 and len(keys):
            if spec.rule == "any-key":
                return fill(rng.choice(keys, 1), int(rng.integers(lo, hi + 1)), everything)
            return fill(keys.copy(), int(rng.integers(max(lo, len(keys)), hi + 1)), everything)
        size = int(rng.integers(lo, hi + 1))
        if spec.rule == "co-occurrence" and len(keys) > 1 and rng.random() < spec.decoy_rate:
            k = int(rng.integers(1, len(keys)))
            return fill(rng.choice(keys, k, replace=False), size, non_keys)
        return rng.choice(everything, size, replace=False)

    records = []
    for label in intended:
        for _ in range(MAX_REJECTION_ROUNDS):
            toks = [spec.token_name(i) for i in propose(int(label))]
            if rule_label(toks, key_names, spec.rule) == label:
                break
        else:
            raise GenerationError(
                f"could not draw a bag with label {label} in {MAX_REJECTION_ROUNDS} rounds "
                f"(rule={spec.rule}, keys={spec.key_tokens}, sizes={spec.bag_size_range})"
            )
        records.append(Record(toks, int(label)))
    return records


# ---------------------------------------------------------------- noise injectors


def _check_count(n: int) -> None:
    if not 1 <= n <= 5:
        raise DataError(f"per-record token count must be in 1..5, got {n}")


def inject_feature_noise(records: Sequence[Record], vocabulary: Vocabulary, n: int, seed: int) -> list[Record]:
    """Change ``n`` tokens per record.

    ``min(n, len)`` tokens are removed and ``n`` tokens absent from the
    record are added, so short records grow to ``n`` instances and every
    record gains exactly ``n`` new elements.
    """
    _check_count(n)
    rng = np.random.default_rng(seed)
    universe = np.array(vocabulary.tokens, dtype=object)
    out = []
    for rec in records:
        candidates = universe[[t not in rec.instances for t in vocabulary.tokens]] if len(universe) else universe
        if len(candidates) < n:
            raise DataError(f"vocabulary offers {len(candidates)} replacement tokens, {n} needed")
        current = rec.tokens
        removed = set(rng.choice(len(current), min(n, len(current)), replace=False).tolist()) if current else set()
        added = rng.choice(candidates, n, replace=False)
        kept = [t for i, t in enumerate(current) if i not in removed]
        out.append(Record(kept + list(added), rec.label))
    return out


def inject_label_noise(records: Sequence[Record], ratio: float, seed: int) -> list[Record]:
    """Flip the labels of ``round(ratio * N)`` records chosen without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise DataError(f"label noise ratio must be in [0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    k = math.floor(ratio * len(records) + 0.5)
    flip = set(rng.choice(len(records), k, replace=False).tolist()) if k else set()
    return [Record(r.instances, 1 - r.label) if i in flip else r for i, r in enumerate(records)]


def delete_instances(records: Sequence[Record], n: int, seed: int) -> list[Record]:
    """Remove ``min(n, len)`` random tokens from each record (may leave it empty)."""
    _check_count(n)
    rng = np.random.default_rng(seed)
    out = []
    for rec in records:
        toks = rec.tokens
        drop = set(rng.choice(len(toks), min(n, len(toks)), replace=False).tolist()) if toks else set()
        out.append(Record([t for i, t in enumerate(toks) if i not in drop], rec.label))
    return out


# ---------------------------------------------------------------- stratification


def _class_counts(labels: np.ndarray) -> dict[int, int]:
    return {c: int((labels == c).sum()) for c in (0, 1)}


def stratified_folds(labels: Sequence[int], k: int, repetitions: int, seed: int) -> list[np.ndarray]:
    """One fold id per sample for each repetition.

    Each class is shuffled and dealt round-robin, so per-fold class counts
    differ by at most one.
    """
    labels = np.asarray(labels, dtype=np.int64)
    counts = _class_counts(labels)
    if k < 2:
        raise DataError(f"need at least 2 folds, got {k}")
    if min(counts.values()) < k:
        raise DataError(f"stratifying into {k} folds needs >= {k} samples per class; got {counts[1]} positive, {counts[0]} negative")
    out = []
    for rep in range(repetitions):
        rng = np.random.default_rng([seed, rep])
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in (0, 1)])
        folds = np.empty(len(labels), dtype=np.int64)
        folds[order] = np.arange(len(labels)) % k
        out.append(folds)
    return out


def stratified_holdout(labels: Sequence[int], fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Split indices into (train, holdout) with ``fraction`` of each class held out.

    Any class with at least two members contributes at least one holdout sample.
    """
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    held = []
    for c in (0, 1):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if len(idx) >= 2:
            held.extend(idx[: max(1, math.floor(fraction * len(idx) + 0.5))].tolist())
    held_mask = np.zeros(len(labels), dtype=bool)
    held_mask[held] = True
    return np.flatnonzero(~held_mask), np.flatnonzero(held_mask)
