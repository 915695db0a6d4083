"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations needed by the bag classifier forward pass are provided. Every
operation is a plain function; when at least one input is attached to a
:class:`Tape`, the result is recorded on that tape together with a closure
computing the vector-Jacobian product. Inputs without a tape are constants.

There is no implicit broadcasting. The only shape-relaxed operations are
``scale`` (scalar constant), ``add_bias`` (one row vector added to every row)
and ``matmul`` with a shared right-hand matrix across leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateBagError, DimensionError, VocabularyError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    kind: str
    inputs: tuple[int | None, ...]
    value: np.ndarray
    backward: BackwardFn | None = None


@dataclass
class Tape:
    """Append-only record of operations, replayed in reverse by :meth:`backward`."""

    nodes: list[Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)

    def variable(self, values, name: str | None = None) -> "Tensor":
        """Register a leaf tensor whose gradient should be tracked."""
        data = np.array(values, dtype=np.float64)
        node_id = self._append(Node(name or "variable", (), data))
        return Tensor(data, self, node_id)

    def _append(self, node: Node) -> int:
        for i in node.inputs:
            if i is not None and not 0 <= i < len(self.nodes):
                raise ContractError(f"node input {i} does not precede node {len(self.nodes)}")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def backward(self, root: "Tensor") -> dict[int, np.ndarray]:
        """Accumulate d(root)/d(node) for every node on the tape.

        Nodes that do not influence ``root`` receive zero gradients.
        """
        if root.tape is not self or root.node_id is None:
            raise ContractError("root is not recorded on this tape")
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
        for node_id in range(root.node_id, -1, -1):
            g = grads.get(node_id)
            node = self.nodes[node_id]
            if g is None or node.backward is None:
                continue
            for parent, pg in zip(node.inputs, node.backward(g)):
                if parent is None or pg is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg
        for node_id, node in enumerate(self.nodes):
            if node_id not in grads:
                grads[node_id] = np.zeros_like(node.value)
        self.gradients = grads
        return grads


class Tensor:
    """A float64 array, optionally bound to a tape node."""

    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 1000

    def __init__(self, values, tape: Tape | None = None, node_id: int | None = None):
        self.data = np.asarray(values, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def grad(self) -> np.ndarray:
        """Gradient from the most recent ``backward`` on this tensor's tape."""
        if self.tape is None or self.node_id is None:
            raise ContractError("constant tensors carry no gradient")
        return self.tape.gradients[self.node_id]

    def __repr__(self) -> str:
        tag = "const" if self.node_id is None else f"node={self.node_id}"
        return f"Tensor(shape={self.shape}, {tag})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return multiply(self, as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, inputs: Sequence[Tensor], value: np.ndarray, backward: BackwardFn) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("operands belong to different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(value)
    node_id = tape._append(Node(kind, tuple(t.node_id for t in inputs), value, backward))
    return Tensor(value, tape, node_id)


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def _unbatch(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # shared right operand: sum the batch contributions
    return g.reshape(-1, *shape).sum(axis=0) if g.shape != shape else g


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain matrix shared by every leading batch index of
    ``a`` or has exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} disagree")
    av, bv = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if shared:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), av @ bv, backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {x.shape}")
    return _record("transpose", (x,), np.swapaxes(x.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("multiply", a, b)
    av, bv = a.data, b.data
    return _record("multiply", (a, b), av * bv, lambda g: (g * bv, g * av))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (x,), x.data * c, lambda g: (g * c,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector of length ``x.shape[-1]`` to every row of ``x``."""
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match rows of {x.shape}")
    return _record("add_bias", (x, bias), x.data + bias.data, lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def elementwise(kind: str, *operands, constant: float | None = None) -> Tensor:
    """Dispatch by name: add, multiply, tanh, sigmoid, scale."""
    if kind == "add":
        return add(*operands)
    if kind == "multiply":
        return multiply(*operands)
    if kind == "tanh":
        return tanh(*operands)
    if kind == "sigmoid":
        return sigmoid(*operands)
    if kind == "scale":
        if constant is None:
            raise ContractError("scale needs a constant")
        return scale(operands[0], constant)
    raise ContractError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- reductions


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def reduce_sum(x: Tensor, axis: int) -> Tensor:
    axis = _axis(x, axis)
    shape = x.shape
    return _record(
        "reduce_sum",
        (x,),
        x.data.sum(axis=axis),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def reduce_max(x: Tensor, axis: int, mask=None) -> Tensor:
    """Maximum along ``axis`` over positions where ``mask`` is true.

    The gradient flows to the first maximising position only.
    """
    axis = _axis(x, axis)
    xv = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise DegenerateBagError("reduce_max over a row with no valid entries")
        xv = np.where(mask, xv, -np.inf)
    idx = np.expand_dims(np.argmax(xv, axis=axis), axis)
    value = np.take_along_axis(xv, idx, axis=axis).squeeze(axis)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _record("reduce_max", (x,), value, backward)


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis restricted to positions where ``mask`` holds.

    Masked positions get probability exactly zero and receive no gradient.
    ``mask`` must broadcast to ``logits.shape``.
    """
    try:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    except ValueError:
        raise DimensionError(f"mask shape {np.shape(mask)} does not fit logits {logits.shape}") from None
    if not mask.any(axis=-1).all():
        raise DegenerateBagError("softmax row with every position masked")
    z = np.where(mask, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("masked_softmax", (logits,), p, backward)


# ---------------------------------------------------------------- structure


def gather_rows(table: Tensor, indices) -> Tensor:
    """Embedding lookup: ``out[..., :] = table[indices[...], :]``."""
    if table.ndim != 2:
        raise DimensionError(f"gather_rows needs a 2-D table, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        bad = idx[(idx < 0) | (idx >= table.shape[0])][0]
        raise VocabularyError(f"index {bad} outside vocabulary of {table.shape[0]} rows")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _record("gather_rows", (table,), table.data[idx], backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ContractError("concat of nothing")
    axis = _axis(tensors[0], axis)
    values = [t.data for t in tensors]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]
    return _record("concat", tuple(tensors), out, lambda g: tuple(np.split(g, splits, axis=axis)))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- loss

PROB_CLAMP = 1e-12


def binary_cross_entropy(probabilities: Tensor, labels) -> Tensor:
    """Mean of -[y ln p + (1-y) ln(1-p)], with p clamped to [1e-12, 1-1e-12].

    Clamped entries contribute no gradient.
    """
    y = np.asarray(labels, dtype=np.float64)
    if probabilities.shape != y.shape:
        raise DimensionError(f"bce: probabilities {probabilities.shape} vs labels {y.shape}")
    if y.size == 0:
        raise ContractError("bce on an empty batch")
    p = np.clip(probabilities.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (probabilities.data >= PROB_CLAMP) & (probabilities.data <= 1.0 - PROB_CLAMP)
    n = y.size
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))

    def backward(g):
        return (g * np.where(inside, (p - y) / (p * (1.0 - p)), 0.0) / n,)

    return _record("bce", (probabilities,), np.asarray(loss), backward)
