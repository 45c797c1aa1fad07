"""Thin functional wrappers over the tensor ops."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from contrastvae.numerics.tensor import (
    NEG_INF,
    Clamp,
    Concat,
    LayerNorm,
    LogSigmoid,
    LogSumExpRows,
    MeanPoolRows,
    SoftmaxRows,
    Take,
    Tensor,
    as_tensor,
)


def softmax_rows(x: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Row softmax; ``additive_mask`` holds 0 (allowed) or ``NEG_INF`` entries."""
    return SoftmaxRows.apply(x, mask=None if additive_mask is None else np.asarray(additive_mask, dtype=x.dtype))


def logsumexp_rows(x: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    return LogSumExpRows.apply(x, mask=None if additive_mask is None else np.asarray(additive_mask, dtype=x.dtype))


def layer_normalize(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gain, bias, eps=eps)


def mean_pool_rows(x: Tensor, weight: np.ndarray | None = None) -> Tensor:
    """Mean over the row axis; ``weight`` (0/1 per row) excludes padding."""
    return MeanPoolRows.apply(x, weight=None if weight is None else np.asarray(weight, dtype=x.dtype))


def log_sigmoid(x: Tensor) -> Tensor:
    return LogSigmoid.apply(x)


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    return Clamp.apply(x, lo=lo, hi=hi)


def take(table: Tensor, index: np.ndarray) -> Tensor:
    return Take.apply(table, index=np.asarray(index, dtype=np.int64))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*xs, axis=axis)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = x @ weight
    return y if bias is None else y + bias


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted Bernoulli dropout. A ``None`` rng or ``p == 0`` is the identity
    and draws no random numbers."""
    if rng is None or p <= 0:
        return x
    keep = rng.random(x.shape) >= p
    return x * as_tensor(keep.astype(x.dtype) / (1.0 - p), dtype=x.dtype)


__all__ = [
    "NEG_INF",
    "clamp",
    "concat",
    "dropout",
    "layer_normalize",
    "linear",
    "log_sigmoid",
    "logsumexp_rows",
    "mean_pool_rows",
    "softmax_rows",
    "take",
]
