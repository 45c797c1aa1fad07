"""Tensor arithmetic, reverse-mode autodiff, Adam and gradient checking."""

from contrastvae.numerics.functional import (
    NEG_INF,
    clamp,
    concat,
    dropout,
    layer_normalize,
    linear,
    log_sigmoid,
    logsumexp_rows,
    mean_pool_rows,
    softmax_rows,
    take,
)
from contrastvae.numerics.gradcheck import GradCheckReport, check_tape_ops, finite_difference_check
from contrastvae.numerics.optim import Adam, AdamState, adam_step
from contrastvae.numerics.tensor import (
    ComputationTape,
    Function,
    Tensor,
    as_tensor,
    is_grad_enabled,
    no_grad,
)

__all__ = [
    "NEG_INF",
    "Adam",
    "AdamState",
    "ComputationTape",
    "Function",
    "GradCheckReport",
    "Tensor",
    "adam_step",
    "as_tensor",
    "check_tape_ops",
    "clamp",
    "concat",
    "dropout",
    "finite_difference_check",
    "is_grad_enabled",
    "layer_normalize",
    "linear",
    "log_sigmoid",
    "logsumexp_rows",
    "mean_pool_rows",
    "no_grad",
    "softmax_rows",
    "take",
]
