"""Loss terms of the two-view objective, all in minimization form.

    total = ce + ce' + beta * (kl + kl') + lam * infonce - [VA] * alpha_reg

``ce``/``kl`` are the per-branch negative ELBO pieces, ``infonce`` is the
contrastive estimate of the mutual information between the two branches'
pooled latents, and ``alpha_reg`` is the variational-dropout term (a negative
KL approximation, hence subtracted).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from contrastvae.errors import DomainError, NumericError
from contrastvae.numerics import NEG_INF, Tensor, as_tensor, clamp, concat, log_sigmoid, logsumexp_rows, take

log = logging.getLogger(__name__)

# cubic fit of the negative KL for Gaussian dropout as a function of alpha
ALPHA_C1, ALPHA_C2, ALPHA_C3 = 1.161, -1.502, 0.586


@dataclass
class LossBreakdown:
    ce: float = 0.0
    ce2: float = 0.0
    kl: float = 0.0
    kl2: float = 0.0
    infonce: float = 0.0
    alpha_reg: float = 0.0
    total: float = 0.0

    def to_log(self) -> dict[str, float]:
        d = asdict(self)
        return {
            "ce": d["ce"],
            "ce'": d["ce2"],
            "kl": d["kl"],
            "kl'": d["kl2"],
            "infonce": d["infonce"],
            "alpha_reg": d["alpha_reg"],
            "total": d["total"],
        }


def ce_loss(D: Tensor, targets: np.ndarray, negatives: np.ndarray, item_emb: Tensor) -> Tensor:
    """Binary cross-entropy of the true next item against one sampled negative.

    Positions with ``targets == 0`` are padding and carry no weight; the
    result is the mean over the remaining positions of
    ``-[log s(D.M_pos) + log(1 - s(D.M_neg))]``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    valid = targets != 0
    n = int(valid.sum())
    if n == 0:
        raise DomainError("ce_loss: batch has no valid target positions")
    negatives = np.where(valid, negatives, 0)
    pos = (D * take(item_emb, targets)).sum(axis=-1)
    neg = (D * take(item_emb, negatives)).sum(axis=-1)
    per = -(log_sigmoid(pos) + log_sigmoid(-neg))
    w = as_tensor(valid.astype(D.dtype) / n, dtype=D.dtype)
    return (per * w).sum()


def sequence_kl(mu: Tensor, sigma: Tensor, valid: np.ndarray) -> Tensor:
    """Per-sequence KL(N(mu, sigma^2) || N(0, I)) summed over valid positions
    and latent dimensions; shape (B,)."""
    w = as_tensor(np.asarray(valid)[..., None].astype(mu.dtype), dtype=mu.dtype)
    var = sigma * sigma
    elem = (var + mu * mu - 1.0 - 2.0 * sigma.log()) * 0.5
    return (elem * w).sum(axis=(1, 2))


KL_REDUCTIONS = ("sequence", "position", "element")


def kl_loss(mu: Tensor, sigma: Tensor, valid: np.ndarray, reduction: str = "sequence") -> Tensor:
    """Batch mean of :func:`sequence_kl` (``reduction="sequence"``).

    ``"position"`` divides by the number of valid positions in the batch,
    ``"element"`` additionally by the latent width, putting the KL on the
    same per-position scale as :func:`ce_loss`.
    """
    if reduction == "sequence":
        return sequence_kl(mu, sigma, valid).mean()
    if reduction not in KL_REDUCTIONS:
        raise ValueError(f"reduction must be one of {KL_REDUCTIONS}")
    n = max(int(np.asarray(valid).sum()), 1)
    if reduction == "element":
        n *= mu.shape[-1]
    return sequence_kl(mu, sigma, valid).sum() * (1.0 / n)


def infonce_loss(z1: Tensor, z2: Tensor, tau: float = 1.0) -> Tensor:
    """Contrastive loss over a batch of M paired views.

    Row u's positive is z1[u].z2[u]; its denominator holds every cross-view
    pair z1[u].z2[v] and every same-view pair z1[u].z1[v] with v != u.
    """
    if tau <= 0:
        raise DomainError("tau must be > 0")
    M = z1.shape[0]
    cross = (z1 @ z2.transpose()) * (1.0 / tau)
    same = (z1 @ z1.transpose()) * (1.0 / tau)
    logits = concat([cross, same], axis=1)
    mask = np.zeros((M, 2 * M), dtype=z1.dtype)
    mask[np.arange(M), M + np.arange(M)] = NEG_INF
    lse = logsumexp_rows(logits, mask)
    idx = np.arange(M)
    # positive taken from the same matrix the denominator uses, so lse >= pos exactly
    pos = cross[idx, idx]
    return (lse - pos).mean()


def alpha_regularizer(alpha: Tensor | float) -> Tensor:
    """0.5 log a + 1.161 a - 1.502 a^2 + 0.586 a^3 for a in (0, 1]."""
    if not isinstance(alpha, Tensor):
        a = float(alpha)
        if not 1e-4 <= a <= 1.0:
            log.warning("alpha=%g outside [1e-4, 1]; clamping", a)
        alpha = Tensor(np.array(min(max(a, 1e-4), 1.0), dtype=np.float64))
    elif np.any(alpha.data < 1e-4) or np.any(alpha.data > 1.0):
        log.warning("alpha outside [1e-4, 1]; clamping")
        alpha = clamp(alpha, 1e-4, 1.0)
    a2 = alpha * alpha
    return alpha.log() * 0.5 + alpha * ALPHA_C1 + a2 * ALPHA_C2 + a2 * alpha * ALPHA_C3


def total_loss(
    ce: Tensor,
    ce2: Tensor,
    kl: Tensor,
    kl2: Tensor,
    infonce: Tensor | None,
    alpha_reg: Tensor | None,
    lam: float,
    beta: float = 1.0,
) -> tuple[Tensor, LossBreakdown]:
    """Compose the minimized scalar. ``infonce``/``alpha_reg`` of ``None``
    mean the term is switched off (logged as 0)."""
    total = ce + ce2 + (kl + kl2) * beta
    if infonce is not None and lam != 0:
        total = total + infonce * lam
    if alpha_reg is not None:
        total = total - alpha_reg
    parts = LossBreakdown(
        ce=ce.item(),
        ce2=ce2.item(),
        kl=kl.item(),
        kl2=kl2.item(),
        infonce=0.0 if infonce is None else infonce.item(),
        alpha_reg=0.0 if alpha_reg is None else alpha_reg.item(),
        total=total.item(),
    )
    if not all(math.isfinite(v) for v in asdict(parts).values()):
        raise NumericError(f"non-finite loss component: {parts}")
    return total, parts
