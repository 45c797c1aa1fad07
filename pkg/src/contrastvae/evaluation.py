"""Full-ranking Recall/NDCG, subgroup reports, posterior diagnostics and the
robustness / lambda-sensitivity harnesses."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from contrastvae.data import (
    FREQUENCY_LABELS,
    LENGTH_LABELS,
    SplitDataset,
    assign_frequency_groups,
    assign_length_groups,
    corrupt_sequences,
    pad_batch,
)
from contrastvae.numerics import no_grad
from contrastvae.objective import sequence_kl

CUTOFFS = (20, 40)


def target_rank(scores: np.ndarray, target: int) -> int:
    """1-based rank of ``target``; ties go to the smaller item index."""
    s = scores[target]
    idx = np.arange(len(scores))
    return int(1 + np.sum(scores > s) + np.sum((scores == s) & (idx < target)))


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized :func:`target_rank` over a (B, N+1) score matrix."""
    targets = np.asarray(targets, dtype=np.int64)
    s = scores[np.arange(len(targets)), targets][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    return 1 + np.sum(scores > s, axis=1) + np.sum((scores == s) & (idx < targets[:, None]), axis=1)


def recall_at_n(scores: np.ndarray, target: int, n: int) -> int:
    return int(target_rank(scores, target) <= n)


def ndcg_at_n(scores: np.ndarray, target: int, n: int) -> float:
    r = target_rank(scores, target)
    return 1.0 / math.log2(r + 1) if r <= n else 0.0


def _metrics_from_ranks(ranks: np.ndarray) -> dict[str, float]:
    out = {}
    for n in CUTOFFS:
        hit = ranks <= n
        out[f"recall@{n}"] = float(hit.mean()) if len(ranks) else 0.0
        out[f"ndcg@{n}"] = float(np.where(hit, 1.0 / np.log2(ranks + 1), 0.0).mean()) if len(ranks) else 0.0
    return out


@dataclass
class UserResults:
    """Per-user outputs that reports are built from."""

    ranks: np.ndarray
    kl: np.ndarray  # sequence-level KL of the posterior
    variance: np.ndarray  # mean sigma^2 over valid positions and dimensions


@dataclass
class MetricsReport:
    view: str
    n_users: int
    overall: dict[str, float]
    frequency_groups: list[dict] = field(default_factory=list)
    length_groups: list[dict] = field(default_factory=list)
    diagnostics: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "view": self.view,
            "n_users": self.n_users,
            "overall": self.overall,
            "frequency_groups": self.frequency_groups,
            "length_groups": self.length_groups,
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def groups_csv(self, which: str = "frequency") -> str:
        """``group,metric,value,n_users`` rows, one per group and metric."""
        rows = self.frequency_groups if which == "frequency" else self.length_groups
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "metric", "value", "n_users"])
        for g in rows:
            for m in sorted(g["metrics"]):
                w.writerow([g["group"], m, repr(g["metrics"][m]), g["n_users"]])
        return buf.getvalue()

    def diagnostics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "mean_kl", "mean_variance", "recall@40"])
        for g in self.frequency_groups:
            w.writerow([g["group"], repr(g["mean_kl"]), repr(g["mean_variance"]), repr(g["metrics"]["recall@40"])])
        return buf.getvalue()

    def summary(self) -> str:
        o = self.overall
        return (
            f"{self.view}: users={self.n_users} recall@20={o['recall@20']:.4f} ndcg@20={o['ndcg@20']:.4f} "
            f"recall@40={o['recall@40']:.4f} ndcg@40={o['ndcg@40']:.4f}"
        )


def score_users(
    model,
    inputs: Sequence[np.ndarray],
    targets: np.ndarray,
    exclude_seen: bool = False,
    batch_size: int = 1024,
) -> UserResults:
    """Deterministic mu-path scoring of every user against all items."""
    T = model.config.max_len
    ranks, kls, variances = [], [], []
    with no_grad():
        for start in range(0, len(inputs), batch_size):
            chunk = inputs[start : start + batch_size]
            x = pad_batch(chunk, T)
            post, scores = model.infer(x)
            if exclude_seen:
                for b, s in enumerate(chunk):
                    seen = np.asarray(s, dtype=np.int64)
                    seen = seen[seen != targets[start + b]]
                    scores[b, seen] = -np.inf
            ranks.append(target_ranks(scores, targets[start : start + len(chunk)]))
            kls.append(sequence_kl(post.mu, post.sigma, post.valid).data.astype(np.float64))
            var = (post.sigma.data.astype(np.float64) ** 2) * post.valid[..., None]
            n_valid = np.maximum(post.valid.sum(axis=1), 1) * model.config.d
            variances.append(var.sum(axis=(1, 2)) / n_valid)
    if not ranks:
        return UserResults(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0))
    return UserResults(np.concatenate(ranks), np.concatenate(kls), np.concatenate(variances))


def build_report(
    view: str,
    res: UserResults,
    freq_labels: np.ndarray,
    len_labels: np.ndarray,
) -> MetricsReport:
    overall = _metrics_from_ranks(res.ranks)
    freq_rows = []
    for g, name in enumerate(FREQUENCY_LABELS):
        sel = freq_labels == g
        freq_rows.append(
            {
                "group": name,
                "n_users": int(sel.sum()),
                "metrics": _metrics_from_ranks(res.ranks[sel]),
                "mean_kl": float(res.kl[sel].mean()) if sel.any() else 0.0,
                "mean_variance": float(res.variance[sel].mean()) if sel.any() else 0.0,
            }
        )
    len_rows = []
    for g, name in enumerate(LENGTH_LABELS):
        sel = len_labels == g
        len_rows.append({"group": name, "n_users": int(sel.sum()), "metrics": _metrics_from_ranks(res.ranks[sel])})
    diag = {
        "mean_kl": float(res.kl.mean()) if len(res.kl) else 0.0,
        "mean_variance": float(res.variance.mean()) if len(res.variance) else 0.0,
    }
    return MetricsReport(view, int(len(res.ranks)), overall, freq_rows, len_rows, diag)


def evaluate(
    model,
    split: SplitDataset,
    view: str = "test",
    exclude_seen: bool = False,
    corrupt: tuple[str, float] | None = None,
    corrupt_seed: int = 0,
    batch_size: int = 1024,
) -> MetricsReport:
    """Rank all items for every user's held-out ``view`` target.

    ``corrupt=(mode, ratio)`` perturbs the model inputs (never the target);
    frequency/length groups always follow the uncorrupted split.
    """
    if model.config.n_items != split.n_items:
        raise ValueError(f"model has {model.config.n_items} items, split has {split.n_items}")
    inputs = split.inputs(view)
    if corrupt is not None and corrupt[1] > 0:
        inputs = corrupt_sequences(inputs, corrupt[0], corrupt[1], corrupt_seed, split.n_items)
    targets = split.targets(view)
    res = score_users(model, inputs, targets, exclude_seen, batch_size)
    return build_report(
        view,
        res,
        assign_frequency_groups(split, view).labels,
        assign_length_groups(split, view).labels,
    )


def robustness_sweep(
    model,
    split: SplitDataset,
    mode: str,
    ratios: Sequence[float],
    seed: int = 0,
) -> list[tuple[float, MetricsReport]]:
    """Evaluate on test inputs corrupted at each ratio. A ratio of 0 is the
    plain :func:`evaluate` path."""
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ValueError("corruption ratios must lie in [0, 1]")
    return [(float(r), evaluate(model, split, "test", corrupt=(mode, r), corrupt_seed=seed)) for r in ratios]


def lambda_sweep(split: SplitDataset, model_cfg, train_cfg, lambdas: Sequence[float]) -> list[dict]:
    """Train one model per InfoNCE weight; report test Recall@40."""
    import dataclasses

    from contrastvae.engine import train

    rows = []
    for lam in lambdas:
        if lam < 0:
            raise ValueError("lambda values must be >= 0")
        cfg = dataclasses.replace(model_cfg, lam=float(lam))
        result = train(split, cfg, train_cfg)
        rep = evaluate(result.model, split, "test")
        rows.append({"lambda": float(lam), "recall@40": rep.overall["recall@40"]})
    return rows
