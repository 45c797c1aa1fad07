import csv
import io
import math

import numpy as np
import pytest

from contrastvae import schemas
from contrastvae.config import ModelConfig
from contrastvae.data import assign_frequency_groups, pad_batch
from contrastvae.evaluation import (
    evaluate,
    ndcg_at_n,
    recall_at_n,
    robustness_sweep,
    target_rank,
    target_ranks,
)
from contrastvae.model import ContrastVAE
from contrastvae.numerics import no_grad
from contrastvae.objective import kl_loss


def sort_rank(scores, target):
    # stable sort on -score keeps lower indices first among ties
    order = np.argsort(-np.asarray(scores), kind="stable")
    return int(np.nonzero(order == target)[0][0]) + 1


def test_recall_examples():
    scores = np.array([-np.inf, 0.9, 0.1, 0.5])
    assert recall_at_n(scores, 3, 2) == 1
    assert recall_at_n(scores, 3, 1) == 0
    assert all(recall_at_n(scores, 1, n) == 1 for n in (1, 2, 3))


def test_ndcg_examples():
    scores = np.array([-np.inf, 3.0, 2.0, 1.0, 0.0])
    assert ndcg_at_n(scores, 1, 5) == 1.0
    assert ndcg_at_n(scores, 3, 3) == pytest.approx(0.5)
    s = np.arange(30, 0, -1).astype(float)
    assert target_rank(s, 20) == 21 and ndcg_at_n(s, 20, 20) == 0.0


def test_ties_go_to_lower_index():
    scores = np.array([-np.inf, 1.0, 1.0, 1.0])
    assert [target_rank(scores, i) for i in (1, 2, 3)] == [1, 2, 3]


def test_metrics_match_sort_oracle():
    rng = np.random.default_rng(0)
    scores = np.round(rng.standard_normal((1000, 501)), 2)  # rounding creates ties
    scores[:, 0] = -np.inf
    targets = rng.integers(1, 501, 1000)
    ranks = target_ranks(scores, targets)
    for u in range(1000):
        r = sort_rank(scores[u], targets[u])
        assert ranks[u] == r
        for n in (1, 20, 40):
            assert recall_at_n(scores[u], targets[u], n) == int(r <= n)
            assert ndcg_at_n(scores[u], targets[u], n) == (1 / math.log2(r + 1) if r <= n else 0.0)


class Oracle:
    """Stub model that always puts the true target first."""

    def __init__(self, split, view):
        self.config = ModelConfig(n_items=split.n_items, d=4, heads=1, max_len=20)
        self.lookup = {tuple(s): t for s, t in zip(split.inputs(view), split.targets(view))}
        self.inner = ContrastVAE(self.config)

    def infer(self, x):
        post, _ = self.inner.infer(x)
        scores = np.zeros((len(x), self.config.n_items + 1))
        scores[:, 0] = -np.inf
        for b, row in enumerate(x):
            scores[b, self.lookup[tuple(row[row != 0])]] = 1.0
        return post, scores


def test_perfect_model_scores_one(small_split):
    rep = evaluate(Oracle(small_split, "test"), small_split, "test")
    assert rep.overall["recall@20"] == 1.0 and rep.overall["ndcg@20"] == 1.0


@pytest.fixture
def model(small_split):
    return ContrastVAE(ModelConfig(n_items=small_split.n_items, d=8, heads=2, layers=1, max_len=12), seed=3)


def test_group_weighted_recall_equals_overall(model, small_split):
    rep = evaluate(model, small_split, "test")
    for rows in (rep.frequency_groups, rep.length_groups):
        assert len(rows) == 5
        total = sum(g["n_users"] for g in rows)
        assert total == rep.n_users
        for m in ("recall@20", "recall@40"):
            weighted = sum(g["metrics"][m] * g["n_users"] for g in rows) / total
            assert abs(weighted - rep.overall[m]) <= 1e-9


def test_evaluation_is_deterministic(model, small_split):
    assert evaluate(model, small_split).to_json() == evaluate(model, small_split).to_json()


def test_report_metrics_in_range_and_schema_valid(model, small_split):
    rep = evaluate(model, small_split, "validation")
    schemas.validate(rep.to_dict(), schemas.REPORT_SCHEMA)
    assert rep.diagnostics["mean_kl"] >= 0 and rep.diagnostics["mean_variance"] > 0


def test_diagnostic_kl_matches_objective(model, small_split):
    rep = evaluate(model, small_split, "test")
    x = pad_batch(small_split.inputs("test"), model.config.max_len)
    with no_grad():
        post = model.encode(x)
        expected = kl_loss(post.mu, post.sigma, post.valid).item()
    assert rep.diagnostics["mean_kl"] == pytest.approx(expected, rel=1e-6)


def test_frequency_groups_follow_targets(model, small_split):
    rep = evaluate(model, small_split, "test")
    counts = assign_frequency_groups(small_split, "test").counts
    assert [g["n_users"] for g in rep.frequency_groups] == counts


def test_groups_csv_layout(model, small_split):
    rep = evaluate(model, small_split)
    rows = list(csv.reader(io.StringIO(rep.groups_csv())))
    assert rows[0] == ["group", "metric", "value", "n_users"]
    by_metric = {}
    for r in rows[1:]:
        by_metric.setdefault(r[1], []).append(r)
    assert set(by_metric) == {"recall@20", "recall@40", "ndcg@20", "ndcg@40"}
    assert all(len(v) == 5 for v in by_metric.values())
    schemas.check_csv(rep.diagnostics_csv(), "diagnostics")


def test_exclude_seen_never_ranks_lower(model, small_split):
    a = evaluate(model, small_split, exclude_seen=False).overall["recall@20"]
    b = evaluate(model, small_split, exclude_seen=True).overall["recall@20"]
    assert b >= a


def test_robustness_ratio_zero_identity(model, small_split):
    curve = robustness_sweep(model, small_split, "delete", [0.0, 0.2, 0.4], seed=1)
    assert len(curve) == 3
    assert curve[0][1].to_json() == evaluate(model, small_split, "test").to_json()
    for mode in ("delete", "replace"):
        rep = evaluate(model, small_split, "test", corrupt=(mode, 0.5), corrupt_seed=2)
        assert rep.n_users == small_split.n_users


def test_robustness_rejects_bad_ratio(model, small_split):
    with pytest.raises(ValueError):
        robustness_sweep(model, small_split, "delete", [1.2])


def test_vocab_mismatch(small_split):
    m = ContrastVAE(ModelConfig(n_items=small_split.n_items + 1, d=4, heads=1, max_len=5))
    with pytest.raises(ValueError):
        evaluate(m, small_split)
