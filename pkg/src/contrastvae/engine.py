"""Training loop: seeded batching, two-branch forward, Adam, early stopping,
checkpointing and resumption."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from contrastvae.checkpoint import Checkpoint, check_params_match, load_checkpoint, save_checkpoint
from contrastvae.config import ModelConfig, TrainConfig
from contrastvae.data import SplitDataset, pad_or_truncate
from contrastvae.errors import CheckpointError, NumericError
from contrastvae.evaluation import evaluate
from contrastvae.model import ContrastVAE, Noise, augment_second_view
from contrastvae.numerics import AdamState, Tensor, adam_step
from contrastvae.objective import LossBreakdown, alpha_regularizer, ce_loss, infonce_loss, kl_loss, total_loss

log = logging.getLogger(__name__)

LOG_FILE = "train_log.jsonl"
BEST_CKPT = "best.ckpt"
LAST_CKPT = "last.ckpt"


class TrainingDiverged(NumericError):
    """Raised when a loss or gradient turns non-finite mid-training."""


@dataclass
class TrainState:
    epoch: int = 0
    best_metric: float = -math.inf
    best_epoch: int = 0
    bad_evals: int = 0
    stopped_early: bool = False

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["best_metric"] = None if self.best_metric == -math.inf else self.best_metric
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        d = dict(d)
        if d.get("best_metric") is None:
            d["best_metric"] = -math.inf
        return cls(**d)


@dataclass
class TrainResult:
    model: ContrastVAE  # parameters of the best validation epoch
    last_model: ContrastVAE
    state: TrainState
    log: list[dict] = field(default_factory=list)


def make_examples(seqs: list[np.ndarray], T: int) -> tuple[np.ndarray, np.ndarray]:
    """Shifted next-item pairs: input x_1..x_{n-1}, target x_2..x_n, left-padded.
    Targets at padded input positions are zeroed so they carry no loss."""
    x = np.stack([pad_or_truncate(s[:-1], T) for s in seqs])
    y = np.stack([pad_or_truncate(s[1:], T) for s in seqs])
    y[x == 0] = 0
    return x, y


def sample_negatives(targets: np.ndarray, n_items: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform negative per position, resampled while it equals the target."""
    neg = rng.integers(1, n_items + 1, size=targets.shape)
    if n_items < 2:
        return neg
    clash = neg == targets
    while clash.any():
        neg[clash] = rng.integers(1, n_items + 1, size=int(clash.sum()))
        clash = neg == targets
    return neg


def batch_loss(
    model: ContrastVAE,
    seqs: list[np.ndarray],
    rng: np.random.Generator,
    train_cfg: TrainConfig,
    beta: float | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Both branches on one batch of training prefixes; all randomness from ``rng``."""
    cfg = model.config
    T, N = cfg.max_len, cfg.n_items
    x1, y1 = make_examples(seqs, T)
    neg1 = sample_negatives(y1, N, rng)
    plan = augment_second_view(seqs, cfg.augmentation, cfg, rng)
    if plan.inputs is not None:
        x2, y2 = make_examples(plan.inputs, T)
    else:
        x2, y2 = x1, y1
    neg2 = sample_negatives(y2, N, rng)

    noise1 = Noise(rng, cfg.dropout_p)
    post1 = model.encode(x1, noise1, branch=1)
    s1 = model.reparameterize(post1, rng)
    D1 = model.decode(s1.z, post1.valid, noise1, branch=1)

    noise2 = Noise(rng, cfg.dropout_p, plan.ma_p)
    post2 = model.encode(x2, noise2, branch=2)
    s2 = model.reparameterize(post2, rng, variational=plan.variational)
    D2 = model.decode(s2.z, post2.valid, noise2, branch=2)

    item_emb = model.params["item_emb"]
    ce1 = ce_loss(D1, y1, neg1, item_emb)
    ce2 = ce_loss(D2, y2, neg2, item_emb) if (y2 != 0).any() else Tensor(np.zeros((), dtype=model.dtype))
    kl1 = kl_loss(post1.mu, post1.sigma, post1.valid, train_cfg.kl_reduction)
    kl2 = kl_loss(post2.mu, post2.sigma, post2.valid, train_cfg.kl_reduction)
    lam = 0.0 if train_cfg.disable_infonce else cfg.lam
    mi = infonce_loss(s1.pooled, s2.pooled, cfg.tau) if lam > 0 else None
    areg = None
    if plan.variational and not train_cfg.disable_alpha_reg:
        areg = alpha_regularizer(model.alpha())
    return total_loss(ce1, ce2, kl1, kl2, mi, areg, lam, train_cfg.beta if beta is None else beta)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values()))
    if math.isfinite(norm) and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            p.grad *= scale
    return norm


def _freeze_padding(model: ContrastVAE) -> None:
    g = model.params["item_emb"].grad
    if g is not None:
        g[0] = 0.0


def train(
    split: SplitDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Train until ``max_epochs`` or until validation NDCG@20 has not improved
    for ``patience`` consecutive evaluations.

    With ``out_dir`` set, writes ``train_log.jsonl`` (one record per epoch),
    ``best.ckpt`` (best validation epoch) and ``last.ckpt`` (resumable state
    at the end of the latest epoch).
    """
    model_cfg = dataclasses.replace(model_cfg, n_items=model_cfg.n_items or split.n_items)
    if model_cfg.n_items != split.n_items:
        raise ValueError(f"model configured for {model_cfg.n_items} items, split has {split.n_items}")
    train_cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    model = ContrastVAE(model_cfg, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed + 1)
    adam = AdamState(lr=train_cfg.lr)
    state = TrainState()
    best_params = {k: p.data.copy() for k, p in model.params.items()}
    records: list[dict] = []

    if resume_from is not None:
        state, best_params, records = _restore(resume_from, model, adam, rng)
        # resuming follows the learning rate / schedule of the new config
        adam.lr = train_cfg.lr

    eligible = [u for u in range(split.n_users) if len(split.train_prefix(u)) >= 2]
    if not eligible:
        raise ValueError("no user has a training prefix of length >= 2")
    log_fh = None
    if out is not None:
        log_fh = open(out / LOG_FILE, "a" if resume_from is not None else "w", encoding="utf-8")

    try:
        while state.epoch < train_cfg.max_epochs and not state.stopped_early:
            epoch = state.epoch + 1
            t0 = time.perf_counter()
            beta = train_cfg.beta
            if train_cfg.beta_warmup > 0:
                beta *= min(1.0, epoch / train_cfg.beta_warmup)
            order = rng.permutation(eligible)
            sums = np.zeros(7)
            n_batches = 0
            for start in range(0, len(order), train_cfg.batch_size):
                seqs = [split.train_prefix(int(u)) for u in order[start : start + train_cfg.batch_size]]
                for p in model.params.values():
                    p.zero_grad()
                try:
                    loss, parts = batch_loss(model, seqs, rng, train_cfg, beta)
                    loss.backward()
                    _freeze_padding(model)
                    if train_cfg.grad_clip:
                        clip_gradients(model.params, train_cfg.grad_clip)
                    adam_step(adam, model.params, {k: p.grad for k, p in model.params.items()})
                except NumericError as exc:
                    raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
                model.project_alpha()
                sums += list(dataclasses.astuple(parts))
                n_batches += 1

            means = LossBreakdown(*(sums / n_batches))
            rec: dict = {"epoch": epoch, **means.to_log()}
            if "log_alpha" in model.params:
                rec["alpha"] = float(model.alpha().item())
            state.epoch = epoch
            if epoch % train_cfg.eval_every == 0:
                rep = evaluate(model, split, "validation", batch_size=train_cfg.eval_batch_size)
                metric = rep.overall["ndcg@20"]
                rec["val_recall@20"] = rep.overall["recall@20"]
                rec["val_ndcg@20"] = metric
                if metric > state.best_metric:
                    state.best_metric, state.best_epoch, state.bad_evals = metric, epoch, 0
                    best_params = {k: p.data.copy() for k, p in model.params.items()}
                    if out is not None:
                        save_checkpoint(_snapshot(model, best_params, train_cfg, adam, rng, state), out / BEST_CKPT)
                else:
                    state.bad_evals += 1
                    if state.bad_evals >= train_cfg.patience:
                        state.stopped_early = True
            else:
                rec["val_recall@20"] = None
                rec["val_ndcg@20"] = None
            if train_cfg.log_wall_time:
                rec["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
            records.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
                save_checkpoint(_snapshot(model, None, train_cfg, adam, rng, state), out / LAST_CKPT)
            log.info("epoch %d total=%.4f val_ndcg@20=%s", epoch, rec["total"], rec["val_ndcg@20"])
    finally:
        if log_fh is not None:
            log_fh.close()

    if state.best_metric == -math.inf:
        best_params = {k: p.data.copy() for k, p in model.params.items()}
        if out is not None:
            save_checkpoint(_snapshot(model, best_params, train_cfg, adam, rng, state), out / BEST_CKPT)
    best = ContrastVAE(model_cfg, {k: Tensor(v, requires_grad=True, name=k) for k, v in best_params.items()})
    return TrainResult(best, model, state, records)


def _snapshot(model, params, train_cfg, adam: AdamState, rng, state: TrainState) -> Checkpoint:
    return Checkpoint(
        model_config=model.config,
        params=params if params is not None else {k: p.data for k, p in model.params.items()},
        train_config=train_cfg,
        adam={"t": adam.t, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        adam_m=dict(adam.m),
        adam_v=dict(adam.v),
        rng_state=rng.bit_generator.state,
        train_state=state.to_dict(),
    )


def _restore(path, model: ContrastVAE, adam: AdamState, rng: np.random.Generator):
    """Load a ``last.ckpt`` into ``model``/``adam``/``rng``; returns the train
    state, best parameters and any existing log records."""
    path = Path(path)
    ckpt = load_checkpoint(path)
    if ckpt.train_state is None or ckpt.adam is None or ckpt.rng_state is None:
        raise CheckpointError(f"{path}: not a resumable checkpoint")
    if dataclasses.asdict(ckpt.model_config) != dataclasses.asdict(model.config):
        diff = {
            k: (v, getattr(model.config, k))
            for k, v in dataclasses.asdict(ckpt.model_config).items()
            if getattr(model.config, k) != v
        }
        raise CheckpointError(f"{path}: model config differs from checkpoint: {diff}")
    check_params_match(model.params, ckpt.params)
    for k, p in model.params.items():
        p.data = ckpt.params[k].copy()
    adam.t = int(ckpt.adam["t"])
    adam.beta1, adam.beta2, adam.eps = ckpt.adam["beta1"], ckpt.adam["beta2"], ckpt.adam["eps"]
    adam.m = {k: v.copy() for k, v in ckpt.adam_m.items()}
    adam.v = {k: v.copy() for k, v in ckpt.adam_v.items()}
    rng.bit_generator.state = ckpt.rng_state
    state = TrainState.from_dict(ckpt.train_state)
    best = {k: p.data.copy() for k, p in model.params.items()}
    best_path = path.parent / BEST_CKPT
    if best_path.exists():
        best = {k: v.copy() for k, v in load_checkpoint(best_path).params.items()}
    records = []
    log_path = path.parent / LOG_FILE
    if log_path.exists():
        records = [json.loads(ln) for ln in log_path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        records = [r for r in records if r["epoch"] <= state.epoch]
        log_path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return state, best, records
