"""The two-branch contrastive VAE network.

Each stack (mean encoder, scale encoder, decoder) is a pre-norm causal
self-attention transformer: ``h += drop(attn(LN(h)))``, ``h += drop(ffn(LN(h)))``
per layer and a final LN. Position ``t`` only ever sees positions ``<= t``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from contrastvae.config import ModelConfig
from contrastvae.errors import NumericError
from contrastvae.numerics import (
    NEG_INF,
    Tensor,
    as_tensor,
    clamp,
    dropout,
    layer_normalize,
    linear,
    mean_pool_rows,
    softmax_rows,
    take,
)

log = logging.getLogger(__name__)

SIGMA_MIN, SIGMA_MAX = 1e-3, 10.0
ALPHA_MIN, ALPHA_MAX = 1e-4, 1.0
STACKS = ("enc_mu", "enc_sigma", "dec")


@dataclass
class PosteriorParams:
    mu: Tensor  # (B, T, d)
    sigma: Tensor  # (B, T, d), strictly positive
    valid: np.ndarray  # (B, T) bool, False on padding


@dataclass
class LatentSample:
    z: Tensor  # (B, T, d)
    pooled: Tensor  # (B, d): mean of z over valid positions


@dataclass
class Noise:
    """Stochasticity for one forward pass. ``rng=None`` means fully deterministic."""

    rng: np.random.Generator | None = None
    dropout_p: float = 0.0
    ma_p: float = 0.0  # extra Bernoulli mask on every encoder layer's attention input


@dataclass
class ViewPlan:
    """How the second branch differs from the first."""

    inputs: np.ndarray | None = None  # replacement index sequences (DA), else None
    variational: bool = False  # scale the sampling noise by the learnable alpha (VA)
    ma_p: float = 0.0  # model augmentation dropout rate (MA)


def attention_mask(valid: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Additive (B, 1, T, T) mask: query t may attend key s iff s <= t and s is
    a real item (a padding query still attends itself so no row is empty)."""
    T = valid.shape[-1]
    causal = np.tril(np.ones((T, T), dtype=bool))
    allowed = causal[None] & (valid[:, None, :] | np.eye(T, dtype=bool)[None])
    return np.where(allowed, 0.0, NEG_INF).astype(dtype)[:, None]


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, T = cfg.d, cfg.max_len
    std = 1.0 / math.sqrt(d)
    raw: dict[str, np.ndarray] = {}
    item = rng.normal(0.0, std, (cfg.n_items + 1, d))
    item[0] = 0.0
    raw["item_emb"] = item
    raw["pos_emb"] = rng.normal(0.0, std, (T, d))
    for branch in ("",) if cfg.share_branches else ("", "b2."):
        for stack in STACKS:
            pre = f"{branch}{stack}"
            for l in range(cfg.layers):
                raw[f"{pre}.{l}.ln1.g"] = np.ones(d)
                raw[f"{pre}.{l}.ln1.b"] = np.zeros(d)
                for w in ("wq", "wk", "wv"):
                    raw[f"{pre}.{l}.attn.{w}"] = rng.normal(0.0, std, (d, d))
                raw[f"{pre}.{l}.ln2.g"] = np.ones(d)
                raw[f"{pre}.{l}.ln2.b"] = np.zeros(d)
                raw[f"{pre}.{l}.ffn.w1"] = rng.normal(0.0, std, (d, d))
                raw[f"{pre}.{l}.ffn.b1"] = np.zeros(d)
                raw[f"{pre}.{l}.ffn.w2"] = rng.normal(0.0, std, (d, d))
                raw[f"{pre}.{l}.ffn.b2"] = np.zeros(d)
            raw[f"{pre}.ln_f.g"] = np.ones(d)
            raw[f"{pre}.ln_f.b"] = np.zeros(d)
            if stack != "dec":
                raw[f"{pre}.head.w"] = rng.normal(0.0, std, (d, d))
                raw[f"{pre}.head.b"] = np.zeros(d)
    if cfg.augmentation == "VA":
        raw["log_alpha"] = np.array(cfg.log_alpha_init)
    return {k: Tensor(v.astype(np.float32), requires_grad=True, name=k) for k, v in raw.items()}


class ContrastVAE:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        config.validate()
        if config.n_items < 1:
            raise ValueError("ModelConfig.n_items must be set from the data")
        self.config = config
        self.params = params if params is not None else init_params(config, np.random.default_rng(seed))

    # -- utilities ---------------------------------------------------------------
    @property
    def dtype(self):
        return self.params["item_emb"].dtype

    def astype(self, dtype) -> "ContrastVAE":
        params = {k: Tensor(p.data.astype(dtype), requires_grad=True, name=k) for k, p in self.params.items()}
        return ContrastVAE(self.config, params)

    def copy(self) -> "ContrastVAE":
        return self.astype(self.dtype)

    def _p(self, name: str, branch: int) -> Tensor:
        if branch == 2 and not self.config.share_branches:
            return self.params[f"b2.{name}"]
        return self.params[name]

    def alpha(self) -> Tensor:
        """Variational-dropout rate, clamped to (ALPHA_MIN, ALPHA_MAX]."""
        return clamp(self.params["log_alpha"].exp(), ALPHA_MIN, ALPHA_MAX)

    def project_alpha(self) -> None:
        """Keep the raw log-alpha inside the clamp region after an update so it
        never gets stuck where the clamp has zero gradient."""
        if "log_alpha" in self.params:
            la = self.params["log_alpha"].data
            np.clip(la, math.log(ALPHA_MIN) + 1e-6, math.log(ALPHA_MAX), out=la)

    # -- network pieces ----------------------------------------------------------
    def embed(self, x: np.ndarray) -> Tensor:
        """Row t is item_emb[x_t] + pos_emb[t]; padding rows are pos_emb[t]."""
        x = np.asarray(x, dtype=np.int64)
        T = self.config.max_len
        if x.shape[-1] != T:
            raise ValueError(f"expected sequences of length {T}, got {x.shape[-1]}")
        items = take(self.params["item_emb"], x)
        keep = as_tensor((x != 0)[..., None].astype(self.dtype), dtype=self.dtype)
        return items * keep + self.params["pos_emb"]

    def _attention(self, h: Tensor, pre: str, mask: np.ndarray, branch: int) -> Tensor:
        B, T, d = h.shape
        H = self.config.heads
        dh = d // H

        def split(w):
            return (h @ self._p(f"{pre}.{w}", branch)).reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q, k, v = split("wq"), split("wk"), split("wv")
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        att = softmax_rows(scores, mask)
        return (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)

    def _stack(self, h: Tensor, stack: str, mask: np.ndarray, noise: Noise, branch: int, ma: bool) -> Tensor:
        p = lambda name: self._p(name, branch)  # noqa: E731
        for l in range(self.config.layers):
            pre = f"{stack}.{l}"
            try:
                a = layer_normalize(h, p(f"{pre}.ln1.g"), p(f"{pre}.ln1.b"))
                if ma:
                    a = dropout(a, noise.ma_p, noise.rng)
                h = h + dropout(self._attention(a, f"{pre}.attn", mask, branch), noise.dropout_p, noise.rng)
                f = layer_normalize(h, p(f"{pre}.ln2.g"), p(f"{pre}.ln2.b"))
                f = linear(linear(f, p(f"{pre}.ffn.w1"), p(f"{pre}.ffn.b1")).relu(), p(f"{pre}.ffn.w2"), p(f"{pre}.ffn.b2"))
                h = h + dropout(f, noise.dropout_p, noise.rng)
            except NumericError as exc:
                raise NumericError(f"{stack} layer {l}: {exc}") from exc
        return layer_normalize(h, p(f"{stack}.ln_f.g"), p(f"{stack}.ln_f.b"))

    def encode(self, x: np.ndarray, noise: Noise | None = None, branch: int = 1) -> PosteriorParams:
        noise = noise or Noise()
        x = np.asarray(x, dtype=np.int64)
        valid = x != 0
        mask = attention_mask(valid, self.dtype)
        e = dropout(self.embed(x), noise.dropout_p, noise.rng)
        ma = noise.ma_p > 0
        p = lambda name: self._p(name, branch)  # noqa: E731
        mu = linear(self._stack(e, "enc_mu", mask, noise, branch, ma), p("enc_mu.head.w"), p("enc_mu.head.b"))
        raw = linear(self._stack(e, "enc_sigma", mask, noise, branch, ma), p("enc_sigma.head.w"), p("enc_sigma.head.b"))
        # the scale head predicts log sigma^2
        sigma = clamp((raw * 0.5).exp(), SIGMA_MIN, SIGMA_MAX)
        return PosteriorParams(mu, sigma, valid)

    def reparameterize(
        self,
        post: PosteriorParams,
        rng: np.random.Generator | None,
        variational: bool = False,
        eps: np.ndarray | None = None,
    ) -> LatentSample:
        """z = mu + sigma * eps (plain) or mu + alpha * sigma * eps (variational).

        ``rng=None`` with no ``eps`` gives z = mu (the inference path).
        """
        if eps is None and rng is not None:
            eps = rng.standard_normal(post.mu.shape)
        if eps is None:
            z = post.mu
        else:
            scale = post.sigma * self.alpha() if variational else post.sigma
            z = post.mu + scale * as_tensor(np.asarray(eps, dtype=self.dtype), dtype=self.dtype)
        return LatentSample(z, mean_pool_rows(z, post.valid))

    def decode(self, z: Tensor, valid: np.ndarray, noise: Noise | None = None, branch: int = 1) -> Tensor:
        noise = noise or Noise()
        mask = attention_mask(valid, self.dtype)
        return self._stack(z, "dec", mask, noise, branch, ma=False)

    def score_items(self, d_t: np.ndarray | Tensor) -> np.ndarray:
        """Dot-product score of every item; index 0 (padding) gets -inf."""
        d_t = d_t.data if isinstance(d_t, Tensor) else np.asarray(d_t)
        scores = d_t @ self.params["item_emb"].data.T
        scores = scores.astype(np.float64)
        scores[..., 0] = -np.inf
        return scores

    def infer(self, x: np.ndarray) -> tuple[PosteriorParams, np.ndarray]:
        """Deterministic inference: encode, take mu, decode, score from the
        last position (sequences are left-padded, so that is the newest item)."""
        post = self.encode(x)
        D = self.decode(post.mu, post.valid)
        return post, self.score_items(D.data[:, -1, :])


# -- second-view augmentation ------------------------------------------------------


def augment_sequence(
    seq: np.ndarray,
    rng: np.random.Generator,
    crop: float = 0.8,
    mask: float = 0.3,
    reorder: float = 0.2,
) -> np.ndarray:
    """Crop a contiguous window of ceil(crop*len) items, set floor(mask*len')
    of them to padding, then shuffle a random contiguous segment of
    floor(reorder*len') items."""
    seq = np.asarray(seq, dtype=np.int64)
    if len(seq) <= 1:
        log.warning("data augmentation skipped: sequence of length %d", len(seq))
        return seq.copy()
    w = max(1, math.ceil(crop * len(seq)))
    start = int(rng.integers(0, len(seq) - w + 1))
    out = seq[start : start + w].copy()
    n_mask = math.floor(mask * w)
    if n_mask:
        out[rng.choice(w, size=n_mask, replace=False)] = 0
    n_re = math.floor(reorder * w)
    if n_re > 1:
        s = int(rng.integers(0, w - n_re + 1))
        out[s : s + n_re] = rng.permutation(out[s : s + n_re])
    return out


def augment_second_view(
    seqs: list[np.ndarray],
    strategy: str,
    cfg: ModelConfig,
    rng: np.random.Generator,
) -> ViewPlan:
    """Plan the second branch. DA returns perturbed sequences; MA and VA leave
    the input alone and switch on encoder dropout or alpha-scaled sampling."""
    if strategy == "DA":
        return ViewPlan(inputs=[augment_sequence(s, rng, cfg.da_crop, cfg.da_mask, cfg.da_reorder) for s in seqs])
    if strategy == "MA":
        return ViewPlan(ma_p=cfg.ma_dropout_p)
    if strategy == "VA":
        return ViewPlan(variational=True)
    if strategy == "none":
        return ViewPlan()
    raise ValueError(f"unknown augmentation strategy {strategy!r}")
