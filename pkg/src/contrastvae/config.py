"""Model, training and run configuration.

A run is described by one JSON document::

    {"split": "...", "out": "...",
     "model": {...ModelConfig...}, "train": {...TrainConfig...}}

and may be adjusted with dot-path overrides such as ``model.d=64`` or
``train.disable_infonce=true``. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from contrastvae.errors import ConfigError

AUGMENTATIONS = ("none", "DA", "MA", "VA")

# short names accepted on the command line
ALIASES = {
    "augmentation": "model.augmentation",
    "lam": "model.lam",
    "lambda": "model.lam",
    "tau": "model.tau",
    "seed": "train.seed",
    "ablation.disable_infonce": "train.disable_infonce",
    "ablation.disable_alpha_reg": "train.disable_alpha_reg",
}


@dataclass
class ModelConfig:
    n_items: int = 0
    d: int = 128
    heads: int = 4
    layers: int = 2
    max_len: int = 50
    dropout_p: float = 0.3
    augmentation: str = "VA"
    tau: float = 1.0
    lam: float = 0.1
    share_branches: bool = True
    ma_dropout_p: float = 0.3
    da_crop: float = 0.8
    da_mask: float = 0.3
    da_reorder: float = 0.2
    log_alpha_init: float = math.log(0.1)

    def validate(self) -> None:
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout_p < 1.0 or not 0.0 <= self.ma_dropout_p < 1.0:
            raise ConfigError("dropout probabilities must lie in [0, 1)")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"augmentation must be one of {AUGMENTATIONS}")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.max_len < 1 or self.layers < 1 or self.d < 1:
            raise ConfigError("max_len, layers and d must be >= 1")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 100
    seed: int = 0
    eval_every: int = 1
    beta: float = 1.0
    beta_warmup: int = 0
    kl_reduction: str = "element"
    grad_clip: float | None = 5.0
    disable_infonce: bool = False
    disable_alpha_reg: bool = False
    log_wall_time: bool = False
    eval_batch_size: int = 1024

    def validate(self) -> None:
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.kl_reduction not in ("sequence", "position", "element"):
            raise ConfigError("kl_reduction must be sequence, position or element")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1")


@dataclass
class RunConfig:
    split: str = ""
    out: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        model = _build(ModelConfig, raw.pop("model", {}), "model")
        train = _build(TrainConfig, raw.pop("train", {}), "train")
        top = _build(cls, raw, "", skip=("model", "train"))
        top.model, top.train = model, train
        return top

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] | None = None) -> "RunConfig":
        raw = {} if path is None else json.loads(Path(path).read_text(encoding="utf-8"))
        cfg = cls.from_dict(raw)
        for ov in overrides or []:
            cfg.set(*_split_override(ov))
        cfg.model.validate()
        cfg.train.validate()
        return cfg

    def set(self, key: str, value: Any) -> None:
        key = ALIASES.get(key, key)
        parts = key.split(".")
        target: Any = self
        for p in parts[:-1]:
            if not hasattr(target, p) or not dataclasses.is_dataclass(getattr(target, p)):
                raise ConfigError(f"unknown config key {key!r}")
            target = getattr(target, p)
        names = {f.name: f for f in dataclasses.fields(target)}
        if parts[-1] not in names:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(target, parts[-1])
        setattr(target, parts[-1], _coerce(value, current, key))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _build(cls, raw: dict, where: str, skip: tuple[str, ...] = ()):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {where or 'root'!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    unknown = set(raw) - names
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in sorted(unknown))}")
    obj = cls()
    for k, v in raw.items():
        setattr(obj, k, _coerce(v, getattr(obj, k), k))
    return obj


def _split_override(ov: str) -> tuple[str, str]:
    if "=" not in ov:
        raise ConfigError(f"override {ov!r} is not key=value")
    k, v = ov.split("=", 1)
    return k.strip(), v


# float fields that also accept None
NULLABLE = {"grad_clip"}


def _coerce(value: Any, current: Any, key: str) -> Any:
    if not isinstance(value, str):
        if isinstance(current, bool) and not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean")
        if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        return value
    try:
        if isinstance(current, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float) or current is None:
            if key.split(".")[-1] in NULLABLE and value.lower() in ("none", "null"):
                return None
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value
