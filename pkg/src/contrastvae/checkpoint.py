"""Checkpoint files: a JSON manifest followed by raw tensor buffers.

Layout::

    b"CVAECKPT" | uint64 LE manifest length | manifest (UTF-8 JSON) | buffers

Buffers are little-endian float32, concatenated in manifest order; each
manifest entry records name, group (param / adam_m / adam_v), shape, offset
and byte count relative to the start of the buffer region.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from contrastvae.config import ModelConfig, TrainConfig
from contrastvae.errors import CheckpointError, ConfigError

MAGIC = b"CVAECKPT"
FORMAT = "contrastvae-checkpoint-v1"


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    train_config: TrainConfig | None = None
    adam: dict | None = None  # {"t", "lr", "beta1", "beta2", "eps"}
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    train_state: dict | None = None


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    entries, chunks, offset = [], [], 0
    for group, tensors in (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name, arr in tensors.items():
            buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "group": group, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(buf)})
            chunks.append(buf)
            offset += len(buf)
    manifest = {
        "format": FORMAT,
        "dtype": "float32-le",
        "model_config": dataclasses.asdict(ckpt.model_config),
        "train_config": None if ckpt.train_config is None else dataclasses.asdict(ckpt.train_config),
        "adam": ckpt.adam,
        "rng_state": ckpt.rng_state,
        "train_state": ckpt.train_state,
        "tensors": entries,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC or len(raw) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<Q", raw, 8)
    try:
        manifest = json.loads(raw[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format")
    body = raw[16 + n :]
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    try:
        for e in manifest["tensors"]:
            count = int(np.prod(e["shape"], dtype=np.int64))
            if e["nbytes"] != 4 * count or e["offset"] + e["nbytes"] > len(body):
                raise CheckpointError(f"{path}: tensor {e['name']} has inconsistent size")
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
            groups[e["group"]][e["name"]] = arr.astype(np.float32)
        model_cfg = _config(ModelConfig, manifest["model_config"])
        train_cfg = None if manifest.get("train_config") is None else _config(TrainConfig, manifest["train_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    return Checkpoint(
        model_config=model_cfg,
        params=groups["param"],
        train_config=train_cfg,
        adam=manifest.get("adam"),
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        rng_state=manifest.get("rng_state"),
        train_state=manifest.get("train_state"),
    )


def _config(cls, raw: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    if set(raw) - names:
        raise ConfigError(f"unknown keys {sorted(set(raw) - names)}")
    return cls(**raw)


def model_from_checkpoint(ckpt: Checkpoint | str | Path):
    from contrastvae.model import ContrastVAE, init_params
    from contrastvae.numerics import Tensor

    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    expected = init_params(ckpt.model_config, np.random.default_rng(0))
    check_params_match(expected, ckpt.params)
    params = {k: Tensor(ckpt.params[k].copy(), requires_grad=True, name=k) for k in expected}
    return ContrastVAE(ckpt.model_config, params)


def check_params_match(expected: dict, got: dict) -> None:
    missing = set(expected) - set(got)
    extra = set(got) - set(expected)
    if missing or extra:
        raise CheckpointError(f"parameter set mismatch (missing={sorted(missing)[:5]}, unexpected={sorted(extra)[:5]})")
    for k, t in expected.items():
        if tuple(t.shape) != tuple(np.shape(got[k])):
            raise CheckpointError(f"shape mismatch for {k}: expected {t.shape}, checkpoint has {np.shape(got[k])}")
