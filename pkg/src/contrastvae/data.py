"""Interaction logs, per-user sequences, leave-one-out splits and corruption.

Item indices are 1-based; 0 is the padding index everywhere.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from contrastvae.errors import DataError, FormatError

log = logging.getLogger(__name__)

MAX_MALFORMED_FRACTION = 0.10
SPLIT_FORMAT = "contrastvae-split-v1"

# Upper edges of the test-target frequency bins: [<=10], (10,20], (20,30], (30,40], (40,inf)
FREQUENCY_EDGES = (10, 20, 30, 40)
FREQUENCY_LABELS = ("<=10", "(10,20]", "(20,30]", "(30,40]", ">40")
# Sequence-length bins: <10, [10,20), [20,30), [30,40), >=40
LENGTH_EDGES = (10, 20, 30, 40)
LENGTH_LABELS = ("<10", "[10,20)", "[20,30)", "[30,40)", ">=40")


@dataclass
class InteractionLog:
    records: list[tuple[str, str, int]] = field(default_factory=list)
    malformed: int = 0

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class UserSequence:
    user_index: int
    items: list[int]


@dataclass
class Vocab:
    """Original ids; ``item_ids[i - 1]`` is the id of item index ``i``."""

    item_ids: list[str]
    user_ids: list[str]

    @property
    def n_items(self) -> int:
        return len(self.item_ids)


def load_interactions(path: str | Path) -> InteractionLog:
    """Read ``user<TAB>item<TAB>timestamp[<TAB>rating]`` lines.

    A first line whose timestamp field is not numeric is treated as a header.
    Ratings are ignored (every record is implicit feedback).
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    out = InteractionLog()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        log.warning("%s: no interaction records", path)
        return out
    if len(lines[0].split("\t")) >= 3 and not _is_int(lines[0].split("\t")[2]):
        lines = lines[1:]
    for ln in lines:
        parts = ln.rstrip("\r").split("\t")
        if len(parts) not in (3, 4) or not parts[0] or not parts[1] or not _is_int(parts[2]):
            out.malformed += 1
            continue
        ts = int(parts[2])
        if ts < 0:
            out.malformed += 1
            continue
        out.records.append((parts[0], parts[1], ts))
    total = len(out.records) + out.malformed
    if out.malformed:
        log.warning("%s: skipped %d malformed of %d lines", path, out.malformed, total)
    if total and out.malformed / total > MAX_MALFORMED_FRACTION:
        raise FormatError(f"{path}: {out.malformed}/{total} malformed lines exceeds 10%")
    return out


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True


def filter_and_index(log_: InteractionLog, min_count: int = 5) -> tuple[list[UserSequence], Vocab]:
    """Drop users and items with fewer than ``min_count`` records, repeating
    until nothing changes, then assign dense indices in order of first
    appearance and sort each user's items by timestamp (stable)."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    records = list(log_.records)
    while True:
        users = Counter(r[0] for r in records)
        items = Counter(r[1] for r in records)
        kept = [r for r in records if users[r[0]] >= min_count and items[r[1]] >= min_count]
        if len(kept) == len(records):
            break
        records = kept
    if not records:
        raise DataError(f"no interactions left after filtering with min_count={min_count}")

    item_index: dict[str, int] = {}
    user_index: dict[str, int] = {}
    per_user: dict[str, list[tuple[int, int]]] = {}
    for u, i, ts in records:
        item_index.setdefault(i, len(item_index) + 1)
        user_index.setdefault(u, len(user_index))
        per_user.setdefault(u, []).append((ts, item_index[i]))
    seqs = []
    for u, idx in user_index.items():
        ordered = sorted(per_user[u], key=lambda r: r[0])
        seqs.append(UserSequence(idx, [it for _, it in ordered]))
    return seqs, Vocab(list(item_index), list(user_index))


@dataclass
class SplitDataset:
    """Leave-one-out views over full per-user sequences.

    For a sequence x_1..x_n: training uses x_1..x_{n-2}; validation predicts
    x_{n-1} from x_1..x_{n-2}; test predicts x_n from x_1..x_{n-1}.
    """

    sequences: list[np.ndarray]
    n_items: int
    user_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.user_indices:
            self.user_indices = list(range(len(self.sequences)))
        self.train_frequency = np.zeros(self.n_items + 1, dtype=np.int64)
        for s in self.sequences:
            np.add.at(self.train_frequency, s[:-2], 1)

    @property
    def n_users(self) -> int:
        return len(self.sequences)

    def train_prefix(self, u: int) -> np.ndarray:
        return self.sequences[u][:-2]

    def inputs(self, view: str) -> list[np.ndarray]:
        cut = {"validation": 2, "test": 1}[view]
        return [s[:-cut] for s in self.sequences]

    def targets(self, view: str) -> np.ndarray:
        pos = {"validation": -2, "test": -1}[view]
        return np.array([s[pos] for s in self.sequences], dtype=np.int64)

    def stats(self) -> dict:
        n_inter = int(sum(len(s) for s in self.sequences))
        return {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_interactions": n_inter,
            "interactions_per_item": round(n_inter / max(self.n_items, 1), 4),
            "avg_seq_len": round(n_inter / max(self.n_users, 1), 4),
            "train_interactions": int(sum(max(len(s) - 2, 0) for s in self.sequences)),
            "validation_targets": self.n_users,
            "test_targets": self.n_users,
        }


def leave_one_out_split(sequences: Sequence[UserSequence], n_items: int | None = None) -> SplitDataset:
    kept, users, dropped = [], [], 0
    for s in sequences:
        if len(s.items) < 3:
            dropped += 1
            continue
        kept.append(np.asarray(s.items, dtype=np.int64))
        users.append(s.user_index)
    if dropped:
        log.warning("dropped %d users with fewer than 3 interactions", dropped)
    if not kept:
        raise DataError("no user has the 3 interactions leave-one-out needs")
    if n_items is None:
        n_items = int(max(int(s.max()) for s in kept))
    return SplitDataset(kept, n_items, users)


def pad_or_truncate(seq: Sequence[int] | np.ndarray, T: int) -> np.ndarray:
    """Keep the last ``T`` items, left-padding with 0."""
    if T < 1:
        raise ValueError("T must be >= 1")
    seq = np.asarray(seq, dtype=np.int64)[-T:]
    out = np.zeros(T, dtype=np.int64)
    if seq.size:
        out[T - seq.size :] = seq
    return out


def pad_batch(seqs: Iterable[Sequence[int]], T: int) -> np.ndarray:
    return np.stack([pad_or_truncate(s, T) for s in seqs]) if seqs else np.zeros((0, T), dtype=np.int64)


@dataclass
class FrequencyGroups:
    labels: np.ndarray  # per-user group id 0..4
    names: tuple[str, ...] = FREQUENCY_LABELS

    @property
    def counts(self) -> list[int]:
        return [int(np.sum(self.labels == g)) for g in range(len(self.names))]


def frequency_bin(freq: np.ndarray | int) -> np.ndarray:
    return np.searchsorted(np.asarray(FREQUENCY_EDGES), np.asarray(freq), side="left")


def length_bin(length: np.ndarray | int) -> np.ndarray:
    return np.searchsorted(np.asarray(LENGTH_EDGES), np.asarray(length), side="right")


def assign_frequency_groups(split: SplitDataset, view: str = "test") -> FrequencyGroups:
    """Group users by the training frequency of their held-out target."""
    freq = split.train_frequency[split.targets(view)]
    return FrequencyGroups(frequency_bin(freq).astype(np.int64))


def assign_length_groups(split: SplitDataset, view: str = "test") -> FrequencyGroups:
    lengths = np.array([len(s) for s in split.inputs(view)])
    return FrequencyGroups(length_bin(lengths).astype(np.int64), LENGTH_LABELS)


def corrupt_sequences(
    seqs: Sequence[np.ndarray],
    mode: str,
    ratio: float,
    seed: int,
    n_items: int,
) -> list[np.ndarray]:
    """Delete or replace ``floor(ratio * len)`` uniformly chosen positions.

    Meant for model inputs only; held-out targets are never passed in.
    Replacement items are drawn uniformly from the other ``n_items - 1``.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    if mode not in ("delete", "replace"):
        raise ValueError(f"unknown corruption mode {mode!r}")
    rng = np.random.default_rng(seed)
    out = []
    for s in seqs:
        s = np.asarray(s, dtype=np.int64)
        k = math.floor(ratio * len(s))
        if k == 0:
            out.append(s.copy())
            continue
        pos = rng.choice(len(s), size=k, replace=False)
        if mode == "delete":
            out.append(np.delete(s, pos))
        else:
            s = s.copy()
            # uniform over the other n_items - 1 items: shift draws past the original
            draw = rng.integers(1, n_items, size=k)
            s[pos] = draw + (draw >= s[pos])
            out.append(s)
    return out


# -- persistence ---------------------------------------------------------------


def save_split(split: SplitDataset, out_dir: str | Path, vocab: Vocab | None = None, extra: dict | None = None) -> Path:
    """Write ``sequences.bin`` and ``manifest.json`` (and id maps if given).

    ``sequences.bin``: for each user, a little-endian uint32 length followed
    by that many little-endian int32 item indices.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sequences.bin", "wb") as fh:
        for s in split.sequences:
            fh.write(struct.pack("<I", len(s)))
            fh.write(np.asarray(s, dtype="<i4").tobytes())
    manifest = {
        "format": SPLIT_FORMAT,
        "sequence_file": "sequences.bin",
        "encoding": "per user: uint32 LE length, then int32 LE item indices (1-based)",
        "user_indices": [int(u) for u in split.user_indices],
        **split.stats(),
    }
    if extra:
        manifest.update(extra)
    if vocab is not None:
        (out / "items.tsv").write_text("".join(f"{i + 1}\t{v}\n" for i, v in enumerate(vocab.item_ids)), encoding="utf-8")
        (out / "users.tsv").write_text("".join(f"{i}\t{v}\n" for i, v in enumerate(vocab.user_ids)), encoding="utf-8")
        manifest["item_map"] = "items.tsv"
        manifest["user_map"] = "users.tsv"
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_split(path: str | Path) -> SplitDataset:
    path = Path(path)
    if path.is_file():
        path = path.parent
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        raw = (path / manifest["sequence_file"]).read_bytes()
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read split at {path}: {exc}") from exc
    if manifest.get("format") != SPLIT_FORMAT:
        raise DataError(f"{path}: unknown split format {manifest.get('format')!r}")
    seqs, off = [], 0
    while off < len(raw):
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        seqs.append(np.frombuffer(raw, dtype="<i4", count=n, offset=off).astype(np.int64))
        off += 4 * n
    if len(seqs) != manifest["n_users"]:
        raise DataError(f"{path}: manifest says {manifest['n_users']} users, file has {len(seqs)}")
    return SplitDataset(seqs, int(manifest["n_items"]), list(manifest.get("user_indices", [])))
