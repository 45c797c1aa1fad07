"""Seeded synthetic corpora with known structure, used by the acceptance suite
and handy for smoke runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from contrastvae.data import SplitDataset, UserSequence, leave_one_out_split


def cyclic_corpus(
    n_items: int = 50,
    n_users: int = 500,
    length: int = 12,
    noise: float = 0.1,
    seed: int = 0,
) -> list[UserSequence]:
    """Item i is followed by i+1 (mod n_items); with probability ``noise`` the
    next item is instead drawn uniformly from all items. Items are 1-based."""
    rng = np.random.default_rng(seed)
    out = []
    for u in range(n_users):
        s = np.empty(length, dtype=np.int64)
        s[0] = rng.integers(0, n_items)
        for t in range(1, length):
            if rng.random() < noise:
                s[t] = rng.integers(0, n_items)
            else:
                s[t] = (s[t - 1] + 1) % n_items
        out.append(UserSequence(u, s + 1))
    return out


def longtail_corpus(
    n_items: int = 1000,
    n_users: int = 2000,
    zipf_s: float = 1.1,
    follow: float = 0.6,
    min_len: int = 5,
    mean_extra: float = 10.0,
    max_len: int = 50,
    seed: int = 0,
) -> list[UserSequence]:
    """Zipfian item popularity with a sparse Markov backbone.

    Every item has one preferred successor; with probability ``follow`` a user
    moves to it, otherwise the next item is drawn from the Zipf popularity
    distribution. Successors are drawn from the same popularity law, so rare
    items stay rare while remaining predictable from their predecessor.
    """
    rng = np.random.default_rng(seed)
    ranks = rng.permutation(n_items)
    pop = 1.0 / (ranks + 1.0) ** zipf_s
    pop /= pop.sum()
    successor = rng.choice(n_items, size=n_items, p=pop)
    out = []
    for u in range(n_users):
        n = min(max_len, min_len + int(rng.geometric(1.0 / (mean_extra + 1.0))) - 1)
        s = np.empty(n, dtype=np.int64)
        s[0] = rng.choice(n_items, p=pop)
        for t in range(1, n):
            s[t] = successor[s[t - 1]] if rng.random() < follow else rng.choice(n_items, p=pop)
        out.append(UserSequence(u, s + 1))
    return out


def as_split(sequences: list[UserSequence], n_items: int) -> SplitDataset:
    return leave_one_out_split(sequences, n_items=n_items)


def write_tsv(sequences: list[UserSequence], path: str | Path) -> None:
    """Write ``user<TAB>item<TAB>timestamp<TAB>rating`` rows with a header."""
    lines = ["user_id\titem_id\ttimestamp\trating"]
    for seq in sequences:
        for t, item in enumerate(seq.items):
            lines.append(f"u{seq.user_index}\ti{int(item)}\t{1_600_000_000 + 60 * t}\t5")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
