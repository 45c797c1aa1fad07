import json
import logging
from collections import Counter

import numpy as np
import pytest

from contrastvae.data import (
    InteractionLog,
    UserSequence,
    assign_frequency_groups,
    assign_length_groups,
    corrupt_sequences,
    filter_and_index,
    frequency_bin,
    leave_one_out_split,
    length_bin,
    load_interactions,
    load_split,
    pad_or_truncate,
    save_split,
)
from contrastvae.errors import DataError, FormatError


def write(tmp_path, text, name="log.tsv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_three_lines(tmp_path):
    log_ = load_interactions(write(tmp_path, "u1\ti1\t10\nu1\ti2\t11\nu2\ti1\t12\n"))
    assert len(log_) == 3 and log_.malformed == 0


def test_rating_column_ignored(tmp_path):
    log_ = load_interactions(write(tmp_path, "user\titem\ttime\trating\nu1\ti1\t10\t4.0\n"))
    assert log_.records == [("u1", "i1", 10)]


def test_empty_file_warns(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        log_ = load_interactions(write(tmp_path, ""))
    assert len(log_) == 0
    assert "no interaction records" in caplog.text


def test_too_many_malformed_lines(tmp_path):
    text = "".join(f"u{i}\ti{i}\t{i}\n" for i in range(8)) + "bad line\nu\ti\tnot-a-time\n"
    with pytest.raises(FormatError):
        load_interactions(write(tmp_path, text))


def test_few_malformed_lines_tolerated(tmp_path):
    text = "".join(f"u{i}\ti{i}\t{i}\n" for i in range(10)) + "bad line\n"
    log_ = load_interactions(write(tmp_path, text))
    assert len(log_) == 10 and log_.malformed == 1


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_interactions(tmp_path / "nope.tsv")


def _records(pairs):
    return InteractionLog([(u, i, t) for t, (u, i) in enumerate(pairs)])


def test_user_with_four_interactions_removed():
    pairs = [(f"u{k}", f"i{j}") for k in range(5) for j in range(5)]
    pairs += [("short", f"i{j}") for j in range(4)]
    seqs, vocab = filter_and_index(_records(pairs))
    assert "short" not in vocab.user_ids and len(seqs) == 5


def test_item_with_exactly_min_count_kept():
    pairs = [(f"u{k}", f"i{j}") for k in range(5) for j in range(5)]
    seqs, vocab = filter_and_index(_records(pairs))
    assert sorted(vocab.item_ids) == [f"i{j}" for j in range(5)]


def _naive_fixpoint(records, k):
    while True:
        uc = Counter(r[0] for r in records)
        ic = Counter(r[1] for r in records)
        kept = [r for r in records if uc[r[0]] >= k and ic[r[1]] >= k]
        if kept == records:
            return kept
        records = kept


def test_chain_filtering_matches_fixpoint_oracle():
    # "rare" appears 4 times; dropping it leaves "edge" with 4 interactions
    pairs = [(f"u{k}", f"i{j}") for k in range(6) for j in range(5)]
    pairs += [("edge", f"i{j}") for j in range(4)] + [("edge", "rare")]
    pairs += [(f"u{k}", "rare") for k in range(3)]
    log_ = _records(pairs)
    seqs, vocab = filter_and_index(log_)
    assert "edge" not in vocab.user_ids and "rare" not in vocab.item_ids
    expected = _naive_fixpoint(list(log_.records), 5)
    assert sum(len(s.items) for s in seqs) == len(expected)


def test_random_logs_reach_fixpoint():
    rng = np.random.default_rng(0)
    recs = [(f"u{rng.integers(40)}", f"i{rng.integers(30)}", int(t)) for t in range(900)]
    seqs, vocab = filter_and_index(InteractionLog(recs), 5)
    items = Counter(i for s in seqs for i in s.items)
    assert all(len(s.items) >= 5 for s in seqs)
    assert all(c >= 5 for c in items.values())
    assert sorted(items) == list(range(1, vocab.n_items + 1))


def test_filter_everything_is_a_data_error():
    with pytest.raises(DataError):
        filter_and_index(_records([("u", "i")]))


def test_sequences_time_ordered():
    log_ = InteractionLog([("u", f"i{j}", 100 - j) for j in range(5)])
    seqs, vocab = filter_and_index(log_, min_count=1)
    ids = [vocab.item_ids[i - 1] for i in seqs[0].items]
    assert ids == [f"i{j}" for j in range(4, -1, -1)]


def test_leave_one_out_views():
    split = leave_one_out_split([UserSequence(0, [1, 2, 3, 4, 5])])
    np.testing.assert_array_equal(split.train_prefix(0), [1, 2, 3])
    np.testing.assert_array_equal(split.inputs("validation")[0], [1, 2, 3])
    assert split.targets("validation")[0] == 4
    np.testing.assert_array_equal(split.inputs("test")[0], [1, 2, 3, 4])
    assert split.targets("test")[0] == 5


def test_leave_one_out_minimum_and_dropped():
    split = leave_one_out_split([UserSequence(0, [7, 8, 9]), UserSequence(1, [1, 2])])
    assert split.n_users == 1
    np.testing.assert_array_equal(split.train_prefix(0), [7])
    assert split.targets("validation")[0] == 8 and split.targets("test")[0] == 9


def test_train_frequency_counts_training_portion_only():
    split = leave_one_out_split([UserSequence(0, [1, 2, 3, 4]), UserSequence(1, [1, 3, 4])], n_items=4)
    np.testing.assert_array_equal(split.train_frequency, [0, 2, 1, 0, 0])


@pytest.mark.parametrize(
    "seq, T, expected",
    [([1, 2, 3], 5, [0, 0, 1, 2, 3]), (list(range(1, 8)), 5, [3, 4, 5, 6, 7]), ([], 3, [0, 0, 0])],
)
def test_pad_or_truncate(seq, T, expected):
    np.testing.assert_array_equal(pad_or_truncate(seq, T), expected)


def test_pad_idempotent():
    x = pad_or_truncate([4, 5], 4)
    np.testing.assert_array_equal(pad_or_truncate(x[x != 0], 4), x)


def test_frequency_bins():
    assert list(frequency_bin([1, 10, 11, 15, 20, 21, 30, 40, 41, 500])) == [0, 0, 1, 1, 1, 2, 2, 3, 4, 4]


def test_length_bins():
    assert list(length_bin([3, 9, 10, 19, 20, 39, 40, 100])) == [0, 0, 1, 1, 2, 3, 4, 4]


def test_group_counts_partition_users(small_split):
    for groups in (assign_frequency_groups(small_split), assign_length_groups(small_split)):
        assert sum(groups.counts) == small_split.n_users


def test_corrupt_ratio_zero_is_identity():
    seqs = [np.array([1, 2, 3]), np.array([4, 5])]
    out = corrupt_sequences(seqs, "replace", 0.0, 0, 10)
    assert all(np.array_equal(a, b) for a, b in zip(seqs, out))


def test_corrupt_full_delete():
    assert corrupt_sequences([np.array([1, 2, 3, 4])], "delete", 1.0, 0, 10)[0].size == 0


def test_corrupt_replace_half():
    seqs = [np.arange(1, 11), np.arange(3, 8)]
    a = corrupt_sequences(seqs, "replace", 0.5, 7, 20)
    b = corrupt_sequences(seqs, "replace", 0.5, 7, 20)
    for s, x, y in zip(seqs, a, b):
        np.testing.assert_array_equal(x, y)
        changed = s != x
        assert changed.sum() == len(s) // 2
        assert np.all((x >= 1) & (x <= 20))


def test_corrupt_rejects_bad_ratio():
    with pytest.raises(ValueError):
        corrupt_sequences([np.array([1])], "delete", 1.5, 0, 3)


def test_split_roundtrip_and_determinism(tmp_path, small_split):
    save_split(small_split, tmp_path / "a")
    save_split(small_split, tmp_path / "b")
    for f in ("sequences.bin", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    back = load_split(tmp_path / "a")
    assert back.n_items == small_split.n_items
    assert all(np.array_equal(x, y) for x, y in zip(back.sequences, small_split.sequences))
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["n_users"] == small_split.n_users


def test_load_split_rejects_garbage(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DataError):
        load_split(tmp_path)
