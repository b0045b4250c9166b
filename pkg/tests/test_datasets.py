from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fesr.datamodel import DatasetManifest, ManifestEntry
from fesr.datasets import (
    BatchStream, ImageSet, ManifestError, PairIndex, batches, load_manifest, make_folds,
    sample_pair, write_manifest,
)

HEADER = "#K=3 size=32 channels=1\n"


def write(tmp_path, body, header=HEADER):
    p = tmp_path / "m.tsv"
    p.write_text(header + body)
    return p


def test_manifest_round_trip(tmp_path, tiny_manifest):
    write_manifest(tiny_manifest, tmp_path / "copy.tsv")
    again = load_manifest(tmp_path / "copy.tsv")
    assert again.entries == tiny_manifest.entries


@pytest.mark.parametrize("body,line,msg", [
    ("a.png\ts1\t0\nb.png\ts1\t5\n", 3, "outside"),
    ("a.png\ts1\tx\n", 2, "not an integer"),
    ("a.png\ts1\n", 2, "3 tab-separated"),
    ("a.png\ts1\t0\na.png\ts2\t1\n", 3, "duplicate"),
])
def test_manifest_errors_name_the_line(tmp_path, body, line, msg):
    with pytest.raises(ManifestError, match=msg) as err:
        load_manifest(write(tmp_path, body))
    assert err.value.line == line
    assert f":{line}:" in str(err.value)


def test_manifest_bad_header_and_missing(tmp_path):
    with pytest.raises(ManifestError, match="header"):
        load_manifest(write(tmp_path, "a.png\ts\t0\n", header="K=3\n"))
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "nope.tsv")


def fake_manifest(n_subjects, per_subject=2, k=3):
    entries = tuple(ManifestEntry(f"{s}_{j}.png", f"s{s}", (s + j) % k)
                    for s in range(n_subjects) for j in range(per_subject))
    return DatasetManifest(entries, k, 32, 1)


@settings(max_examples=30)
@given(st.integers(2, 40), st.integers(2, 6), st.integers(0, 100))
def test_folds_partition_subjects(n_subjects, folds, seed):
    if folds > n_subjects:
        with pytest.raises(ValueError):
            make_folds(fake_manifest(n_subjects), folds, seed)
        return
    m = fake_manifest(n_subjects)
    split = make_folds(m, folds, seed)
    seen = []
    for f in range(folds):
        test_subj = {e.subject_id for e in split.test_entries(f)}
        train_subj = {e.subject_id for e in split.train_entries(f)}
        assert not test_subj & train_subj
        assert len(split.test_entries(f)) + len(split.train_entries(f)) == len(m.entries)
        seen += sorted(test_subj)
    assert sorted(seen) == sorted(m.subjects)
    sizes = Counter(split.fold_assignments.values())
    assert max(sizes.values()) - min(sizes.values()) <= 1


def test_folds_seeded():
    m = fake_manifest(20)
    assert make_folds(m, 5, 3).fold_assignments == make_folds(m, 5, 3).fold_assignments
    assert make_folds(m, 5, 3).fold_assignments != make_folds(m, 5, 4).fold_assignments


def test_fold_index_range():
    split = make_folds(fake_manifest(10), 5)
    with pytest.raises(IndexError):
        split.test_entries(5)


def test_pair_uniform_over_others():
    labels = [0, 0, 0, 0, 1, 1]
    idx = PairIndex(labels)
    rng = np.random.default_rng(0)
    counts = Counter(idx.partner(1, rng) for _ in range(6000))
    assert set(counts) == {0, 2, 3}
    assert all(abs(c / 6000 - 1 / 3) < 0.03 for c in counts.values())


def test_pair_same_subject_mode():
    labels, subjects = [0, 0, 0, 0], ["a", "a", "b", "b"]
    idx = PairIndex(labels, subjects, same_subject=True)
    rng = np.random.default_rng(0)
    assert {idx.partner(0, rng) for _ in range(20)} == {1}


def test_singleton_pairs_with_itself(caplog):
    idx = PairIndex([0, 1, 1])
    assert idx.partner(0, np.random.default_rng(0)) == 0
    assert "alone" in caplog.text


def test_sample_pair_entries():
    entries = [ManifestEntry(f"{i}.png", "s", i % 2) for i in range(6)]
    a, b = sample_pair(entries, 2, np.random.default_rng(0))
    assert a == 2 and b != 2 and entries[b].class_index == 0


def test_batch_stream(tiny_data):
    s = BatchStream(tiny_data, 8, seed=1)
    b = s.get(3)
    assert b.images.shape == (8, 1, 32, 32)
    assert np.all(tiny_data.labels[b.pair_indices] == b.labels)
    assert np.all(b.pair_indices != b.indices)
    again = BatchStream(tiny_data, 8, seed=1).get(3)
    assert np.array_equal(b.indices, again.indices) and np.array_equal(b.pair_indices, again.pair_indices)
    epoch = list(s.epoch(0))
    flat = np.concatenate([x.indices for x in epoch])
    assert len(set(flat.tolist())) == len(flat) == s.per_epoch * 8


def test_batch_stream_errors(tiny_data):
    with pytest.raises(ValueError):
        BatchStream(tiny_data, len(tiny_data) + 1)
    with pytest.raises(ValueError):
        BatchStream(tiny_data, 0)


def test_image_set_rejects_empty(tiny_manifest):
    with pytest.raises(ValueError):
        ImageSet.load(tiny_manifest, [])


def test_even_fold_sizes():
    split = make_folds(fake_manifest(200), 10, seed=0)
    assert all(len(split.subjects(f)) == 20 for f in range(10))


def test_two_image_class_partner_is_the_other():
    idx = PairIndex([0, 0, 1, 1, 1])
    rng = np.random.default_rng(0)
    assert all(idx.partner(0, rng) == 1 for _ in range(100))


def test_five_image_class_frequencies():
    idx = PairIndex([2] * 5)
    rng = np.random.default_rng(1)
    counts = Counter(idx.partner(2, rng) for _ in range(10_000))
    assert set(counts) == {0, 1, 3, 4}
    assert all(abs(c / 10_000 - 0.25) < 0.03 for c in counts.values())


def test_hundred_entries_give_six_batches():
    data = ImageSet(np.zeros((100, 1, 4, 4), np.float32), np.arange(100) % 4,
                    [f"s{i % 10}" for i in range(100)])
    out = list(batches(data, 16, seed=0))
    assert len(out) == 6
    again = list(batches(data, 16, seed=0))
    assert all(np.array_equal(a[1], b[1]) for a, b in zip(out, again))
