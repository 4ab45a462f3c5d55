import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ulmfit_aa.corpus import (
    Document, Sample, balanced_subset, by_author, chunk_documents, ingest, kfold_indices, kfold_split,
    read_manifest, stratified_split, stratified_split_indices, write_manifest,
)
from ulmfit_aa.errors import ConfigError, DataError


def _samples(counts: dict[str, int]) -> list[Sample]:
    out = []
    for author, n in counts.items():
        out += [Sample((f"{author}{i}",), author, f"{author}/{i}") for i in range(n)]
    return out


def test_ingest_layout(tmp_path, caplog):
    for author in ("alice", "bob"):
        (tmp_path / author).mkdir()
        for i in range(3):
            (tmp_path / author / f"{i}.txt").write_text(f"text  {author}\n number {i}", encoding="utf-8")
    (tmp_path / "bob" / "blank.txt").write_text(" \n\t ", encoding="utf-8")
    (tmp_path / "carol").mkdir()
    with caplog.at_level(logging.WARNING):
        docs = ingest(tmp_path)
    assert len(docs) == 6
    assert {d.author for d in docs} == {"alice", "bob"}
    assert docs[0].text == "text alice number 0"
    assert "blank.txt" in caplog.text and "carol" in caplog.text


def test_ingest_unreadable_file(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "x.txt").write_bytes(b"\xff\xfe\xfa")
    with pytest.raises(DataError, match="x.txt"):
        ingest(tmp_path)


def test_chunk_documents_drops_remainder():
    docs = [Document(" ".join(["w"] * 1500), "a", "d1"), Document(" ".join(["w"] * 749), "a", "d2")]
    samples = chunk_documents(docs)
    assert len(samples) == 2
    assert all(len(s.tokens) == 750 for s in samples)


@given(st.lists(st.integers(0, 60), min_size=1, max_size=6), st.integers(1, 13))
def test_chunk_count_formula(lengths, size):
    docs = [Document(" ".join(["x"] * n) or "y", "a", str(i)) for i, n in enumerate(lengths)]
    expected = sum(max(n, 1) // size for n in lengths)
    assert len(chunk_documents(docs, size)) == expected


def test_stratified_split_counts_and_disjoint():
    samples = _samples({"a": 100, "b": 7, "c": 2})
    train, test = stratified_split_indices(samples, 0.2, seed=3)
    assert not set(train) & set(test)
    assert len(train) + len(test) == len(samples)
    per_author = {a: sum(samples[i].author == a for i in test) for a in "abc"}
    assert per_author == {"a": 20, "b": 1, "c": 1}
    assert stratified_split_indices(samples, 0.2, seed=3) == (train, test)
    assert stratified_split_indices(samples, 0.2, seed=4) != (train, test)


def test_stratified_split_single_sample_author():
    with pytest.raises(DataError, match="'z'"):
        stratified_split(_samples({"a": 5, "z": 1}))


def test_stratified_split_fixed_test_set():
    samples = _samples({"a": 8})
    train, test = stratified_split(samples, test_indices=[7])
    assert test == [samples[7]] and len(train) == 7


def test_balanced_subset_equal_counts():
    samples = _samples({"a": 5, "b": 9, "c": 12, "d": 7})
    sub = balanced_subset(samples, 3, seed=1)
    counts = {a: len(i) for a, i in by_author(sub).items()}
    assert len(counts) == 3
    assert len(set(counts.values())) == 1
    assert balanced_subset(samples, 3, seed=1) == sub


def test_balanced_subset_identity_when_all_equal():
    samples = _samples({"a": 4, "b": 4})
    assert sorted(balanced_subset(samples, 2, seed=0), key=lambda s: s.source_id) == \
        sorted(samples, key=lambda s: s.source_id)


def test_balanced_subset_errors():
    with pytest.raises(ConfigError):
        balanced_subset(_samples({"a": 3, "b": 3}), 1)
    with pytest.raises(ConfigError):
        balanced_subset(_samples({"a": 3, "b": 3}), 3)


def test_kfold_balanced_and_disjoint():
    samples = _samples({"a": 50, "b": 50, "c": 53})
    folds = kfold_indices(samples, 5, seed=0)
    vals = [set(v) for _, v in folds]
    assert set().union(*vals) == set(range(len(samples)))
    assert sum(len(v) for v in vals) == len(samples)
    for train, val in folds:
        assert not set(train) & set(val)
        sizes = {a: sum(samples[i].author == a for i in val) for a in "abc"}
        assert sizes["a"] == sizes["b"] == 10
    c_sizes = [sum(samples[i].author == "c" for i in v) for v in vals]
    assert max(c_sizes) - min(c_sizes) <= 1


def test_kfold_too_few_samples():
    with pytest.raises(DataError):
        kfold_split(_samples({"a": 4, "b": 9}), 5)


@settings(max_examples=25, deadline=None)
@given(st.dictionaries(st.sampled_from("abcdef"), st.integers(5, 30), min_size=2), st.integers(0, 2**32))
def test_kfold_partition_property(counts, seed):
    samples = _samples(counts)
    folds = kfold_indices(samples, 5, seed)
    all_val = np.concatenate([v for _, v in folds])
    assert sorted(all_val.tolist()) == list(range(len(samples)))


def test_manifest_roundtrip(tmp_path):
    write_manifest(tmp_path / "m.json", {"train": [0, 2], "test": [1]})
    assert read_manifest(tmp_path / "m.json") == {"train": [0, 2], "test": [1]}
