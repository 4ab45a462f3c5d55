"""Corpus ingestion, fixed-length sample construction and seeded split protocols."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .rng import SplitMix64
from .tokenizers import normalize_text, pre_tokenize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Document:
    text: str
    author: str | None
    source_id: str


@dataclass(frozen=True)
class Sample:
    tokens: tuple[str, ...]
    author: str
    source_id: str = ""

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


def ingest(directory) -> list[Document]:
    """Read ``<root>/<author>/*.txt``; the directory name is the label."""
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"corpus directory not found: {root}")
    docs = []
    for author_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(author_dir.glob("*.txt"))
        if not files:
            log.warning("author directory %s has no .txt files; skipped", author_dir)
            continue
        for path in files:
            try:
                raw = path.read_text(encoding="utf-8")
            except (OSError, UnicodeDecodeError) as exc:
                raise DataError(f"cannot read {path}: {exc}") from exc
            text = normalize_text(raw)
            if not text:
                log.warning("%s contains only whitespace; skipped", path)
                continue
            docs.append(Document(text, author_dir.name, str(path.relative_to(root))))
    return docs


def read_texts(directory) -> list[str]:
    """Every non-blank ``*.txt`` under ``directory`` (any depth), in path order."""
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"corpus directory not found: {root}")
    texts = []
    for path in sorted(root.rglob("*.txt")):
        try:
            text = normalize_text(path.read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError) as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        if text:
            texts.append(text)
    if not texts:
        raise DataError(f"no non-empty .txt files under {root}")
    return texts


def chunk_documents(docs: Sequence[Document], chunk_words: int = 750) -> list[Sample]:
    """Cut each document into consecutive word chunks of exactly ``chunk_words``; remainders are dropped."""
    if chunk_words < 1:
        raise ConfigError("chunk_words must be >= 1")
    samples = []
    for doc in docs:
        words = pre_tokenize(doc.text)
        for start in range(0, len(words) - chunk_words + 1, chunk_words):
            samples.append(Sample(tuple(words[start:start + chunk_words]), doc.author or "",
                                  f"{doc.source_id}#{start // chunk_words}"))
    return samples


def by_author(samples: Sequence[Sample]) -> dict[str, list[int]]:
    groups = defaultdict(list)
    for i, s in enumerate(samples):
        groups[s.author].append(i)
    return dict(sorted(groups.items()))


def _author_rng(seed: int, purpose: str, author: str) -> SplitMix64:
    return SplitMix64(seed).derive(f"{purpose}/{author}")


def stratified_split_indices(samples: Sequence[Sample], test_frac: float = 0.2, seed: int = 0,
                             test_indices: Sequence[int] | None = None) -> tuple[list[int], list[int]]:
    """Per author, hold out floor(n * test_frac) samples (at least one) after a seeded shuffle.

    A fixed ``test_indices`` list overrides the random hold-out.
    """
    if test_indices is not None:
        test = sorted(set(int(i) for i in test_indices))
        if test and not 0 <= test[0] <= test[-1] < len(samples):
            raise DataError("fixed test index out of range")
        held = set(test)
        return [i for i in range(len(samples)) if i not in held], test
    if not 0 < test_frac < 1:
        raise ConfigError("test_frac must be in (0, 1)")
    train, test = [], []
    for author, idx in by_author(samples).items():
        if len(idx) < 2:
            raise DataError(f"author {author!r} has {len(idx)} sample(s); at least 2 needed to split")
        n_test = max(1, int(np.floor(len(idx) * test_frac)))
        order = [idx[j] for j in _author_rng(seed, "split", author).permutation(len(idx))]
        test.extend(order[:n_test])
        train.extend(order[n_test:])
    return sorted(train), sorted(test)


def stratified_split(samples: Sequence[Sample], test_frac: float = 0.2, seed: int = 0,
                     test_indices: Sequence[int] | None = None) -> tuple[list[Sample], list[Sample]]:
    train, test = stratified_split_indices(samples, test_frac, seed, test_indices)
    return [samples[i] for i in train], [samples[i] for i in test]


def balanced_subset_indices(samples: Sequence[Sample], n_authors: int, seed: int = 0) -> list[int]:
    groups = by_author(samples)
    if n_authors < 2:
        raise ConfigError("balanced_subset needs n_authors >= 2")
    if n_authors > len(groups):
        raise ConfigError(f"asked for {n_authors} authors but only {len(groups)} present")
    names = list(groups)
    rng = SplitMix64(seed).derive("subset")
    chosen = sorted(names[j] for j in rng.permutation(len(names))[:n_authors])
    n_min = min(len(groups[a]) for a in chosen)
    keep = []
    for author in chosen:
        idx = groups[author]
        pick = _author_rng(seed, "subset", author).permutation(len(idx))[:n_min]
        keep.extend(idx[j] for j in pick)
    return sorted(keep)


def balanced_subset(samples: Sequence[Sample], n_authors: int, seed: int = 0) -> list[Sample]:
    """Random ``n_authors`` authors, each truncated to the smallest count among them."""
    return [samples[i] for i in balanced_subset_indices(samples, n_authors, seed)]


def kfold_indices(samples: Sequence[Sample], k: int = 5, seed: int = 0) -> list[tuple[list[int], list[int]]]:
    if k < 2:
        raise ConfigError("kfold needs k >= 2")
    parts: list[list[int]] = [[] for _ in range(k)]
    for author, idx in by_author(samples).items():
        if len(idx) < k:
            raise DataError(f"author {author!r} has {len(idx)} samples, fewer than k={k}")
        order = np.array(idx)[_author_rng(seed, "kfold", author).permutation(len(idx))]
        for fold, chunk in enumerate(np.array_split(order, k)):
            parts[fold].extend(int(i) for i in chunk)
    folds = []
    for fold in range(k):
        val = sorted(parts[fold])
        held = set(val)
        folds.append(([i for i in range(len(samples)) if i not in held], val))
    return folds


def kfold_split(samples: Sequence[Sample], k: int = 5, seed: int = 0) -> list[tuple[list[Sample], list[Sample]]]:
    """Author-stratified k-fold partition; fold i validates on every author's i-th part."""
    return [([samples[i] for i in tr], [samples[i] for i in va]) for tr, va in kfold_indices(samples, k, seed)]


def write_manifest(path, partitions: dict[str, list[int]]) -> None:
    Path(path).write_text(json.dumps({k: list(map(int, v)) for k, v in partitions.items()}, indent=1) + "\n",
                          encoding="utf-8")


def read_manifest(path) -> dict[str, list[int]]:
    return {k: list(v) for k, v in json.loads(Path(path).read_text(encoding="utf-8")).items()}
