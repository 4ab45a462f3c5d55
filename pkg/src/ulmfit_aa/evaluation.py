"""Classification metrics, k-fold summaries, perplexity and LM text generation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from . import autodiff as ad
from .errors import ConfigError, DataError
from .rng import SplitMix64


def perplexity(mean_loss: float) -> float:
    if not math.isfinite(mean_loss):
        raise DataError(f"perplexity: loss {mean_loss} is not finite")
    return math.exp(mean_loss)


@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    weighted_f1: float
    confusion: list[list[int]]      # rows: true class, columns: predicted class
    precision: list[float]
    recall: list[float]
    f1: list[float]
    average: str = "macro"

    @property
    def f1_score(self) -> float:
        return self.macro_f1 if self.average == "macro" else self.weighted_f1

    def to_json(self) -> str:
        per_class = [{"precision": p, "recall": r, "f1": f} for p, r, f in zip(self.precision, self.recall, self.f1)]
        return json.dumps({"accuracy": self.accuracy, "macro_f1": self.macro_f1, "weighted_f1": self.weighted_f1,
                           "f1": self.f1_score, "average": self.average, "per_class": per_class,
                           "confusion": self.confusion})


def _safe_div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.divide(a, b, out=np.zeros_like(a, dtype=float), where=b > 0)


def compute_metrics(predictions: Sequence[int], labels: Sequence[int], n_classes: int | None = None,
                    average: str = "macro") -> Metrics:
    """Accuracy, per-class P/R/F1 and their macro (default) or support-weighted mean."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1 or pred.size == 0:
        raise DataError("compute_metrics: predictions and labels must be equal-length non-empty 1-D")
    if average not in ("macro", "weighted"):
        raise ConfigError(f"unknown F1 average {average!r}")
    if n_classes is None:
        n_classes = int(max(pred.max(), true.max())) + 1
    for name, arr in (("label", true), ("prediction", pred)):
        bad = np.flatnonzero((arr < 0) | (arr >= n_classes))
        if bad.size:
            raise DataError(f"compute_metrics: {name} {arr[bad[0]]} at index {bad[0]} outside classes 0..{n_classes - 1}")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    tp = np.diag(confusion).astype(float)
    precision = _safe_div(tp, confusion.sum(axis=0).astype(float))
    support = confusion.sum(axis=1).astype(float)
    recall = _safe_div(tp, support)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return Metrics(
        accuracy=float(tp.sum() / confusion.sum()),
        macro_f1=float(f1.mean()),
        weighted_f1=float((f1 * support).sum() / support.sum()),
        confusion=confusion.tolist(),
        precision=precision.tolist(), recall=recall.tolist(), f1=f1.tolist(),
        average=average,
    )


@dataclass
class FoldSummary:
    scores: list[float]
    mean: float
    std: float
    margin: float
    margin_pct: float
    confidence: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def __str__(self) -> str:
        return f"{self.mean:.6g} ±{self.margin:.3g} (±{self.margin_pct:.2f}%)"


def kfold_summary(scores: Sequence[float], confidence: float = 0.95) -> FoldSummary:
    """Mean with a Student-t margin of error over k folds."""
    x = np.asarray(scores, dtype=float)
    k = x.size
    if k < 2:
        raise ConfigError("kfold_summary needs at least 2 fold scores")
    if not 0 < confidence < 1:
        raise ConfigError("confidence must be in (0, 1)")
    mean = float(x.mean())
    s = float(x.std(ddof=1))
    margin = float(stats.t.ppf((1 + confidence) / 2, k - 1) * s / math.sqrt(k))
    pct = 100.0 * margin / abs(mean) if mean else 0.0
    return FoldSummary(x.tolist(), mean, s, margin, pct, confidence)


def sample_token(logits: np.ndarray, temperature: float, rng: SplitMix64) -> int:
    if temperature == 0:
        return int(np.argmax(logits))
    return rng.choice(ad.softmax(logits / temperature))


def generate_text(lm, tokenizer, prompt: str, n_tokens: int, temperature: float = 0.8, seed: int = 0) -> str:
    """Continue ``prompt`` for ``n_tokens`` tokens; temperature 0 is greedy."""
    if n_tokens < 1:
        raise ConfigError("generate_text: n_tokens must be >= 1")
    if temperature < 0:
        raise ConfigError("generate_text: temperature must be >= 0")
    prompt_ids = tokenizer.encode(prompt, add_special=False)
    if not prompt_ids:
        raise DataError("generate_text: prompt is empty after tokenization")
    rng = SplitMix64(seed).derive("generate")
    logits, state = lm.forward(np.array([[tokenizer.bos_id] + prompt_ids]))
    out = []
    for _ in range(n_tokens):
        nxt = sample_token(logits.data[0, -1], temperature, rng)
        out.append(nxt)
        logits, state = lm.forward(np.array([[nxt]]), state=state)
    return tokenizer.decode(prompt_ids + out)
