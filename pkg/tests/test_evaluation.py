import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ulmfit_aa.awd_lstm import LanguageModel, ModelConfig
from ulmfit_aa.errors import ConfigError, DataError
from ulmfit_aa.evaluation import compute_metrics, generate_text, kfold_summary, perplexity
from ulmfit_aa.rng import SplitMix64
from ulmfit_aa.tokenizers import CharTokenizer


def test_perplexity():
    assert perplexity(0.0) == 1.0
    assert perplexity(math.log(47.52)) == pytest.approx(47.52, rel=1e-12)
    assert perplexity(math.log(188)) == pytest.approx(188)
    with pytest.raises(DataError):
        perplexity(float("inf"))


def test_metrics_all_correct():
    m = compute_metrics([0, 1, 1, 0], [0, 1, 1, 0])
    assert m.accuracy == 1.0 and m.macro_f1 == 1.0


def test_metrics_all_class_zero():
    m = compute_metrics([0] * 6, [0, 0, 1, 1, 2, 2])
    assert m.accuracy == pytest.approx(1 / 3)
    assert m.precision[0] == pytest.approx(1 / 3) and m.recall[0] == 1.0
    assert m.macro_f1 == pytest.approx(1 / 6)
    assert m.f1[1] == m.f1[2] == 0.0


def test_metrics_label_out_of_range():
    with pytest.raises(DataError, match="label 3"):
        compute_metrics([0, 1], [0, 3], n_classes=3)


def test_metrics_json():
    doc = json.loads(compute_metrics([0, 1, 1], [0, 1, 0]).to_json())
    assert set(doc) >= {"accuracy", "macro_f1", "per_class", "confusion"}
    assert doc["confusion"] == [[1, 1], [0, 1]]


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40), st.permutations(range(4)))
def test_metrics_permutation_equivariant(pairs, perm):
    pred, true = map(list, zip(*pairs))
    a = compute_metrics(pred, true, n_classes=4)
    b = compute_metrics([perm[p] for p in pred], [perm[t] for t in true], n_classes=4)
    assert b.accuracy == a.accuracy
    assert b.macro_f1 == pytest.approx(a.macro_f1, abs=1e-15)
    ca, cb = np.array(a.confusion), np.array(b.confusion)
    np.testing.assert_array_equal(cb[np.ix_(perm, perm)], ca)
    for c in range(4):
        assert b.f1[perm[c]] == pytest.approx(a.f1[c], abs=1e-15)
        assert 0.0 <= a.f1[c] <= 1.0


def test_kfold_summary_hand_example():
    s = kfold_summary([0.90, 0.92, 0.94, 0.91, 0.93])
    assert s.mean == pytest.approx(0.92, abs=1e-12)
    assert s.std == pytest.approx(0.015811, abs=1e-6)
    assert s.margin == pytest.approx(0.019632, abs=1e-6)
    assert s.margin_pct == pytest.approx(100 * s.margin / 0.92)


def test_kfold_summary_equal_and_errors():
    assert kfold_summary([0.5, 0.5, 0.5]).margin == 0.0
    with pytest.raises(ConfigError):
        kfold_summary([0.9])


def test_kfold_summary_margin_shrinks_with_k():
    # margin * sqrt(k) / s is the t critical value: 2.7764 (4 df), 2.2622 (9 df)
    rng = np.random.default_rng(0)
    for k, t_crit in ((5, 2.7764), (10, 2.2622)):
        s = kfold_summary(rng.uniform(0.8, 1.0, k))
        assert s.margin * math.sqrt(k) / s.std == pytest.approx(t_crit, abs=1e-4)


def _delta_lm(vocab_size: int, target: int) -> LanguageModel:
    cfg = ModelConfig(vocab_size=vocab_size, embedding_size=4, hidden_size=6, n_layers=1)
    lm = LanguageModel.create(cfg, SplitMix64(0))
    lm.params["decoder.bias"].data[:] = -1e3
    lm.params["decoder.bias"].data[target] = 1e3
    return lm


def test_generate_delta_distribution_repeats():
    tok = CharTokenizer.train("abc")
    lm = _delta_lm(len(tok.vocab), tok.vocab.lookup("b"))
    out = generate_text(lm, tok, "a", 5, temperature=0.8, seed=1)
    assert out == "a" + "b" * 5


def test_generate_greedy_deterministic():
    tok = CharTokenizer.train("hello world")
    cfg = ModelConfig(vocab_size=len(tok.vocab), embedding_size=4, hidden_size=6, n_layers=2)
    lm = LanguageModel.create(cfg, SplitMix64(3))
    a = generate_text(lm, tok, "he", 8, temperature=0.0, seed=1)
    assert a == generate_text(lm, tok, "he", 8, temperature=0.0, seed=2)
    assert a.startswith("he")


def test_generate_errors():
    tok = CharTokenizer.train("ab")
    lm = _delta_lm(len(tok.vocab), 4)
    with pytest.raises(DataError):
        generate_text(lm, tok, "   ", 3)
    with pytest.raises(ConfigError):
        generate_text(lm, tok, "a", 0)
    with pytest.raises(ConfigError):
        generate_text(lm, tok, "a", 3, temperature=-1)
