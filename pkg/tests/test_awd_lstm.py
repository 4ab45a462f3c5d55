import numpy as np
import pytest

from ulmfit_aa import autodiff as ad
from ulmfit_aa import awd_lstm
from ulmfit_aa.autodiff import Tape, Tensor, finite_difference_check
from ulmfit_aa.awd_lstm import (
    Classifier, LanguageModel, ModelConfig, apply_weight_drop, classifier_forward, embedding_dropout,
    encoder_forward, init_classifier_head, lm_decode, lstm_cell_forward, pool_concat, variational_mask,
)
from ulmfit_aa.errors import ConfigError, DataError, ShapeError
from ulmfit_aa.rng import SplitMix64

NO_DROPOUT = {k: 0.0 for k in awd_lstm.BASE_DROPOUTS}


def toy_config(**kw):
    base = dict(vocab_size=20, embedding_size=8, hidden_size=12, n_layers=3, base_dropouts=NO_DROPOUT)
    base.update(kw)
    return ModelConfig(**base)


def _cell_params(rng, d_in, H):
    W = Tensor(rng.uniform(-0.5, 0.5, (d_in, 4 * H)), requires_grad=True)
    U = Tensor(rng.uniform(-0.5, 0.5, (H, 4 * H)), requires_grad=True)
    b = Tensor(rng.uniform(-0.5, 0.5, 4 * H), requires_grad=True)
    return W, U, b


# --- cell ------------------------------------------------------------------

def test_cell_all_zero_gives_zero_state():
    H = 3
    z = lambda *s: Tensor(np.zeros(s))
    h, c = lstm_cell_forward(z(2, 4), z(2, H), z(2, H), z(4, 4 * H), z(H, 4 * H), z(4 * H))
    np.testing.assert_array_equal(h.data, 0.0)
    np.testing.assert_array_equal(c.data, 0.0)


def test_cell_saturated_gates_preserve_memory():
    H = 3
    rng = np.random.default_rng(0)
    b = np.zeros(4 * H)
    b[:H] = -60.0      # input gate closed
    b[H:2 * H] = 60.0  # forget gate open
    c0 = rng.standard_normal((2, H))
    _, c = lstm_cell_forward(Tensor(rng.standard_normal((2, 4))), Tensor(rng.standard_normal((2, H))),
                             Tensor(c0), Tensor(np.zeros((4, 4 * H))), Tensor(np.zeros((H, 4 * H))), Tensor(b))
    np.testing.assert_allclose(c.data, c0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_cell_gradient_check(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    h = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    c = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    W, U, b = _cell_params(rng, 3, 4)
    probe = rng.standard_normal((2, 8))

    def f(ps):
        h2, c2 = lstm_cell_forward(*ps)
        return ad.sum_all(ad.multiply(ad.concat([h2, c2]), Tensor(probe)))
    assert finite_difference_check(f, [x, h, c, W, U, b], eps=1e-6) <= 1e-4


def test_fused_sequence_matches_composed_cells():
    rng = np.random.default_rng(3)
    B, T, D, H = 2, 6, 3, 4
    W, U, b = _cell_params(rng, D, H)
    x = Tensor(rng.standard_normal((B, T, D)), requires_grad=True)
    h0, c0 = rng.standard_normal((B, H)), rng.standard_normal((B, H))
    probe = rng.standard_normal((B, T, H))

    with Tape() as tape:
        hs, h_last, c_last = ad.lstm_sequence(x, W, U, b, h0, c0)
        loss = ad.sum_all(ad.multiply(hs, Tensor(probe)))
    tape.backward(loss)
    fused = [p.grad.copy() for p in (x, W, U, b)]

    with Tape() as tape:
        h, c, steps = Tensor(h0), Tensor(c0), []
        for t in range(T):
            h, c = lstm_cell_forward(ad.select(x, t, axis=1), h, c, W, U, b)
            steps.append(ad.sum_all(ad.multiply(h, Tensor(probe[:, t]))))
        loss2 = steps[0]
        for s in steps[1:]:
            loss2 = ad.add(loss2, s)
    tape.backward(loss2)
    np.testing.assert_allclose(h.data, h_last, rtol=0, atol=1e-14)
    np.testing.assert_allclose(c.data, c_last, rtol=0, atol=1e-14)
    for got, p in zip(fused, (x, W, U, b)):
        np.testing.assert_allclose(got, p.grad, rtol=1e-12, atol=1e-13)


# --- regularisers ----------------------------------------------------------

def test_weight_drop_edge_probabilities():
    U = Tensor(np.arange(6.0).reshape(2, 3))
    rng = SplitMix64(1)
    assert apply_weight_drop(U, 0.0, rng) is U
    np.testing.assert_array_equal(apply_weight_drop(U, 1.0, rng).data, 0.0)
    assert apply_weight_drop(U, 0.5, rng, training=False) is U
    with pytest.raises(ValueError):
        apply_weight_drop(U, 1.5, rng)


def test_weight_drop_fraction_and_scaling():
    U = Tensor(np.ones((1000, 1000)))
    masked = apply_weight_drop(U, 0.5, SplitMix64(7)).data
    zero_frac = np.mean(masked == 0.0)
    assert abs(zero_frac - 0.5) <= 0.002
    assert set(np.unique(masked)) == {0.0, 2.0}


def test_variational_mask_reused_over_time():
    rng = SplitMix64(3)
    x = Tensor(np.ones((2, 20, 5)))
    out = ad.masked_multiply(x, variational_mask((2, 1, 5), 0.4, rng)).data
    np.testing.assert_array_equal(out[:, 0] == 0, out[:, 17] == 0)
    with pytest.raises(ValueError):
        variational_mask((2, 1, 5), 1.0, rng)


def test_embedding_dropout_rows():
    rng = SplitMix64(11)
    E = Tensor(np.ones((50, 4)))
    assert embedding_dropout(E, 0.0, rng) is E
    dropped = embedding_dropout(E, 0.5, rng)
    ids = np.array([[1, 2, 1, 3], [3, 1, 2, 2]])
    looked = ad.row_lookup(dropped, ids).data
    for tok in (1, 2, 3):
        rows = looked[ids == tok]
        assert np.all(rows == 0) or np.all(rows == 2.0)
    with pytest.raises(ValueError):
        embedding_dropout(E, 1.0, rng)


def test_dropout_preserves_expectation():
    # inverted dropout: E[mask * a] = a, checked at 3 sigma over 1e5 samples
    a = np.array([0.3, -1.2, 2.0])
    p = 0.4
    rng = SplitMix64(5)
    samples = variational_mask((100_000, 3), p, rng) * a
    sigma = np.abs(a) * np.sqrt(p / (1 - p)) / np.sqrt(100_000)
    assert np.all(np.abs(samples.mean(axis=0) - a) <= 3 * sigma)


# --- encoder / decoder -----------------------------------------------------

def test_encoder_full_size_output_shape():
    config = ModelConfig(vocab_size=50)
    lm = LanguageModel.create(config, SplitMix64(0))
    ids = np.zeros((2, 5), dtype=int)
    enc = encoder_forward(ids, lm.params, config, "eval")
    assert enc.output.shape == (2, 5, 400)
    assert [o.shape[-1] for o in enc.layer_outputs] == [1150, 1150, 400]


def test_encoder_eval_deterministic_and_train_without_dropout_equals_eval():
    config = toy_config()
    lm = LanguageModel.create(config, SplitMix64(1))
    ids = np.array([[1, 2, 3, 4, 5], [5, 4, 3, 2, 1]])
    a = encoder_forward(ids, lm.params, config, "eval").output.data
    b = encoder_forward(ids, lm.params, config, "eval").output.data
    c = encoder_forward(ids, lm.params, config, "train", SplitMix64(9)).output.data
    assert a.tobytes() == b.tobytes() == c.tobytes()


def test_encoder_reports_out_of_range_position():
    config = toy_config()
    lm = LanguageModel.create(config, SplitMix64(1))
    with pytest.raises(DataError, match=r"\(1, 2\)"):
        encoder_forward(np.array([[1, 2, 3], [1, 2, 20]]), lm.params, config)


def test_weight_drop_sampled_once_per_layer_per_sequence(monkeypatch):
    config = toy_config(base_dropouts=dict(awd_lstm.BASE_DROPOUTS))
    lm = LanguageModel.create(config, SplitMix64(2))
    seen = []
    real = ad.lstm_sequence

    def spy(x, W, U, b, h0, c0):
        seen.append(U.data.copy())
        return real(x, W, U, b, h0, c0)
    monkeypatch.setattr(ad, "lstm_sequence", spy)
    encoder_forward(np.ones((2, 30), dtype=int), lm.params, config, "train", SplitMix64(4))
    # one masked matrix per layer covers all 30 time steps
    assert len(seen) == config.n_layers
    assert np.any(seen[0] == 0)


def test_tied_decode_is_exact_and_shares_storage():
    config = toy_config()
    lm = LanguageModel.create(config, SplitMix64(3))
    lm.params["decoder.bias"].data[:] = np.linspace(-1, 1, 20)
    hidden = Tensor(np.random.default_rng(0).standard_normal((2, 5, 8)))
    logits = lm_decode(hidden, lm.params, config).data
    expected = hidden.data @ lm.params["embedding"].data.T + lm.params["decoder.bias"].data
    assert logits.tobytes() == expected.tobytes()
    lm.params["embedding"].data[7] += 1.0
    changed = lm_decode(hidden, lm.params, config).data != logits
    assert np.all(changed[..., 7]) and not np.any(np.delete(changed, 7, axis=-1))


def test_zero_hidden_decodes_to_uniform():
    config = toy_config()
    lm = LanguageModel.create(config, SplitMix64(3))
    logits = lm_decode(Tensor(np.zeros((1, 3, 8))), lm.params, config)
    loss = ad.cross_entropy_flat(logits, np.array([[0, 5, 19]]))
    assert loss.data == pytest.approx(np.log(20), abs=1e-12)


def test_decode_large_vocab_shape_and_dim_check():
    config = ModelConfig(vocab_size=30000, hidden_size=16, n_layers=1)
    params = {"embedding": Tensor(np.zeros((30000, 400))), "decoder.bias": Tensor(np.zeros(30000))}
    assert lm_decode(Tensor(np.zeros((2, 5, 400))), params, config).shape == (2, 5, 30000)
    with pytest.raises(ShapeError):
        lm_decode(Tensor(np.zeros((2, 5, 300))), params, config)


@pytest.mark.parametrize("seed", range(5))
def test_full_model_gradient_check(seed):
    config = toy_config()
    lm = LanguageModel.create(config, SplitMix64(seed))
    r = np.random.default_rng(seed)
    ids, targets = r.integers(0, 20, (2, 5)), r.integers(0, 20, (2, 5))
    names = list(lm.params)

    def f(ps):
        params = dict(zip(names, ps))
        enc = encoder_forward(ids, params, config, "eval")
        return ad.cross_entropy_flat(lm_decode(enc.output, params, config), targets)
    assert finite_difference_check(f, [lm.params[n] for n in names], eps=1e-6) <= 1e-4


# --- classifier ------------------------------------------------------------

def test_pool_constant_sequence_gives_three_copies():
    v = np.array([0.5, -1.0, 2.0])
    pooled = pool_concat(Tensor(np.broadcast_to(v, (2, 7, 3)).copy())).data
    np.testing.assert_array_equal(pooled, np.tile(v, (2, 3)))
    with pytest.raises(ShapeError):
        pool_concat(Tensor(np.zeros((2, 0, 3))))


def test_pool_ignores_left_padding():
    seq = np.random.default_rng(2).standard_normal((1, 5, 2))
    mask = np.array([[0, 0, 1, 1, 1]])
    pooled = pool_concat(Tensor(seq), mask).data
    np.testing.assert_allclose(pooled, pool_concat(Tensor(seq[:, 2:])).data)


def test_classifier_rows_sum_to_one_and_width():
    config = toy_config(n_classes=16)
    lm = LanguageModel.create(config, SplitMix64(0))
    clf = Classifier.from_encoder(lm.encoder_params(), config, SplitMix64(1))
    ids = np.random.default_rng(0).integers(0, 20, (4, 6))
    probs = clf.predict_proba(ids)
    assert probs.shape == (4, 16)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_classifier_argmax_invariant_to_logit_shift():
    config = toy_config(n_classes=3)
    params, buffers = init_classifier_head(config, SplitMix64(4))
    hidden = Tensor(np.random.default_rng(1).standard_normal((5, 4, 8)))
    p1 = classifier_forward(hidden, params, buffers, config)
    params["head.linear2.b"].data += 123.0
    p2 = classifier_forward(hidden, params, buffers, config)
    np.testing.assert_array_equal(p1.argmax(axis=1), p2.argmax(axis=1))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=0)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=5, dropout_multiplier=3.0)
    cfg = ModelConfig(vocab_size=5)
    assert cfg.dropout("weight_drop") == 0.25
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
