import json

import pytest

from synthetic import synthetic_corpus
from ulmfit_aa.cli import RunConfig, main
from ulmfit_aa.errors import ConfigError


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    texts, labels = synthetic_corpus(n_authors=2, samples_per_author=6, words_per_sample=40, seed=2)
    corpus = root / "corpus"
    for i, (text, author) in enumerate(zip(texts, labels)):
        (corpus / author).mkdir(parents=True, exist_ok=True)
        (corpus / author / f"{i:03d}.txt").write_text(text, encoding="utf-8")
    cfg = {"corpus": str(corpus), "mode": "char", "chunk_words": 20,
           "model": {"embedding_size": 6, "hidden_size": 8, "n_layers": 2, "head_hidden": 5},
           "epochs": 1, "batch_size": 4, "bptt": 16, "lr": 5e-3, "unfreeze_epochs": [1]}
    (root / "cfg.json").write_text(json.dumps(cfg))
    return root


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_run_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"epochs": 1, "colour": "red"})
    with pytest.raises(ConfigError, match="model"):
        RunConfig.from_dict({"model": {"width": 3}})


def test_pretrain_deterministic_and_stages(workspace, capsys):
    ws = workspace
    for run in ("a", "b"):
        code, _, _ = _run(["pretrain", "--config", ws / "cfg.json", "--seed", 42, "--out", ws / run], capsys)
        assert code == 0
    for f in ("weights.bin", "manifest.json", "tokenizer/vocab.txt"):
        assert (ws / "a/checkpoint" / f).read_bytes() == (ws / "b/checkpoint" / f).read_bytes()
    assert json.loads((ws / "a/report.json").read_text())["stage"] == "pretrain"

    code, _, _ = _run(["finetune", "--config", ws / "cfg.json", "--checkpoint", ws / "a/checkpoint",
                       "--out", ws / "ft"], capsys)
    assert code == 0
    code, out, _ = _run(["train-classifier", "--config", ws / "cfg.json", "--checkpoint", ws / "ft/checkpoint",
                         "--out", ws / "clf"], capsys)
    assert code == 0
    assert 0.0 <= json.loads(out)["accuracy"] <= 1.0
    split = json.loads((ws / "clf/split.json").read_text())
    assert not set(split["train"]) & set(split["test"])

    sample = next((ws / "corpus/author0").glob("*.txt"))
    code, out, _ = _run(["predict", "--checkpoint", ws / "clf/checkpoint", "--text-file", sample], capsys)
    assert code == 0
    pred = json.loads(out)
    assert pred["author"] in ("author0", "author1")
    assert abs(sum(pred["probabilities"].values()) - 1.0) < 1e-9

    code, out, _ = _run(["evaluate", "--config", ws / "cfg.json", "--checkpoint", ws / "clf/checkpoint",
                         "--split", ws / "clf/split.json"], capsys)
    assert code == 0 and "macro_f1" in json.loads(out)

    # a classifier checkpoint cannot seed an LM stage
    code, _, err = _run(["finetune", "--config", ws / "cfg.json", "--checkpoint", ws / "clf/checkpoint",
                         "--out", ws / "bad"], capsys)
    assert code == 2 and "head shape mismatch" in err

    code, out, _ = _run(["generate", "--checkpoint", ws / "a/checkpoint", "--prompt", "ab",
                         "--n-tokens", 5, "--temperature", 0], capsys)
    assert code == 0 and out.startswith("ab")


def test_lr_find_csv(workspace, capsys):
    code, out, _ = _run(["lr-find", "--config", workspace / "cfg.json", "--steps", 8], capsys)
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "lr,smoothed_loss"
    assert lines[-1].startswith("suggested_lr,")
    assert float(lines[1].split(",")[0]) == 1e-7


def test_build_vocab_and_subset(workspace, capsys):
    code, out, _ = _run(["build-vocab", "--corpus", workspace / "corpus", "--mode", "word",
                         "--out", workspace / "wv"], capsys)
    assert code == 0 and (workspace / "wv/vocab.txt").exists()
    code, _, _ = _run(["train-subword", "--corpus", workspace / "corpus", "--vocab-size", 40,
                       "--out", workspace / "sw"], capsys)
    assert code == 0 and (workspace / "sw/subword.tsv").exists()
    code, out, _ = _run(["subset", "--config", workspace / "cfg.json", "--n-authors", 2,
                         "--out", workspace / "sub"], capsys)
    assert code == 0 and json.loads(out)["authors"] == ["author0", "author1"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(workspace, capsys, tmp_path):
    code, _, err = _run(["pretrain", "--bogus-flag"], capsys)
    assert code == 1 and "usage" in err
    assert _run(["frobnicate"], capsys)[0] == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epochs": 1, "shape": 3}))
    code, _, err = _run(["pretrain", "--config", bad, "--out", tmp_path / "o"], capsys)
    assert code == 1 and "unknown" in err
    code, _, _ = _run(["pretrain", "--corpus", tmp_path / "missing", "--out", tmp_path / "o"], capsys)
    assert code == 2
    diverge = tmp_path / "div.json"
    cfg = json.loads((workspace / "cfg.json").read_text())
    cfg.update(lr=1e300, epochs=1)
    diverge.write_text(json.dumps(cfg))
    code, _, err = _run(["pretrain", "--config", diverge, "--out", tmp_path / "d"], capsys)
    assert code == 3 and "diverged" in err
    assert (tmp_path / "d/checkpoint/weights.bin").exists()     # last good weights kept
