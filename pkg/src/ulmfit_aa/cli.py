"""``ulmfit-aa`` command line: one subcommand per pipeline operation.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import autodiff as ad
from . import corpus as corpus_mod
from .autodiff import AdamState, Tape, backward
from .awd_lstm import LanguageModel, ModelConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, DivergenceError
from .evaluation import generate_text, kfold_summary
from .pipeline import (
    TrainConfig, encode_stream, evaluate_classifier, finetune_lm, make_lm_batches, predict_author,
    pretrain_lm, train_classifier,
)
from .rng import SplitMix64
from .schedules import lr_find
from .tokenizers import load_tokenizer, train_tokenizer

log = logging.getLogger("ulmfit_aa")

MODEL_KEYS = ("embedding_size", "hidden_size", "n_layers", "head_hidden", "tie_weights", "base_dropouts")


@dataclass
class RunConfig:
    """Contents of a ``--config`` JSON file: TrainConfig fields plus paths and options."""

    train: TrainConfig = field(default_factory=TrainConfig)
    model: dict = field(default_factory=dict)
    corpus: str | None = None
    tokenizer: str | None = None
    checkpoint: str | None = None
    out: str | None = None
    mode: str = "char"
    vocab_size: int = 30000
    max_vocab: int = 60000
    min_count: int = 3
    chunk_words: int = 750
    test_frac: float = 0.2
    valid_frac: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        own = {f.name for f in fields(cls)} - {"train"}
        kwargs = {k: d.pop(k) for k in list(d) if k in own}
        bad_model = sorted(set(kwargs.get("model", {})) - set(MODEL_KEYS))
        if bad_model:
            raise ConfigError(f"unknown model config keys: {bad_model}")
        if kwargs.get("mode", "char") not in ("word", "subword", "char"):
            raise ConfigError(f"mode must be word, subword or char, got {kwargs['mode']!r}")
        return cls(train=TrainConfig.from_dict(d), **kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        try:
            return cls.from_dict(raw)
        except TypeError as exc:
            raise ConfigError(f"invalid config {path}: {exc}") from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --- helpers -----------------------------------------------------------------

def _run_config(args, stage: str | None = None) -> RunConfig:
    rc = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if stage is not None:
        overrides["stage"] = stage
    if overrides:
        rc.train = TrainConfig.from_dict({**rc.train.to_dict(), **overrides})
    for name in ("corpus", "tokenizer", "checkpoint", "out"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(rc, name, value)
    return rc


def _need(rc: RunConfig, name: str) -> str:
    value = getattr(rc, name)
    if value is None:
        raise ConfigError(f"missing --{name} (or '{name}' in the config file)")
    return value


def _out_dir(rc: RunConfig) -> Path:
    out = Path(_need(rc, "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


def _log_epoch(report) -> None:
    log.info(report.log_lines()[-1])


def _tokenizer_for(rc: RunConfig, texts: list[str]):
    if rc.tokenizer:
        return load_tokenizer(rc.tokenizer)
    return _train_tok(rc, texts)


def _train_tok(rc: RunConfig, texts: list[str]):
    joined = "\n".join(texts)
    if rc.mode == "word":
        return train_tokenizer("word", joined, max_size=rc.max_vocab, min_count=rc.min_count)
    if rc.mode == "subword":
        return train_tokenizer("subword", joined, vocab_size=rc.vocab_size, min_count=rc.min_count)
    return train_tokenizer("char", joined)


def _model_config(rc: RunConfig, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, dropout_multiplier=rc.train.dropout_multiplier, **rc.model)


def _labeled_split(rc: RunConfig):
    samples = corpus_mod.chunk_documents(corpus_mod.ingest(_need(rc, "corpus")), rc.chunk_words)
    if not samples:
        raise DataError(f"no {rc.chunk_words}-word samples in {rc.corpus}")
    train_idx, test_idx = corpus_mod.stratified_split_indices(samples, rc.test_frac, rc.train.seed)
    return samples, train_idx, test_idx


def _save_stage(out: Path, model, tokenizer, rc: RunConfig, report) -> None:
    save_checkpoint(model, tokenizer, out / "checkpoint", rc.train.to_dict())
    report.checkpoint_path = str(out / "checkpoint")
    _write_json(out / "report.json", report.to_dict())


# --- commands ----------------------------------------------------------------

def cmd_build_vocab(args) -> int:
    rc = _run_config(args)
    if args.mode:
        rc.mode = args.mode
    if rc.mode == "subword":
        raise ConfigError("use train-subword for the sub-word tokenizer")
    tok = _train_tok(rc, corpus_mod.read_texts(_need(rc, "corpus")))
    out = _out_dir(rc)
    tok.save(out)
    print(f"{tok.mode} vocabulary of {len(tok.vocab)} tokens written to {out}")
    return 0


def cmd_train_subword(args) -> int:
    rc = _run_config(args)
    rc.mode = "subword"
    if args.vocab_size:
        rc.vocab_size = args.vocab_size
    tok = _train_tok(rc, corpus_mod.read_texts(_need(rc, "corpus")))
    out = _out_dir(rc)
    tok.save(out)
    print(f"sub-word model of {len(tok.vocab)} pieces written to {out}")
    return 0


def cmd_pretrain(args) -> int:
    rc = _run_config(args, "pretrain")
    texts = corpus_mod.read_texts(_need(rc, "corpus"))
    tok = _tokenizer_for(rc, texts)
    out = _out_dir(rc)
    mc = _model_config(rc, len(tok.vocab))
    try:
        lm, report = pretrain_lm(texts, tok, mc, rc.train, on_epoch=_log_epoch)
    except DivergenceError as exc:
        # keep the last good weights next to the error
        if getattr(exc, "last_good", None) is not None:
            save_checkpoint(exc.last_good, tok, out / "checkpoint", rc.train.to_dict())
        raise
    _save_stage(out, lm, tok, rc, report)
    return 0


def cmd_finetune(args) -> int:
    rc = _run_config(args, "finetune")
    ckpt = load_checkpoint(_need(rc, "checkpoint"), expect_kind="lm")
    tok = load_tokenizer(rc.tokenizer) if rc.tokenizer else ckpt.tokenizer
    samples, train_idx, _ = _labeled_split(rc)
    texts = [samples[i].text for i in train_idx]
    out = _out_dir(rc)
    try:
        lm, report = finetune_lm(ckpt.model, texts, tok, rc.train, ckpt.fingerprint, on_epoch=_log_epoch)
    except DivergenceError as exc:
        if getattr(exc, "last_good", None) is not None:
            save_checkpoint(exc.last_good, tok, out / "checkpoint", rc.train.to_dict())
        raise
    _save_stage(out, lm, tok, rc, report)
    return 0


def _classifier_on(rc, ckpt, samples, train_idx, valid_idx):
    texts = lambda idx: [samples[i].text for i in idx]
    authors = lambda idx: [samples[i].author for i in idx]
    return train_classifier(ckpt.model.encoder_params(), ckpt.model.config, ckpt.tokenizer,
                            texts(train_idx), authors(train_idx), texts(valid_idx), authors(valid_idx),
                            rc.train, on_epoch=_log_epoch)


def cmd_train_classifier(args) -> int:
    rc = _run_config(args, "classify")
    ckpt = load_checkpoint(_need(rc, "checkpoint"), expect_kind="lm")
    samples, train_idx, test_idx = _labeled_split(rc)
    sub = [samples[i] for i in train_idx]
    fit, valid = corpus_mod.stratified_split_indices(sub, rc.valid_frac, rc.train.seed + 1)
    fit_idx, valid_idx = [train_idx[i] for i in fit], [train_idx[i] for i in valid]
    out = _out_dir(rc)
    clf, valid_metrics, report = _classifier_on(rc, ckpt, samples, fit_idx, valid_idx)
    test_metrics = evaluate_classifier(clf, ckpt.tokenizer, [samples[i].text for i in test_idx],
                                       [samples[i].author for i in test_idx], rc.train.batch_size, rc.train.max_len)
    _save_stage(out, clf, ckpt.tokenizer, rc, report)
    corpus_mod.write_manifest(out / "split.json", {"train": fit_idx, "valid": valid_idx, "test": test_idx})
    (out / "metrics.json").write_text(test_metrics.to_json() + "\n", encoding="utf-8")
    print(test_metrics.to_json())
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint, expect_kind="classifier")
    try:
        text = Path(args.text_file).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {args.text_file}: {exc}") from exc
    author, probs = predict_author(ckpt.model, ckpt.tokenizer, text)
    print(json.dumps({"author": author,
                      "probabilities": {a: float(p) for a, p in zip(ckpt.model.labels, probs)}},
                     ensure_ascii=False))
    return 0


def cmd_evaluate(args) -> int:
    rc = _run_config(args)
    ckpt = load_checkpoint(_need(rc, "checkpoint"), expect_kind="classifier")
    samples = corpus_mod.chunk_documents(corpus_mod.ingest(_need(rc, "corpus")), rc.chunk_words)
    idx = corpus_mod.read_manifest(args.split)[args.partition] if args.split else range(len(samples))
    metrics = evaluate_classifier(ckpt.model, ckpt.tokenizer, [samples[i].text for i in idx],
                                  [samples[i].author for i in idx], rc.train.batch_size, rc.train.max_len,
                                  "weighted" if args.weighted else "macro")
    print(metrics.to_json())
    return 0


def cmd_kfold(args) -> int:
    rc = _run_config(args, "classify")
    ckpt = load_checkpoint(_need(rc, "checkpoint"), expect_kind="lm")
    samples = corpus_mod.chunk_documents(corpus_mod.ingest(_need(rc, "corpus")), rc.chunk_words)
    scores = []
    for fold, (train_idx, valid_idx) in enumerate(corpus_mod.kfold_indices(samples, args.k, rc.train.seed)):
        _, metrics, _ = _classifier_on(rc, ckpt, samples, train_idx, valid_idx)
        log.info("fold %d accuracy %.6f", fold, metrics.accuracy)
        scores.append(metrics.accuracy)
    summary = kfold_summary(scores)
    if rc.out:
        _write_json(_out_dir(rc) / "kfold.json", json.loads(summary.to_json()))
    print(summary.to_json())
    return 0


def cmd_lr_find(args) -> int:
    rc = _run_config(args, "pretrain")
    if rc.checkpoint:
        ckpt = load_checkpoint(rc.checkpoint, expect_kind="lm")
        lm, tok = ckpt.model, ckpt.tokenizer
        texts = corpus_mod.read_texts(_need(rc, "corpus"))
    else:
        texts = corpus_mod.read_texts(_need(rc, "corpus"))
        tok = _tokenizer_for(rc, texts)
        lm = LanguageModel.create(_model_config(rc, len(tok.vocab)), SplitMix64(rc.train.seed).derive("pretrain.init"))
    batches = make_lm_batches(encode_stream(texts, tok), rc.train.batch_size, rc.train.bptt)
    opt = AdamState(beta1=rc.train.momentums[0], beta2=rc.train.beta2, weight_decay=rc.train.weight_decay)
    drop = SplitMix64(rc.train.seed).derive("lr_find")
    cursor = {"i": 0, "state": None, "opt": opt}

    def step(lr: float) -> float:
        x, y = batches[cursor["i"] % len(batches)]
        cursor["i"] += 1
        with Tape() as tape:
            logits, cursor["state"] = lm.forward(x, "train", drop, cursor["state"])
            loss = ad.cross_entropy_flat(logits, y)
        backward(tape, loss)
        ad.adam_step(lm.params, {k: p.grad for k, p in lm.params.items()}, cursor["opt"], lr)
        return float(loss.data)

    def save():
        return {k: v.data.copy() for k, v in lm.params.items()}, opt.copy()

    def restore(snap):
        for k, v in lm.params.items():
            v.data[...] = snap[0][k]
        cursor["opt"] = snap[1]

    curve = lr_find(step, steps=args.steps, save_state=save, restore_state=restore)
    text = curve.to_csv()
    if rc.out:
        (_out_dir(rc) / "lr_find.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint, expect_kind="lm")
    seed = 0 if args.seed is None else args.seed
    print(generate_text(ckpt.model, ckpt.tokenizer, args.prompt, args.n_tokens, args.temperature, seed))
    return 0


def cmd_subset(args) -> int:
    rc = _run_config(args)
    samples = corpus_mod.chunk_documents(corpus_mod.ingest(_need(rc, "corpus")), rc.chunk_words)
    idx = corpus_mod.balanced_subset_indices(samples, args.n_authors, rc.train.seed)
    out = _out_dir(rc)
    corpus_mod.write_manifest(out / f"subset_{args.n_authors}.json", {"samples": idx})
    authors = sorted({samples[i].author for i in idx})
    print(json.dumps({"authors": authors, "samples_per_author": len(idx) // len(authors)}, ensure_ascii=False))
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, help="seed for every random stream")
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--out", help="output directory")

    parser = _Parser(prog="ulmfit-aa", description="Authorship attribution via LM pretraining and fine-tuning.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("build-vocab", cmd_build_vocab, "build a word or character vocabulary")
    p.add_argument("--corpus")
    p.add_argument("--mode", choices=("word", "char"))
    p = add("train-subword", cmd_train_subword, "train a unigram sub-word tokenizer")
    p.add_argument("--corpus")
    p.add_argument("--vocab-size", type=int)
    for name, func, text in (("pretrain", cmd_pretrain, "pretrain a language model"),
                             ("finetune", cmd_finetune, "fine-tune a language model on the target corpus"),
                             ("train-classifier", cmd_train_classifier, "train the author classifier")):
        p = add(name, func, text)
        p.add_argument("--corpus")
        p.add_argument("--tokenizer")
        if name != "pretrain":
            p.add_argument("--checkpoint")
    p = add("predict", cmd_predict, "predict the author of a text file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text-file", required=True)
    p = add("evaluate", cmd_evaluate, "metrics of a classifier on a labelled corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--split", help="split manifest JSON; default: every sample")
    p.add_argument("--partition", default="test")
    p.add_argument("--weighted", action="store_true", help="support-weighted F1")
    p = add("kfold", cmd_kfold, "k-fold cross-validation of the classifier stage")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--k", type=int, default=5)
    p = add("lr-find", cmd_lr_find, "learning-rate range test (CSV on stdout)")
    p.add_argument("--corpus")
    p.add_argument("--tokenizer")
    p.add_argument("--checkpoint")
    p.add_argument("--steps", type=int, default=100)
    p = add("generate", cmd_generate, "sample text from a language model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--n-tokens", type=int, default=100)
    p.add_argument("--temperature", type=float, default=0.8)
    p = add("subset", cmd_subset, "balanced n-author subset manifest")
    p.add_argument("--corpus")
    p.add_argument("--n-authors", type=int, required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:       # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
