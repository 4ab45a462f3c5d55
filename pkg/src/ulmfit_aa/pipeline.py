"""Three-stage training: LM pretraining, LM fine-tuning, classifier training.

Every stage is a deterministic function of its inputs and ``TrainConfig.seed``.
Randomness is drawn from named ``SplitMix64`` streams so that, for example,
the dropout masks of epoch 3 do not depend on how many batches epoch 2 had.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor, backward
from .awd_lstm import Classifier, LanguageModel, ModelConfig, layer_group
from .errors import ConfigError, DataError, DivergenceError
from .evaluation import Metrics, compute_metrics, perplexity
from .rng import SplitMix64
from .schedules import (
    cyclic_momentum, discriminative_lrs, sgdr, sgdr_fraction, stlr, stlr_fraction, unfreeze_plan,
)
from .tokenizers import Tokenizer

STAGES = ("pretrain", "finetune", "classify")


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    epochs: int = 1
    batch_size: int = 32
    bptt: int = 70
    lr: float | list[float] = 1e-3
    weight_decay: float = 0.1
    dropout_multiplier: float = 0.5
    momentums: tuple[float, float] = (0.8, 0.7)
    beta2: float = 0.99
    seed: int = 0
    early_stop_patience: int = 2
    unfreeze_epochs: tuple[int, ...] = (2, 2, 2)
    max_len: int = 1000
    valid_frac: float = 0.1
    cut_frac: float = 0.1
    stlr_ratio: float = 32.0
    lr_divisor: float = 2.6 ** 4
    epoch_budget: int | None = None     # hard cap on epochs summed over all phases

    def __post_init__(self):
        if isinstance(self.lr, str):
            try:
                self.lr = [float(v) for v in self.lr.split(",")]
            except ValueError as exc:
                raise ConfigError(f"lr: cannot parse {self.lr!r}") from exc
        if isinstance(self.lr, (list, tuple)):
            self.lr = [float(v) for v in self.lr]
            if len(self.lr) == 1:
                self.lr = self.lr[0]
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        for name in ("epochs", "batch_size", "bptt", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if any(lr <= 0 or not math.isfinite(lr) for lr in self.lr_list):
            raise ConfigError("learning rates must be positive and finite")
        if self.weight_decay < 0 or self.early_stop_patience < 1:
            raise ConfigError("weight_decay must be >= 0 and early_stop_patience >= 1")
        if self.epoch_budget is not None and self.epoch_budget < 1:
            raise ConfigError("epoch_budget must be >= 1 when set")
        if not 0 < self.valid_frac < 1:
            raise ConfigError("valid_frac must be in (0, 1)")
        self.momentums = tuple(float(m) for m in self.momentums)
        self.unfreeze_epochs = tuple(int(e) for e in self.unfreeze_epochs)
        if len(self.momentums) != 2 or not all(0 < m < 1 for m in self.momentums):
            raise ConfigError("momentums must be two floats in (0, 1)")

    @property
    def lr_list(self) -> list[float]:
        return list(self.lr) if isinstance(self.lr, list) else [self.lr]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["momentums"], d["unfreeze_epochs"] = list(self.momentums), list(self.unfreeze_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    lr: float
    train_loss: float
    valid_loss: float
    valid_perplexity: float


@dataclass
class StageReport:
    stage: str
    epochs: list[EpochRecord] = field(default_factory=list)
    initial_valid_loss: float = math.nan
    best_valid_loss: float = math.inf
    wall_clock: float = 0.0
    checkpoint_path: str | None = None

    @property
    def initial_perplexity(self) -> float:
        return perplexity(self.initial_valid_loss)

    @property
    def best_perplexity(self) -> float:
        return perplexity(self.best_valid_loss)

    def log_lines(self) -> list[str]:
        return [f"{self.stage} epoch {r.epoch} [{r.phase}] lr={r.lr:.3g} train_loss={r.train_loss:.5f} "
                f"valid_loss={r.valid_loss:.5f} ppl={r.valid_perplexity:.4f}" for r in self.epochs]

    def to_dict(self) -> dict:
        return {"stage": self.stage, "epochs": [asdict(r) for r in self.epochs],
                "initial_valid_loss": self.initial_valid_loss, "best_valid_loss": self.best_valid_loss,
                "best_perplexity": self.best_perplexity, "wall_clock": self.wall_clock,
                "checkpoint_path": self.checkpoint_path}


# --- batching --------------------------------------------------------------

def make_lm_batches(ids: Sequence[int], batch_size: int, bptt: int,
                    rng: SplitMix64 | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a token stream into ``batch_size`` contiguous lanes and cut them into bptt windows.

    Row ``b`` of consecutive batches continues the same lane, so recurrent
    state can be carried from one batch to the next. With ``rng`` the lanes
    start at a random offset inside the slack left by the trailing remainder.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if batch_size < 1 or bptt < 1:
        raise ConfigError("batch_size and bptt must be >= 1")
    if ids.size < batch_size * (bptt + 1):
        raise DataError(f"token stream of {ids.size} ids too short for batch {batch_size} x bptt {bptt}")
    lane = ids.size // batch_size
    data = ids[:lane * batch_size].reshape(batch_size, lane)
    n = (lane - 1) // bptt
    offset = rng.integers(lane - 1 - n * bptt + 1) if rng is not None else 0
    return [(data[:, offset + j * bptt: offset + (j + 1) * bptt],
             data[:, offset + j * bptt + 1: offset + (j + 1) * bptt + 1]) for j in range(n)]


def _eval_batches(ids: np.ndarray, batch_size: int, bptt: int):
    if ids.size < 2:
        raise DataError("validation stream needs at least 2 tokens")
    bptt = min(bptt, ids.size - 1)
    b = max(1, min(batch_size, ids.size // (bptt + 1)))
    return make_lm_batches(ids, b, bptt)


def encode_stream(texts: Sequence[str], tokenizer: Tokenizer) -> np.ndarray:
    ids: list[int] = []
    for text in texts:
        ids.extend(tokenizer.encode(text))
    return np.asarray(ids, dtype=np.int64)


def encode_documents(texts: Sequence[str], tokenizer: Tokenizer, max_len: int) -> list[list[int]]:
    """Token ids per document, truncated from the front to the last ``max_len`` ids."""
    out = []
    for text in texts:
        ids = tokenizer.encode(text)
        out.append(ids[-max_len:])
    return out


def pad_left(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        if len(s):
            ids[i, T - len(s):] = s
            mask[i, T - len(s):] = True
    return ids, mask


# --- shared training helpers -----------------------------------------------

def _snapshot(params: dict[str, Tensor], buffers: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    snap = {k: v.data.copy() for k, v in params.items()}
    snap.update({k: v.copy() for k, v in buffers.items()})
    return snap


def _restore(params: dict[str, Tensor], buffers: dict[str, np.ndarray], snap: dict[str, np.ndarray]) -> None:
    for k, v in params.items():
        v.data[...] = snap[k]
    for k, v in buffers.items():
        v[...] = snap[k]


def _set_trainable(params: dict[str, Tensor], groups: frozenset[str] | set[str]) -> list[str]:
    names = []
    for k, v in params.items():
        v.requires_grad = layer_group(k) in groups
        v.grad = None
        if v.requires_grad:
            names.append(k)
    return names


def _check_loss(value: float, where: str) -> float:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss during {where}")
    return value


def lm_loss(lm: LanguageModel, ids: np.ndarray, batch_size: int, bptt: int) -> float:
    """Mean next-token cross-entropy of ``ids`` in eval mode (stateful across windows)."""
    total, count, state = 0.0, 0, None
    for x, y in _eval_batches(np.asarray(ids), batch_size, bptt):
        logits, state = lm.forward(x, "eval", state=state)
        total += float(ad.cross_entropy_flat(logits, y).data) * y.size
        count += y.size
    return total / count


def _lm_epoch(lm: LanguageModel, train_ids: np.ndarray, config: TrainConfig, trainable: list[str],
              opt: AdamState, lr_max: float, rng: SplitMix64) -> float:
    batches = make_lm_batches(train_ids, config.batch_size, config.bptt, rng.derive("offset"))
    drop = rng.derive("dropout")
    params = {k: lm.params[k] for k in trainable}
    T = len(batches)
    state, losses = None, []
    for t, (x, y) in enumerate(batches):
        with Tape() as tape:
            logits, state = lm.forward(x, "train", drop, state)
            loss = ad.cross_entropy_flat(logits, y)
        losses.append(_check_loss(float(loss.data), "language-model training"))
        backward(tape, loss)
        opt.beta1 = cyclic_momentum(sgdr_fraction(t, T), config.momentums)
        ad.adam_step(params, {k: p.grad for k, p in params.items()}, opt, sgdr(t, T, lr_max))
    return float(np.mean(losses))


def _new_optimizer(config: TrainConfig) -> AdamState:
    return AdamState(beta1=config.momentums[0], beta2=config.beta2, weight_decay=config.weight_decay)


# --- stages ----------------------------------------------------------------

def split_stream(ids: np.ndarray, valid_frac: float) -> tuple[np.ndarray, np.ndarray]:
    cut = int(round(ids.size * (1.0 - valid_frac)))
    return ids[:cut], ids[cut:]


def _train_lm(lm: LanguageModel, ids: np.ndarray, config: TrainConfig, stage: str,
              phases: list[tuple[str, frozenset[str], int]], report: StageReport,
              on_epoch: Callable[[StageReport], None] | None = None) -> StageReport:
    """Run ``phases`` of (name, trainable groups, epochs); an epochs value of 0 marks the
    open-ended final phase that trains until early stopping or the epoch budget."""
    train_ids, valid_ids = split_stream(ids, config.valid_frac)
    root = SplitMix64(config.seed).derive(stage)
    started = time.perf_counter()
    report.initial_valid_loss = lm_loss(lm, valid_ids, config.batch_size, config.bptt)
    best = _snapshot(lm.params, {})
    report.best_valid_loss = report.initial_valid_loss
    lrs = config.lr_list
    epoch = 0
    try:
        for name, groups, n_epochs in phases:
            trainable = _set_trainable(lm.params, groups)
            opt = _new_optimizer(config)
            open_ended = n_epochs == 0
            budget = config.epochs if open_ended else n_epochs
            lr_index, bad_epochs = 0, 0
            for _ in range(budget):
                if config.epoch_budget is not None and epoch >= config.epoch_budget:
                    break
                lr = lrs[lr_index] if open_ended else lrs[0]
                train_loss = _lm_epoch(lm, train_ids, config, trainable, opt, lr, root.derive(f"epoch{epoch}"))
                valid_loss = _check_loss(lm_loss(lm, valid_ids, config.batch_size, config.bptt), "validation")
                report.epochs.append(EpochRecord(epoch, name, lr, train_loss, valid_loss, perplexity(valid_loss)))
                epoch += 1
                if valid_loss < report.best_valid_loss:
                    report.best_valid_loss, bad_epochs = valid_loss, 0
                    best = _snapshot(lm.params, {})
                else:
                    bad_epochs += 1
                if on_epoch:
                    on_epoch(report)
                if open_ended and bad_epochs >= config.early_stop_patience:
                    if lr_index + 1 >= len(lrs):
                        break
                    # restart from the best weights with the next, usually lower, rate
                    lr_index, bad_epochs = lr_index + 1, 0
                    _restore(lm.params, {}, best)
                    opt = _new_optimizer(config)
    except DivergenceError as exc:
        _restore(lm.params, {}, best)
        _set_trainable(lm.params, set(layer_group(k) for k in lm.params))
        exc.last_good = lm      # best weights so far, for the caller to save
        raise
    _restore(lm.params, {}, best)
    _set_trainable(lm.params, set(layer_group(k) for k in lm.params))
    report.wall_clock = time.perf_counter() - started
    return report


def pretrain_lm(texts: Sequence[str], tokenizer: Tokenizer, model_config: ModelConfig, config: TrainConfig,
                on_epoch: Callable[[StageReport], None] | None = None) -> tuple[LanguageModel, StageReport]:
    """Train a language model from random initialisation with per-epoch cosine restarts.

    The last ``valid_frac`` of the token stream is held out for early
    stopping; the returned model carries the best-validation weights.
    """
    if model_config.vocab_size != len(tokenizer.vocab):
        raise ConfigError(f"model vocab_size {model_config.vocab_size} != tokenizer vocab {len(tokenizer.vocab)}")
    model_config = ModelConfig.from_dict({**model_config.to_dict(), "dropout_multiplier": config.dropout_multiplier})
    lm = LanguageModel.create(model_config, SplitMix64(config.seed).derive("pretrain.init"))
    ids = encode_stream(texts, tokenizer)
    all_groups = frozenset(model_config.group_names())
    report = _train_lm(lm, ids, config, "pretrain", [("full", all_groups, 0)], StageReport("pretrain"), on_epoch)
    return lm, report


def _unfreeze_phases(stage: str, groups: list[str], unfreeze_epochs: Sequence[int]):
    phases = []
    for step, n in enumerate(unfreeze_epochs):
        if n > 0:
            plan = unfreeze_plan(stage, step, groups)
            phases.append((f"unfreeze{step}", plan.trainable, n))
    phases.append(("full", frozenset(groups), 0))
    return phases


def finetune_lm(lm: LanguageModel, texts: Sequence[str], tokenizer: Tokenizer, config: TrainConfig,
                expected_fingerprint: int | None = None,
                on_epoch: Callable[[StageReport], None] | None = None) -> tuple[LanguageModel, StageReport]:
    """Adapt a pretrained LM to the target texts with gradual unfreezing.

    ``expected_fingerprint`` is the vocabulary fingerprint stored with the
    pretrained weights; a mismatch with ``tokenizer`` is refused.
    """
    if expected_fingerprint is not None and expected_fingerprint != tokenizer.fingerprint():
        raise DataError(f"vocabulary fingerprint mismatch: checkpoint {expected_fingerprint:016x}, "
                        f"tokenizer {tokenizer.fingerprint():016x}")
    if lm.config.vocab_size != len(tokenizer.vocab):
        raise DataError(f"model vocab_size {lm.config.vocab_size} != tokenizer vocab {len(tokenizer.vocab)}")
    lm.config = ModelConfig.from_dict({**lm.config.to_dict(), "dropout_multiplier": config.dropout_multiplier})
    ids = encode_stream(texts, tokenizer)
    phases = _unfreeze_phases("finetune", lm.config.group_names(), config.unfreeze_epochs)
    report = _train_lm(lm, ids, config, "finetune", phases, StageReport("finetune"), on_epoch)
    return lm, report


# --- classifier --------------------------------------------------------------

def _group_lrs(params: dict[str, Tensor], groups: list[str], lr_high: float, divisor: float) -> dict[str, float]:
    per_group = dict(zip(groups, discriminative_lrs(lr_high, len(groups), divisor)))
    return {k: per_group[layer_group(k)] for k in params}


def classifier_loss(clf: Classifier, docs: list[list[int]], labels: np.ndarray, batch_size: int,
                    pad_id: int) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and class probabilities in eval mode."""
    probs, total = [], 0.0
    for start in range(0, len(docs), batch_size):
        ids, mask = pad_left(docs[start:start + batch_size], pad_id)
        logits = clf.logits(ids, mask)
        y = labels[start:start + batch_size]
        total += float(ad.cross_entropy_flat(logits, y).data) * len(y)
        probs.append(ad.softmax(logits.data))
    return total / len(docs), np.concatenate(probs)


def train_classifier(encoder: dict[str, Tensor], model_config: ModelConfig, tokenizer: Tokenizer,
                     train_texts: Sequence[str], train_labels: Sequence[str],
                     valid_texts: Sequence[str], valid_labels: Sequence[str], config: TrainConfig,
                     on_epoch: Callable[[StageReport], None] | None = None
                     ) -> tuple[Classifier, Metrics, StageReport]:
    """Replace the LM decoder by a pooled classifier head and train it.

    Gradual unfreezing runs ``config.unfreeze_epochs`` epochs per step, then
    the whole network for up to ``config.epochs`` epochs with early stopping
    on validation loss. Each phase is one slanted-triangular cycle with
    discriminative per-group rates. Returns held-out metrics on the
    validation texts, computed with the best-validation weights.
    """
    classes = sorted(set(train_labels))
    if len(classes) < 2:
        raise DataError("train_classifier needs at least 2 distinct authors in the training set")
    unseen = sorted(set(valid_labels) - set(classes))
    if unseen:
        raise DataError(f"validation authors not in training set: {unseen}")
    if model_config.vocab_size != len(tokenizer.vocab):
        raise DataError(f"model vocab_size {model_config.vocab_size} != tokenizer vocab {len(tokenizer.vocab)}")
    cfg = ModelConfig.from_dict({**model_config.to_dict(), "n_classes": len(classes),
                                 "dropout_multiplier": config.dropout_multiplier})
    root = SplitMix64(config.seed).derive("classify")
    clf = Classifier.from_encoder(encoder, cfg, root.derive("init"), labels=classes)
    index = {c: i for i, c in enumerate(classes)}
    y_train = np.array([index[a] for a in train_labels])
    y_valid = np.array([index[a] for a in valid_labels])
    x_train = encode_documents(train_texts, tokenizer, config.max_len)
    x_valid = encode_documents(valid_texts, tokenizer, config.max_len)
    pad = tokenizer.pad_id
    groups = cfg.group_names()
    lr_high = config.lr_list[0]
    lr_map = _group_lrs(clf.params, groups, lr_high, config.lr_divisor)

    report = StageReport("classify")
    started = time.perf_counter()
    report.initial_valid_loss, _ = classifier_loss(clf, x_valid, y_valid, config.batch_size, pad)
    report.best_valid_loss = math.inf
    best = _snapshot(clf.params, clf.buffers)
    n = len(x_train)
    n_batches = n // config.batch_size + (1 if n % config.batch_size >= 2 else 0)
    epoch = 0
    for name, trainable_groups, n_epochs in _unfreeze_phases("classify", groups, config.unfreeze_epochs):
        trainable = _set_trainable(clf.params, trainable_groups)
        params = {k: clf.params[k] for k in trainable}
        opt = _new_optimizer(config)
        open_ended = n_epochs == 0
        budget = config.epochs if open_ended else n_epochs
        T = budget * n_batches
        step, bad_epochs = 0, 0
        for _ in range(budget):
            if config.epoch_budget is not None and epoch >= config.epoch_budget:
                break
            rng = root.derive(f"epoch{epoch}")
            order = rng.derive("shuffle").permutation(n)
            drop = rng.derive("dropout")
            losses = []
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                if len(idx) < 2:
                    continue  # batch norm needs two rows
                ids, mask = pad_left([x_train[i] for i in idx], pad)
                with Tape() as tape:
                    loss = ad.cross_entropy_flat(clf.logits(ids, mask, "train", drop), y_train[idx])
                losses.append(_check_loss(float(loss.data), "classifier training"))
                backward(tape, loss)
                frac = stlr_fraction(step, T, config.cut_frac)
                opt.beta1 = cyclic_momentum(frac, config.momentums)
                scale = stlr(step, T, 1.0, config.cut_frac, config.stlr_ratio)
                ad.adam_step(params, {k: p.grad for k, p in params.items()}, opt,
                             {k: lr_map[k] * scale for k in params})
                step += 1
            valid_loss, _ = classifier_loss(clf, x_valid, y_valid, config.batch_size, pad)
            _check_loss(valid_loss, "validation")
            report.epochs.append(EpochRecord(epoch, name, lr_high, float(np.mean(losses)), valid_loss,
                                             perplexity(valid_loss)))
            epoch += 1
            if valid_loss < report.best_valid_loss:
                report.best_valid_loss, bad_epochs = valid_loss, 0
                best = _snapshot(clf.params, clf.buffers)
            else:
                bad_epochs += 1
            if on_epoch:
                on_epoch(report)
            if open_ended and bad_epochs >= config.early_stop_patience:
                break
    _restore(clf.params, clf.buffers, best)
    _set_trainable(clf.params, set(groups))
    _, probs = classifier_loss(clf, x_valid, y_valid, config.batch_size, pad)
    metrics = compute_metrics(probs.argmax(axis=1), y_valid, n_classes=len(classes))
    report.wall_clock = time.perf_counter() - started
    return clf, metrics, report


def predict_author(clf: Classifier, tokenizer: Tokenizer, text: str, max_len: int = 1000) -> tuple[str, np.ndarray]:
    """Most probable author of ``text`` and the full probability vector."""
    ids = tokenizer.encode(text, add_special=False)
    if not ids:
        raise DataError("predict_author: text is empty after tokenization")
    ids = ([tokenizer.bos_id] + ids + [tokenizer.eos_id])[-max_len:]
    probs = clf.predict_proba(np.array([ids]))[0]
    return clf.labels[int(np.argmax(probs))], probs


def evaluate_classifier(clf: Classifier, tokenizer: Tokenizer, texts: Sequence[str], labels: Sequence[str],
                        batch_size: int = 32, max_len: int = 1000, average: str = "macro") -> Metrics:
    index = {c: i for i, c in enumerate(clf.labels)}
    unknown = sorted(set(labels) - set(index))
    if unknown:
        raise DataError(f"authors unknown to the classifier: {unknown}")
    docs = encode_documents(texts, tokenizer, max_len)
    y = np.array([index[a] for a in labels])
    _, probs = classifier_loss(clf, docs, y, batch_size, tokenizer.pad_id)
    return compute_metrics(probs.argmax(axis=1), y, n_classes=len(clf.labels), average=average)
