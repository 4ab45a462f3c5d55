"""Word, character and unigram sub-word tokenizers.

All three share the :class:`Vocab` file format (one token per line, line
number = id) so checkpoints can fingerprint whichever one they were trained
with.
"""

from __future__ import annotations

import json
import math
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError
from .rng import fnv1a64

UNK, PAD, BOS, EOS = "<unk>", "<pad>", "<bos>", "<eos>"
CHAR_REP, WORD_REP = "<crep>", "<wrep>"
WORD_SPECIALS = (UNK, PAD, BOS, EOS, CHAR_REP, WORD_REP)
CHAR_SPECIALS = (UNK, PAD, BOS, EOS)
SUBWORD_SPECIALS = (UNK, PAD, "<s>", "</s>")
BOUNDARY = "▁"  # word-initial marker on sub-word pieces
REPEAT_MIN = 3

_WS = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """NFC-normalise and collapse whitespace runs to single spaces."""
    return _WS.sub(" ", unicodedata.normalize("NFC", text)).strip()


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch)[0] in "PS"


def pre_tokenize(text: str) -> list[str]:
    """Split on whitespace and make every punctuation/symbol character its own token.

    Combining marks stay attached to their base letters, which matters for
    scripts such as Bangla where vowel signs are not word characters to ``re``.
    """
    out: list[str] = []
    for chunk in normalize_text(text).split(" "):
        buf = []
        for ch in chunk:
            if _is_punct(ch):
                if buf:
                    out.append("".join(buf))
                    buf = []
                out.append(ch)
            else:
                buf.append(ch)
        if buf:
            out.append("".join(buf))
    return out


def mark_repetitions(tokens: Sequence[str]) -> list[str]:
    """Replace repeated characters and words with marker tokens.

    A run of ``REPEAT_MIN`` or more identical characters inside a token
    becomes ``<crep> n c``; a run of identical consecutive tokens becomes
    ``<wrep> n tok``.
    """
    split: list[str] = []
    for tok in tokens:
        i = 0
        buf = ""
        while i < len(tok):
            j = i
            while j < len(tok) and tok[j] == tok[i]:
                j += 1
            if j - i >= REPEAT_MIN:
                if buf:
                    split.append(buf)
                    buf = ""
                split.extend((CHAR_REP, str(j - i), tok[i]))
            else:
                buf += tok[i:j]
            i = j
        if buf:
            split.append(buf)
    out: list[str] = []
    i = 0
    while i < len(split):
        j = i
        while j < len(split) and split[j] == split[i]:
            j += 1
        if j - i >= REPEAT_MIN and split[i] not in (CHAR_REP, WORD_REP):
            out.extend((WORD_REP, str(j - i), split[i]))
        else:
            out.extend(split[i:j])
        i = j
    return out


def expand_repetitions(tokens: Sequence[str]) -> list[str]:
    """Inverse of :func:`mark_repetitions` (up to token boundaries)."""
    out: list[str] = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok in (CHAR_REP, WORD_REP) and i + 2 < len(tokens) and tokens[i + 1].isdigit():
            n, item = int(tokens[i + 1]), tokens[i + 2]
            out.extend([item * n] if tok == CHAR_REP else [item] * n)
            i += 3
        else:
            out.append(tok)
            i += 1
    return out


class Vocab:
    """Bijective token <-> id map; specials occupy the lowest ids."""

    def __init__(self, tokens: Sequence[str], specials: Sequence[str]):
        tokens = list(tokens)
        if tokens[:len(specials)] != list(specials):
            raise ValueError("specials must occupy the lowest ids")
        self.id_to_token = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.specials = tuple(specials)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.id_to_token == other.id_to_token

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, self.token_to_id[UNK])

    def to_bytes(self) -> bytes:
        return "".join(t + "\n" for t in self.id_to_token).encode("utf-8")

    def fingerprint(self) -> int:
        return fnv1a64(self.to_bytes())

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, specials: Sequence[str]) -> "Vocab":
        text = Path(path).read_bytes().decode("utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines, specials)


def build_word_vocab(corpus: Iterable[str], max_size: int = 60000, min_count: int = 3) -> Vocab:
    """Keep tokens seen at least ``min_count`` times, most frequent first."""
    counts = Counter(corpus)
    if not counts:
        raise DataError("build_word_vocab: empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count and t not in WORD_SPECIALS]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(list(WORD_SPECIALS) + kept[:max_size], WORD_SPECIALS)


def build_char_vocab(corpus: str) -> Vocab:
    chars = sorted(set(normalize_text(corpus)))
    return Vocab(list(CHAR_SPECIALS) + chars, CHAR_SPECIALS)


# --- unigram sub-word model ------------------------------------------------

@dataclass
class SubwordModel:
    pieces: list[tuple[str, float]]
    specials: tuple[str, ...] = SUBWORD_SPECIALS
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._index = {p: i + len(self.specials) for i, (p, _) in enumerate(self.pieces)}
        if len(self._index) != len(self.pieces):
            raise ValueError("duplicate pieces in sub-word model")
        self.max_len = max((len(p) for p, _ in self.pieces), default=1)
        self._logp = {p: lp for p, lp in self.pieces}
        self.unk_score = min((lp for _, lp in self.pieces), default=0.0) - 10.0

    @property
    def unk_id(self) -> int:
        return 0

    def log_prob(self, piece: str) -> float:
        return self._logp[piece]

    def id_of(self, piece: str) -> int:
        return self._index.get(piece, self.unk_id)

    def token(self, idx: int) -> str:
        n = len(self.specials)
        return self.specials[idx] if idx < n else self.pieces[idx - n][0]

    def vocab(self) -> Vocab:
        return Vocab(list(self.specials) + [p for p, _ in self.pieces], self.specials)

    def to_tsv(self) -> str:
        return "".join(f"{p}\t{lp!r}\n" for p, lp in self.pieces)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_tsv().encode("utf-8"))

    @classmethod
    def load(cls, path) -> "SubwordModel":
        pieces = []
        for line in Path(path).read_bytes().decode("utf-8").split("\n"):
            if line:
                p, lp = line.rsplit("\t", 1)
                pieces.append((p, float(lp)))
        return cls(pieces)


def _viterbi(word: str, logp: dict[str, float], max_len: int, unk_score: float,
             exclude: str | None = None) -> tuple[float, list[str | None]]:
    # Backward DP so the tie-break (fewer pieces, then smallest first piece)
    # is decided where the first piece is chosen. None marks an unknown char.
    L = len(word)
    best: list[tuple[float, int, list[str | None]]] = [(0.0, 0, [])] * (L + 1)
    for i in range(L - 1, -1, -1):
        cand = None
        for j in range(i + 1, min(L, i + max_len) + 1):
            piece = word[i:j]
            lp = logp.get(piece)
            if lp is None or piece == exclude:
                continue
            rest = best[j]
            key = (lp + rest[0], -(1 + rest[1]))
            if cand is None or key > cand[0] or (key == cand[0] and piece < cand[1][0]):
                cand = (key, [piece] + rest[2])
        if cand is None:
            rest = best[i + 1]
            best[i] = (unk_score + rest[0], 1 + rest[1], [None] + rest[2])
        else:
            best[i] = (cand[0][0], -cand[0][1], cand[1])
    return best[0][0], best[0][2]


def segment_viterbi(model: SubwordModel, word: str) -> list[int]:
    """Highest log-probability segmentation of ``word`` as piece ids.

    Characters no piece covers become the unknown id.
    """
    if not word:
        return []
    _, pieces = _viterbi(word, model._logp, model.max_len, model.unk_score)
    return [model.unk_id if p is None else model.id_of(p) for p in pieces]


def _logaddexp(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


def _forward_backward(word: str, logp: dict[str, float], max_len: int):
    L = len(word)
    alpha = [-math.inf] * (L + 1)
    alpha[0] = 0.0
    for j in range(1, L + 1):
        acc = -math.inf
        for i in range(max(0, j - max_len), j):
            lp = logp.get(word[i:j])
            if lp is not None and alpha[i] > -math.inf:
                acc = _logaddexp(acc, alpha[i] + lp)
        alpha[j] = acc
    beta = [-math.inf] * (L + 1)
    beta[L] = 0.0
    for i in range(L - 1, -1, -1):
        acc = -math.inf
        for j in range(i + 1, min(L, i + max_len) + 1):
            lp = logp.get(word[i:j])
            if lp is not None and beta[j] > -math.inf:
                acc = _logaddexp(acc, lp + beta[j])
        beta[i] = acc
    return alpha, beta


def corpus_log_likelihood(logp: dict[str, float], word_freqs: dict[str, int]) -> float:
    """Marginal log-likelihood of the corpus under a unigram piece model."""
    max_len = max(map(len, logp))
    total = 0.0
    for w, f in word_freqs.items():
        alpha, _ = _forward_backward(w, logp, max_len)
        total += f * alpha[-1]
    return total


def em_step(logp: dict[str, float], word_freqs: dict[str, int]) -> dict[str, float]:
    """One EM iteration: expected piece counts by forward-backward, then renormalise."""
    max_len = max(map(len, logp))
    counts = dict.fromkeys(logp, 0.0)
    for w, f in word_freqs.items():
        alpha, beta = _forward_backward(w, logp, max_len)
        z = alpha[-1]
        if z == -math.inf:
            continue
        L = len(w)
        for i in range(L):
            if alpha[i] == -math.inf:
                continue
            for j in range(i + 1, min(L, i + max_len) + 1):
                piece = w[i:j]
                lp = logp.get(piece)
                if lp is not None:
                    counts[piece] += f * math.exp(alpha[i] + lp + beta[j] - z)
    total = sum(counts.values())
    return {p: math.log(max(c, 1e-300) / total) for p, c in counts.items()}


def _prune_losses(logp: dict[str, float], word_freqs: dict[str, int]) -> dict[str, float]:
    # Likelihood lost by deleting each multi-character piece, using the
    # Viterbi-count approximation: its occurrences fall back to the best
    # segmentation of the piece without itself.
    max_len = max(map(len, logp))
    freq = dict.fromkeys(logp, 0.0)
    for w, f in word_freqs.items():
        for p in _viterbi(w, logp, max_len, -1e9)[1]:
            if p is not None:
                freq[p] += f
    total = sum(freq.values())
    log_total = math.log(total)
    losses = {}
    for piece in logp:
        if len(piece) == 1:
            continue
        f = freq[piece]
        if f == 0:
            losses[piece] = 0.0
            continue
        alt = _viterbi(piece, logp, max_len, -1e9, exclude=piece)[1]
        alt_total = math.log(total + f * (len(alt) - 1))
        lp_alt = sum(math.log(freq[a] + f) - alt_total for a in alt if a is not None)
        losses[piece] = f * ((math.log(f) - log_total) - lp_alt)
    return losses


def _marked_words(corpus: str) -> Counter:
    return Counter(BOUNDARY + w for w in normalize_text(corpus).split(" ") if w)


def train_unigram(corpus: str, target_size: int = 30000, min_count: int = 3,
                  max_piece_len: int = 8, prune_fraction: float = 0.2,
                  em_iters: int = 2) -> SubwordModel:
    """Train a unigram sub-word model by EM with iterative pruning.

    Words are prefixed with the boundary marker before training, so the
    marker counts as one of the corpus characters. Single characters are
    never pruned.
    """
    word_freqs = _marked_words(corpus)
    if not word_freqs:
        raise DataError("train_unigram: empty corpus")
    chars: Counter = Counter()
    subs: Counter = Counter()
    for w, f in word_freqs.items():
        for i in range(len(w)):
            chars[w[i]] += f
            for j in range(i + 2, min(len(w), i + max_piece_len) + 1):
                subs[w[i:j]] += f
    if target_size < len(chars):
        raise DataError(f"train_unigram: target_size {target_size} is smaller than the "
                        f"{len(chars)} distinct characters")
    seeds = dict(chars)
    seeds.update({s: c for s, c in subs.items() if c >= min_count})
    total = sum(seeds.values())
    logp = {p: math.log(c / total) for p, c in seeds.items()}
    while True:
        for _ in range(em_iters):
            logp = em_step(logp, word_freqs)
        excess = len(logp) - target_size
        if excess <= 0:
            break
        losses = _prune_losses(logp, word_freqs)
        n_drop = min(excess, max(1, int(len(losses) * prune_fraction)))
        for piece in sorted(losses, key=lambda p: (losses[p], p))[:n_drop]:
            del logp[piece]
        logp = em_step(logp, word_freqs)
    pieces = sorted(logp.items(), key=lambda kv: (-kv[1], kv[0]))
    return SubwordModel(pieces)


# --- tokenizers ------------------------------------------------------------

class Tokenizer:
    """Common encode/decode surface; ``mode`` is ``word``, ``subword`` or ``char``."""

    mode: str
    vocab: Vocab

    @property
    def bos_id(self) -> int:
        return 2

    @property
    def eos_id(self) -> int:
        return 3

    @property
    def pad_id(self) -> int:
        return 1

    def tokens(self, text: str) -> list[str]:
        raise NotImplementedError

    def encode(self, text: str, add_special: bool = True) -> list[int]:
        ids = self._encode(text)
        return [self.bos_id] + ids + [self.eos_id] if add_special else ids

    def _encode(self, text: str) -> list[int]:
        return [self.vocab.lookup(t) for t in self.tokens(text)]

    def _surface(self, ids: Sequence[int]) -> list[str]:
        n = len(self.vocab)
        out = []
        for i in ids:
            if not 0 <= i < n:
                raise DataError(f"decode: id {i} out of range [0, {n})")
            if i in (self.bos_id, self.eos_id, self.pad_id):
                continue
            out.append(self.vocab.id_to_token[i])
        return out

    def decode(self, ids: Sequence[int]) -> str:
        raise NotImplementedError

    def fingerprint(self) -> int:
        return self.vocab.fingerprint()

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "tokenizer.json").write_text(json.dumps({"mode": self.mode}) + "\n", encoding="utf-8")
        self.vocab.save(d / "vocab.txt")
        if isinstance(self, SubwordTokenizer):
            self.model.save(d / "subword.tsv")


class WordTokenizer(Tokenizer):
    mode = "word"

    def __init__(self, vocab: Vocab):
        self.vocab = vocab

    @classmethod
    def train(cls, corpus: str, max_size: int = 60000, min_count: int = 3) -> "WordTokenizer":
        return cls(build_word_vocab(mark_repetitions(pre_tokenize(corpus)), max_size, min_count))

    def tokens(self, text: str) -> list[str]:
        return mark_repetitions(pre_tokenize(text))

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(expand_repetitions(self._surface(ids)))


class CharTokenizer(Tokenizer):
    mode = "char"

    def __init__(self, vocab: Vocab):
        self.vocab = vocab

    @classmethod
    def train(cls, corpus: str) -> "CharTokenizer":
        return cls(build_char_vocab(corpus))

    def tokens(self, text: str) -> list[str]:
        return list(normalize_text(text))

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self._surface(ids))


class SubwordTokenizer(Tokenizer):
    mode = "subword"

    def __init__(self, model: SubwordModel):
        self.model = model
        self.vocab = model.vocab()

    @classmethod
    def train(cls, corpus: str, vocab_size: int = 30000, min_count: int = 3, **kwargs) -> "SubwordTokenizer":
        """``vocab_size`` includes the special tokens."""
        return cls(train_unigram(corpus, vocab_size - len(SUBWORD_SPECIALS), min_count, **kwargs))

    def tokens(self, text: str) -> list[str]:
        return [self.vocab.id_to_token[i] for i in self._encode(text)]

    def _encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for w in normalize_text(text).split(" "):
            if w:
                ids.extend(segment_viterbi(self.model, BOUNDARY + w))
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self._surface(ids)).replace(BOUNDARY, " ").lstrip(" ")


def load_tokenizer(directory) -> Tokenizer:
    d = Path(directory)
    try:
        mode = json.loads((d / "tokenizer.json").read_text(encoding="utf-8"))["mode"]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read tokenizer in {d}: {exc}") from exc
    if mode == "word":
        return WordTokenizer(Vocab.load(d / "vocab.txt", WORD_SPECIALS))
    if mode == "char":
        return CharTokenizer(Vocab.load(d / "vocab.txt", CHAR_SPECIALS))
    if mode == "subword":
        return SubwordTokenizer(SubwordModel.load(d / "subword.tsv"))
    raise DataError(f"unknown tokenizer mode {mode!r} in {d}")


def train_tokenizer(mode: str, corpus: str, **kwargs) -> Tokenizer:
    if mode == "word":
        return WordTokenizer.train(corpus, **kwargs)
    if mode == "char":
        return CharTokenizer.train(corpus)
    if mode == "subword":
        return SubwordTokenizer.train(corpus, **kwargs)
    raise ValueError(f"unknown tokenizer mode {mode!r}")
