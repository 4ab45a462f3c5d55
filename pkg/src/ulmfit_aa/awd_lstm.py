"""AWD-LSTM encoder with language-model and classifier heads.

Parameters live in flat ``dict[str, Tensor]`` maps keyed by dotted names
(``embedding``, ``lstm2.U``, ``head.linear1.W`` ...). The first component
of a name decides its layer group for freezing and discriminative rates.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError
from .rng import SplitMix64

BASE_DROPOUTS = {"output": 0.4, "hidden": 0.3, "input": 0.4, "embedding": 0.05, "weight_drop": 0.5}


@dataclass
class ModelConfig:
    vocab_size: int
    embedding_size: int = 400
    hidden_size: int = 1150
    n_layers: int = 3
    dropout_multiplier: float = 0.5
    base_dropouts: dict = field(default_factory=lambda: dict(BASE_DROPOUTS))
    tie_weights: bool = True
    n_classes: int | None = None
    head_hidden: int = 50

    def __post_init__(self):
        for name in ("vocab_size", "embedding_size", "hidden_size", "n_layers", "head_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_classes is not None and self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        unknown = set(self.base_dropouts) - set(BASE_DROPOUTS)
        if unknown:
            raise ConfigError(f"unknown dropout names: {sorted(unknown)}")
        self.base_dropouts = {**BASE_DROPOUTS, **self.base_dropouts}
        for name in self.base_dropouts:
            p = self.dropout(name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"effective dropout {name}={p} outside [0, 1)")

    def dropout(self, name: str) -> float:
        return self.base_dropouts[name] * self.dropout_multiplier

    @property
    def out_dim(self) -> int:
        return self.embedding_size if self.tie_weights else self.hidden_size

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = []
        for layer in range(self.n_layers):
            d_in = self.embedding_size if layer == 0 else self.hidden_size
            d_out = self.out_dim if layer == self.n_layers - 1 else self.hidden_size
            dims.append((d_in, d_out))
        return dims

    def group_names(self) -> list[str]:
        return ["embedding"] + [f"lstm{i + 1}" for i in range(self.n_layers)] + ["head"]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def layer_group(name: str) -> str:
    """Group of a parameter name; decoder weights count as head."""
    first = name.split(".", 1)[0]
    return "head" if first in ("decoder", "head") else first


def _uniform(rng: SplitMix64, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def init_encoder(config: ModelConfig, rng: SplitMix64) -> dict[str, Tensor]:
    """Uniform(+-1/sqrt(fan_in)) matrices, zero biases.

    The embedding uses ``embedding_size`` as its fan-in because with tying
    it doubles as the decoder weight.
    """
    params = {"embedding": _uniform(rng, config.embedding_size, (config.vocab_size, config.embedding_size))}
    for i, (d_in, d_out) in enumerate(config.layer_dims(), start=1):
        params[f"lstm{i}.W"] = _uniform(rng, d_in, (d_in, 4 * d_out))
        params[f"lstm{i}.U"] = _uniform(rng, d_out, (d_out, 4 * d_out))
        params[f"lstm{i}.b"] = Tensor(np.zeros(4 * d_out), requires_grad=True)
    return params


def init_lm_head(config: ModelConfig, rng: SplitMix64) -> dict[str, Tensor]:
    params = {"decoder.bias": Tensor(np.zeros(config.vocab_size), requires_grad=True)}
    if not config.tie_weights:
        params["decoder.weight"] = _uniform(rng, config.out_dim, (config.out_dim, config.vocab_size))
    return params


def init_classifier_head(config: ModelConfig, rng: SplitMix64) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    if config.n_classes is None:
        raise ConfigError("classifier head needs n_classes")
    pooled = 3 * config.out_dim
    params = {
        "head.linear1.W": _uniform(rng, pooled, (pooled, config.head_hidden)),
        "head.linear1.b": Tensor(np.zeros(config.head_hidden), requires_grad=True),
        "head.bn.gamma": Tensor(np.ones(config.head_hidden), requires_grad=True),
        "head.bn.beta": Tensor(np.zeros(config.head_hidden), requires_grad=True),
        "head.linear2.W": _uniform(rng, config.head_hidden, (config.head_hidden, config.n_classes)),
        "head.linear2.b": Tensor(np.zeros(config.n_classes), requires_grad=True),
    }
    buffers = {"head.bn.running_mean": np.zeros(config.head_hidden),
               "head.bn.running_var": np.ones(config.head_hidden)}
    return params, buffers


# --- regularisers ----------------------------------------------------------

def _check_p(p: float, op: str, allow_one: bool) -> None:
    if not (0.0 <= p <= 1.0) or (p == 1.0 and not allow_one):
        raise ValueError(f"{op}: dropout probability {p} outside {'[0, 1]' if allow_one else '[0, 1)'}")


def apply_weight_drop(U: Tensor, p: float, rng: SplitMix64, training: bool = True) -> Tensor:
    """DropConnect on a hidden-to-hidden matrix.

    Sample once per sequence: the returned tensor is reused at every step.
    """
    _check_p(p, "apply_weight_drop", allow_one=True)
    if not training or p == 0.0:
        return U
    if p == 1.0:
        return ad.masked_multiply(U, np.zeros(U.shape))
    return ad.masked_multiply(U, rng.keep_mask(U.shape, p) / (1.0 - p))


def variational_mask(shape, p: float, rng: SplitMix64) -> np.ndarray:
    """Inverted-dropout mask; give the time axis size 1 so one mask covers every step."""
    _check_p(p, "variational_mask", allow_one=False)
    if p == 0.0:
        return np.ones(shape)
    return rng.keep_mask(shape, p) / (1.0 - p)


def embedding_dropout(E: Tensor, p: float, rng: SplitMix64) -> Tensor:
    """Drop whole vocabulary rows of the embedding matrix."""
    _check_p(p, "embedding_dropout", allow_one=False)
    if p == 0.0:
        return E
    return ad.masked_multiply(E, variational_mask((E.shape[0], 1), p, rng))


# --- forward passes --------------------------------------------------------

def lstm_cell_forward(x: Tensor, h: Tensor, c: Tensor, W: Tensor, U_masked: Tensor,
                      b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step built from tape primitives (gate order i, f, g, o)."""
    H = U_masked.shape[0]
    if h.shape[-1] != H or c.shape != h.shape or W.shape[1] != 4 * H:
        raise ShapeError(f"lstm_cell_forward: incompatible shapes x {x.shape}, h {h.shape}, "
                         f"c {c.shape}, W {W.shape}, U {U_masked.shape}")
    z = ad.add(ad.affine(x, W, b), ad.matmul(h, U_masked))
    i = ad.sigmoid(ad.slice_last(z, 0, H))
    f = ad.sigmoid(ad.slice_last(z, H, 2 * H))
    g = ad.tanh(ad.slice_last(z, 2 * H, 3 * H))
    o = ad.sigmoid(ad.slice_last(z, 3 * H, 4 * H))
    c_new = ad.add(ad.multiply(f, c), ad.multiply(i, g))
    h_new = ad.multiply(o, ad.tanh(c_new))
    return h_new, c_new


@dataclass
class EncoderOutput:
    output: Tensor                      # final layer, [B, T, out_dim]
    layer_outputs: list[Tensor]
    state: list[tuple[np.ndarray, np.ndarray]]


def zero_state(config: ModelConfig, batch: int) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(np.zeros((batch, d)), np.zeros((batch, d))) for _, d in config.layer_dims()]


def _check_ids(ids: np.ndarray, vocab_size: int) -> None:
    bad = np.argwhere((ids < 0) | (ids >= vocab_size))
    if bad.size:
        pos = tuple(int(v) for v in bad[0])
        raise DataError(f"token id {ids[pos]} out of range [0, {vocab_size}) at position {pos}")


def encoder_forward(token_ids, params: dict[str, Tensor], config: ModelConfig, mode: str = "eval",
                    rng: SplitMix64 | None = None, state=None) -> EncoderOutput:
    """Embedding -> embedding dropout -> stacked weight-dropped LSTMs.

    ``token_ids`` is [batch, time]. In ``train`` mode masks come from
    ``rng``; ``eval`` is deterministic.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ShapeError(f"encoder_forward: token ids must be [batch, time], got {ids.shape}")
    _check_ids(ids, config.vocab_size)
    train = mode == "train"
    if train and rng is None:
        raise ValueError("encoder_forward: train mode needs an rng")
    B = ids.shape[0]
    state = zero_state(config, B) if state is None else state
    E = params["embedding"]
    if train:
        E = embedding_dropout(E, config.dropout("embedding"), rng)
    x = ad.row_lookup(E, ids)
    if train:
        x = ad.masked_multiply(x, variational_mask((B, 1, config.embedding_size), config.dropout("input"), rng))
    outputs, new_state = [], []
    for layer in range(config.n_layers):
        pre = f"lstm{layer + 1}"
        U = apply_weight_drop(params[pre + ".U"], config.dropout("weight_drop"), rng, training=train)
        h0, c0 = state[layer]
        x, h, c = ad.lstm_sequence(x, params[pre + ".W"], U, params[pre + ".b"], h0, c0)
        outputs.append(x)
        new_state.append((h, c))
        if train and layer < config.n_layers - 1:
            x = ad.masked_multiply(x, variational_mask((B, 1, x.shape[-1]), config.dropout("hidden"), rng))
    return EncoderOutput(x, outputs, new_state)


def lm_decode(hidden: Tensor, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Project hidden states to vocabulary logits (tied: ``hidden @ embedding.T + bias``)."""
    if hidden.shape[-1] != config.out_dim:
        raise ShapeError(f"lm_decode: hidden dim {hidden.shape[-1]} != expected {config.out_dim}")
    W = ad.transpose(params["embedding"]) if config.tie_weights else params["decoder.weight"]
    return ad.add(ad.matmul(hidden, W), params["decoder.bias"])


def pool_concat(hidden_seq: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """[last state | max over time | mean over time]; sequences are left-padded."""
    if hidden_seq.data.ndim != 3 or hidden_seq.shape[1] == 0:
        raise ShapeError(f"classifier: need a non-empty [batch, time, dim] sequence, got {hidden_seq.shape}")
    last = ad.select(hidden_seq, hidden_seq.shape[1] - 1, axis=1)
    return ad.concat([last, ad.max_over_time(hidden_seq, mask), ad.mean_over_time(hidden_seq, mask)], axis=-1)


def classifier_logits(hidden_seq: Tensor, params: dict[str, Tensor], buffers: dict[str, np.ndarray],
                      config: ModelConfig, mode: str = "eval", rng: SplitMix64 | None = None,
                      mask: np.ndarray | None = None) -> Tensor:
    train = mode == "train"
    pooled = pool_concat(hidden_seq, mask)
    z = ad.affine(pooled, params["head.linear1.W"], params["head.linear1.b"])
    z = ad.batchnorm(z, params["head.bn.gamma"], params["head.bn.beta"],
                     buffers["head.bn.running_mean"], buffers["head.bn.running_var"], training=train)
    z = ad.relu(z)
    if train:
        z = ad.masked_multiply(z, variational_mask(z.shape, config.dropout("output"), rng))
    return ad.affine(z, params["head.linear2.W"], params["head.linear2.b"])


def classifier_forward(hidden_seq: Tensor, params: dict[str, Tensor], buffers: dict[str, np.ndarray],
                       config: ModelConfig, mode: str = "eval", rng: SplitMix64 | None = None,
                       mask: np.ndarray | None = None) -> np.ndarray:
    """Class probabilities [batch, n_classes]; argmax is the predicted author."""
    logits = classifier_logits(hidden_seq, params, buffers, config, mode, rng, mask)
    return ad.softmax(logits.data)


# --- model containers ------------------------------------------------------

class LanguageModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, rng: SplitMix64) -> "LanguageModel":
        params = init_encoder(config, rng.derive("init.encoder"))
        params.update(init_lm_head(config, rng.derive("init.lm_head")))
        return cls(config, params)

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def encoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if layer_group(k) != "head"}

    def forward(self, ids, mode="eval", rng=None, state=None) -> tuple[Tensor, list]:
        enc = encoder_forward(ids, self.params, self.config, mode, rng, state)
        out = enc.output
        if mode == "train":
            out = ad.masked_multiply(out, variational_mask((out.shape[0], 1, out.shape[2]),
                                                           self.config.dropout("output"), rng))
        return lm_decode(out, self.params, self.config), enc.state


class Classifier:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor], buffers: dict[str, np.ndarray],
                 labels: list[str] | None = None):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.labels = labels or [str(i) for i in range(config.n_classes)]

    @classmethod
    def from_encoder(cls, encoder: dict[str, Tensor], config: ModelConfig, rng: SplitMix64,
                     labels: list[str] | None = None) -> "Classifier":
        head, buffers = init_classifier_head(config, rng.derive("init.classifier_head"))
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in encoder.items()}
        params.update(head)
        return cls(config, params, buffers, labels)

    def logits(self, ids, mask=None, mode="eval", rng=None) -> Tensor:
        enc = encoder_forward(ids, self.params, self.config, mode, rng)
        return classifier_logits(enc.output, self.params, self.buffers, self.config, mode, rng, mask)

    def predict_proba(self, ids, mask=None) -> np.ndarray:
        return ad.softmax(self.logits(ids, mask).data)
