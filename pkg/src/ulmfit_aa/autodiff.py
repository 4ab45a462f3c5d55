"""Dense float64 tensors with a reverse-mode differentiation tape.

Primitives record themselves on the active :class:`Tape` whenever one of
their operands requires a gradient::

    with Tape() as tape:
        loss = cross_entropy_flat(affine(x, W, b), targets)
    tape.backward(loss)
    W.grad  # dloss/dW

Outside a ``with Tape()`` block nothing is recorded, which is how
evaluation runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DivergenceError, ShapeError

__all__ = [
    "Tensor", "Tape", "AdamState", "backward", "adam_step", "finite_difference_check",
    "matmul", "add", "multiply", "sigmoid", "tanh", "relu", "concat", "row_lookup",
    "masked_multiply", "mean_over_time", "max_over_time", "affine", "batchnorm",
    "dot", "sum_all", "reshape", "transpose", "select", "slice_last", "lstm_sequence",
    "cross_entropy_flat", "softmax", "log_softmax",
]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __mul__(self, other):
        return multiply(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as primitives execute, so the list is already in
    topological order; ``backward`` walks it once in reverse.
    """

    _active: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.remove(self)

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._active[-1] if cls._active else None

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _record(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor(out_data)
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, fn, op))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf on ``tape`` with d(loss)/d(leaf).

    Leaves that do not influence ``loss`` end up with a zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    produced = {id(n.out) for n in tape.nodes}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                t.grad = np.zeros_like(t.data)
    if id(loss) not in produced:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in produced:
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
            else:
                t.grad += gi


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)
    return _record("add", a.data + b.data, (a, b), fn)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("multiply", a, b)

    def fn(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _record("multiply", a.data * b.data, (a, b), fn)


def masked_multiply(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant (broadcastable) mask; no gradient flows to the mask."""
    mask = np.asarray(mask, dtype=np.float64)
    try:
        np.broadcast_shapes(x.shape, mask.shape)
    except ValueError:
        raise ShapeError(f"masked_multiply: cannot broadcast shapes {x.shape} and {mask.shape}") from None
    return _record("masked_multiply", x.data * mask, (x,),
                   lambda g: (_unbroadcast(g * mask, x.shape),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


# --- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` of shape [..., n, k] and ``b`` of shape [k, m]."""
    if a.data.ndim < 2 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    return _record("matmul", a.data @ b.data, (a, b), fn)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for ``x`` [..., in], ``W`` [in, out], ``b`` [out]."""
    if x.data.ndim < 1 or W.data.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"affine: incompatible shapes {x.shape}, {W.shape} and bias {b.shape}")

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g @ W.data.T if x.requires_grad else None,
                x.data.reshape(-1, x.shape[-1]).T @ g2 if W.requires_grad else None,
                g2.sum(axis=0) if b.requires_grad else None)
    return _record("affine", x.data @ W.data + b.data, (x, W, b), fn)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: incompatible shapes {a.shape} and {b.shape}")
    return _record("dot", np.dot(a.data, b.data), (a, b),
                   lambda g: (g * b.data, g * a.data))


def sum_all(x: Tensor) -> Tensor:
    return _record("sum", np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


# --- structural ------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _record("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 dims, got {x.shape}")
    return _record("transpose", np.swapaxes(x.data, -1, -2), (x,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _record("concat", y, tensors, fn)


def select(x: Tensor, index: int, axis: int) -> Tensor:
    """Pick one position along ``axis``, dropping that axis."""
    y = np.take(x.data, index, axis=axis)

    def fn(g):
        out = np.zeros_like(x.data)
        idx = [slice(None)] * x.data.ndim
        idx[axis] = index
        out[tuple(idx)] = g
        return (out,)
    return _record("select", y, (x,), fn)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[..., start:stop]``."""
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"slice_last: range [{start}, {stop}) invalid for shape {x.shape}")

    def fn(g):
        out = np.zeros_like(x.data)
        out[..., start:stop] = g
        return (out,)
    return _record("slice_last", x.data[..., start:stop], (x,), fn)


def row_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D ``table``; ``ids`` may have any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"row_lookup: table must be 2-D, got {table.shape} with ids {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"row_lookup: ids out of range for table {table.shape} (ids shape {ids.shape})")

    def fn(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)
    return _record("row_lookup", table.data[ids], (table,), fn)


# --- pooling over time -----------------------------------------------------

def _time_mask(x: Tensor, mask, op: str) -> np.ndarray:
    if x.data.ndim < 2:
        raise ShapeError(f"{op}: need [..., T, H] input, got {x.shape}")
    if x.shape[-2] == 0:
        raise ShapeError(f"{op}: time length is 0 for shape {x.shape}")
    if mask is None:
        return np.ones(x.shape[:-1] + (1,))
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape[:-1]:
        raise ShapeError(f"{op}: mask shape {mask.shape} does not match {x.shape}")
    return mask[..., None]


def mean_over_time(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Average over the time axis (second-to-last); ``mask`` excludes padding."""
    m = _time_mask(x, mask, "mean_over_time")
    count = m.sum(axis=-2)
    y = (x.data * m).sum(axis=-2) / count
    return _record("mean_over_time", y, (x,),
                   lambda g: (np.expand_dims(g / count, -2) * m,))


def max_over_time(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    m = _time_mask(x, mask, "max_over_time")
    masked = np.where(m > 0, x.data, -np.inf)
    arg = np.argmax(masked, axis=-2)
    y = np.take_along_axis(x.data, np.expand_dims(arg, -2), axis=-2)[..., 0, :]

    def fn(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, np.expand_dims(arg, -2), np.expand_dims(g, -2), axis=-2)
        return (out,)
    return _record("max_over_time", y, (x,), fn)


# --- normalisation ---------------------------------------------------------

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Batch normalisation over axis 0 of ``x`` [N, F].

    In training mode the running statistics are updated in place.
    """
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: incompatible shapes {x.shape}, {gamma.shape} and {beta.shape}")
    if training:
        n = x.shape[0]
        if n < 2:
            raise ShapeError(f"batchnorm: training needs batch >= 2, got shape {x.shape}")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = gamma.data * xhat + beta.data

    def fn(g):
        gx = None
        gxhat = g * gamma.data
        if x.requires_grad:
            if training:
                gx = inv * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
            else:
                gx = gxhat * inv
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)
    return _record("batchnorm", y, (x, gamma, beta), fn)


# --- recurrent -------------------------------------------------------------

def lstm_sequence(x: Tensor, W: Tensor, U: Tensor, b: Tensor,
                  h0: np.ndarray, c0: np.ndarray) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Run an LSTM layer over a whole sequence as one tape node.

    ``x`` is [B, T, D]; ``W`` [D, 4H], ``U`` [H, 4H], ``b`` [4H] with gate
    blocks ordered (input, forget, cell, output). ``h0``/``c0`` are constant
    [B, H] initial states. Returns the hidden sequence [B, T, H] and the
    final (h, c) as plain arrays (state carried between truncated-BPTT
    windows is not differentiated through).
    """
    B, T, D = x.shape
    H = U.shape[0]
    if W.shape != (D, 4 * H) or U.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError(f"lstm_sequence: incompatible shapes x {x.shape}, W {W.shape}, "
                         f"U {U.shape}, b {b.shape}")
    if h0.shape != (B, H) or c0.shape != (B, H):
        raise ShapeError(f"lstm_sequence: state shapes {h0.shape}/{c0.shape} do not match ({B}, {H})")
    Wd, Ud = W.data, U.data
    zx = x.data @ Wd + b.data
    acts = np.empty((B, T, 4 * H))
    cs = np.empty((B, T, H))
    hs = np.empty((B, T, H))
    h, c = h0, c0
    for t in range(T):
        z = zx[:, t] + h @ Ud
        a = acts[:, t]
        a[:, :2 * H] = _sigmoid(z[:, :2 * H])
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        a[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
        c = a[:, H:2 * H] * c + a[:, :H] * a[:, 2 * H:3 * H]
        cs[:, t] = c
        h = a[:, 3 * H:] * np.tanh(c)
        hs[:, t] = h

    def fn(g):
        dz_all = np.empty((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        gU = np.zeros_like(Ud)
        for t in range(T - 1, -1, -1):
            a = acts[:, t]
            i, f, gg, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            c_t = cs[:, t]
            c_prev = cs[:, t - 1] if t > 0 else c0
            h_prev = hs[:, t - 1] if t > 0 else h0
            tc = np.tanh(c_t)
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :H] = dc * gg * i * (1.0 - i)
            dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            gU += h_prev.T @ dz
            dh_next = dz @ Ud.T
            dc_next = dc * f
        flat = dz_all.reshape(-1, 4 * H)
        gx = dz_all @ Wd.T if x.requires_grad else None
        gW = x.data.reshape(-1, D).T @ flat if W.requires_grad else None
        return gx, gW, gU, flat.sum(axis=0)

    out = _record("lstm_sequence", hs, (x, W, U, b), fn)
    return out, h.copy(), c.copy()


# --- losses ----------------------------------------------------------------

def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy_flat(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood over all leading positions of ``logits``.

    ``logits`` [..., V] is flattened to [N, V] and ``targets`` to [N].
    """
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"cross_entropy_flat: {z.shape[0]} logit rows but {t.shape[0]} targets")
    bad = np.flatnonzero((t < 0) | (t >= V))
    if bad.size:
        raise ShapeError(f"cross_entropy_flat: target {t[bad[0]]} out of range [0, {V}) at row {bad[0]}")
    logp = log_softmax(z)
    n = z.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, t].mean()

    def fn(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)
    return _record("cross_entropy_flat", loss, (logits,), fn)


# --- verification oracle ---------------------------------------------------

def finite_difference_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
                            eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the parameter list to a scalar tensor and must be
    deterministic. Every entry of every parameter is perturbed; the error of
    one parameter tensor is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``
    with L2 norms taken over the tensor, and the maximum over tensors is
    returned.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.requires_grad = True
    with Tape() as tape:
        loss = f(params)
    if not np.all(np.isfinite(loss.data)):
        raise DivergenceError("finite_difference_check: f returned a non-finite value")
    backward(tape, loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.data.size) if p.grad is None else p.grad.reshape(-1).copy()
        numeric = np.empty(p.data.size)
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = float(f(params).data)
            flat[k] = orig - eps
            down = float(f(params).data)
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise DivergenceError("finite_difference_check: f returned a non-finite value")
            numeric[k] = (up - down) / (2.0 * eps)
        err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(err))
    return worst


# --- optimiser -------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.beta1, self.beta2, self.eps, self.weight_decay, self.t,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()},
                         dict(self.steps))


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | dict[str, float]) -> None:
    """One Adam update with decoupled weight decay, applied in place.

    ``lr`` is either a single rate or a per-parameter mapping. Only the
    parameters present in ``params`` are touched; bias correction uses each
    parameter's own update count, so a group unfrozen late starts cleanly.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"adam_step: non-finite gradient for parameter {name!r}")
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        rate = lr[name] if isinstance(lr, dict) else lr
        if rate <= 0:
            raise ValueError(f"adam_step: learning rate must be positive, got {rate} for {name!r}")
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        k = state.steps.get(name, 0) + 1
        state.steps[name] = k
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** k)
        v_hat = v / (1.0 - b2 ** k)
        p.data -= rate * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            p.data -= rate * state.weight_decay * p.data
    state.t += 1
