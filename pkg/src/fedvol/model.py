"""Single-layer LSTM binary classifier on a flat float64 parameter vector.

Parameters live in one contiguous array so that federated averaging,
clipping and noise act on plain vectors; ``Layout`` maps named segments onto
views of that array. Gradients are exact backpropagation-through-time.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .data import SampleSet
from .errors import FormatError, ParameterError, SizeError, ValidationError

GATES = ("i", "f", "g", "o")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 7
    hidden_dim: int = 32
    horizon: int = 5
    clamp_eps: float = 1e-7

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1 or self.horizon < 1:
            raise ParameterError("input_dim, hidden_dim and horizon must be >= 1")
        if not 0 < self.clamp_eps < 0.5:
            raise ParameterError("clamp_eps must lie in (0, 0.5)")

    @property
    def n_params(self):
        d, H = self.input_dim, self.hidden_dim
        return 4 * (H * d + H * H + H) + H + 1


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def stop(self):
        return self.offset + self.size


class Layout:
    """Ordered segments W_{i,f,g,o}, U_{i,f,g,o}, b_{i,f,g,o}, v, c tiling [0, p)."""

    def __init__(self, cfg: ModelConfig):
        d, H = cfg.input_dim, cfg.hidden_dim
        shapes = (
            [(f"W_{g}", (H, d)) for g in GATES]
            + [(f"U_{g}", (H, H)) for g in GATES]
            + [(f"b_{g}", (H,)) for g in GATES]
            + [("v", (H,)), ("c", (1,))]
        )
        segs, off = [], 0
        for name, shape in shapes:
            seg = Segment(name, off, shape)
            segs.append(seg)
            off = seg.stop
        self.cfg = cfg
        self.segments = tuple(segs)
        self.size = off
        self._by_name = {s.name: s for s in segs}
        # gate-stacked blocks are contiguous, so these are views too
        self.W = slice(0, 4 * H * d)
        self.U = slice(self.W.stop, self.W.stop + 4 * H * H)
        self.b = slice(self.U.stop, self.U.stop + 4 * H)
        self.head = slice(self.b.stop, off)
        self.lstm = slice(0, self.b.stop)

    def __getitem__(self, name) -> Segment:
        return self._by_name[name]

    def unflatten(self, values: np.ndarray) -> dict:
        if values.shape != (self.size,):
            raise ValidationError(f"expected a vector of length {self.size}, got {values.shape}")
        return {s.name: values[s.offset:s.stop].reshape(s.shape) for s in self.segments}

    def flatten(self, parts: dict) -> np.ndarray:
        out = np.empty(self.size)
        for s in self.segments:
            arr = np.asarray(parts[s.name], dtype=np.float64)
            if arr.shape != s.shape:
                raise ValidationError(f"segment {s.name}: shape {arr.shape} != {s.shape}")
            out[s.offset:s.stop] = arr.ravel()
        return out


def init_params(cfg: ModelConfig, seed) -> np.ndarray:
    """Uniform(+-1/sqrt(H)) weights, forget-gate bias 1, other biases 0."""
    lay = Layout(cfg)
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(cfg.hidden_dim)
    w = rng.uniform(-bound, bound, size=lay.size)
    w[lay.b] = 0.0
    w[lay["b_f"].offset:lay["b_f"].stop] = 1.0
    w[lay["c"].offset] = 0.0
    return w


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

def _unpack(cfg: ModelConfig, w: np.ndarray):
    d, H = cfg.input_dim, cfg.hidden_dim
    if w.shape != (cfg.n_params,):
        raise ValidationError(f"parameter vector has shape {w.shape}, expected ({cfg.n_params},)")
    W = w[: 4 * H * d].reshape(4 * H, d)
    o = 4 * H * d
    U = w[o: o + 4 * H * H].reshape(4 * H, H)
    o += 4 * H * H
    b = w[o: o + 4 * H]
    v = w[o + 4 * H: o + 5 * H]
    c = w[-1]
    return W, U, b, v, c


def _check_inputs(cfg: ModelConfig, X: np.ndarray):
    if X.ndim != 3 or X.shape[1:] != (cfg.horizon, cfg.input_dim):
        raise ValidationError(
            f"input batch shape {X.shape} does not match (n, {cfg.horizon}, {cfg.input_dim})"
        )
    if not np.all(np.isfinite(X)):
        raise ValidationError("input contains non-finite values")


def _run(cfg: ModelConfig, w: np.ndarray, X: np.ndarray, keep: bool):
    W, U, b, v, c = _unpack(cfg, w)
    H = cfg.hidden_dim
    B, T, _ = X.shape
    xz = X @ W.T + b  # (B, T, 4H)
    h = np.zeros((B, H))
    cell = np.zeros((B, H))
    cache = []
    for t in range(T):
        z = xz[:, t] + h @ U.T
        i = expit(z[:, :H])
        f = expit(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = expit(z[:, 3 * H:])
        c_new = f * cell + i * g
        tc = np.tanh(c_new)
        if keep:
            cache.append((i, f, g, o, cell, tc, h))
        cell = c_new
        h = o * tc
    logit = h @ v + c
    p = np.clip(expit(logit), cfg.clamp_eps, 1.0 - cfg.clamp_eps)
    return p, h, cache


def predict_proba(cfg: ModelConfig, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Probabilities for a batch of windows, shape (n, horizon, d) -> (n,)."""
    X = np.asarray(X, dtype=np.float64)
    _check_inputs(cfg, X)
    return _run(cfg, w, X, keep=False)[0]


def forward(cfg: ModelConfig, w: np.ndarray, window: np.ndarray) -> float:
    window = np.asarray(window, dtype=np.float64)
    return float(predict_proba(cfg, w, window[None])[0])


def bce_loss(prob, label):
    """Binary cross-entropy in nats; elementwise for arrays."""
    prob = np.asarray(prob, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    out = -(label * np.log(prob) + (1.0 - label) * np.log1p(-prob))
    return float(out) if out.ndim == 0 else out


def loss_and_grad(cfg: ModelConfig, w: np.ndarray, X: np.ndarray, y: np.ndarray):
    """Mean BCE over the batch and its exact gradient w.r.t. ``w``.

    The head gradient uses the clamped probability, d(loss)/d(logit) = p - y.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) == 0:
        raise SizeError("cannot differentiate over an empty batch")
    _check_inputs(cfg, X)
    B, T, d = X.shape
    H = cfg.hidden_dim
    W, U, b, v, c = _unpack(cfg, w)
    p, h_last, cache = _run(cfg, w, X, keep=True)
    loss = float(np.mean(bce_loss(p, y)))

    dlogit = (p - y) / B
    grad = np.empty_like(w)
    grad[-H - 1:-1] = h_last.T @ dlogit
    grad[-1] = dlogit.sum()

    dZ = np.empty((T, B, 4 * H))
    Hprev = np.empty((T, B, H))
    dh = np.outer(dlogit, v)
    dcell = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        i, f, g, o, c_prev, tc, h_prev = cache[t]
        dcell = dcell + dh * o * (1.0 - tc * tc)
        dz = dZ[t]
        dz[:, :H] = dcell * g * i * (1.0 - i)
        dz[:, H:2 * H] = dcell * c_prev * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dcell * i * (1.0 - g * g)
        dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
        Hprev[t] = h_prev
        dh = dz @ U
        dcell = dcell * f

    dZf = dZ.reshape(T * B, 4 * H)
    Xf = X.transpose(1, 0, 2).reshape(T * B, d)
    o1 = 4 * H * d
    o2 = o1 + 4 * H * H
    grad[:o1] = (dZf.T @ Xf).ravel()
    grad[o1:o2] = (dZf.T @ Hprev.reshape(T * B, H)).ravel()
    grad[o2:o2 + 4 * H] = dZf.sum(axis=0)
    return loss, grad


def backward(cfg: ModelConfig, w: np.ndarray, batch) -> np.ndarray:
    """Gradient of mean BCE over ``batch`` (a labeled SampleSet or list of Samples)."""
    X, y = _as_arrays(batch)
    return loss_and_grad(cfg, w, X, y)[1]


def _as_arrays(batch):
    if isinstance(batch, SampleSet):
        if batch.labels is None:
            raise ValidationError("sample set is unlabeled")
        return batch.X, batch.labels
    batch = list(batch)
    if not batch:
        raise SizeError("empty batch")
    return np.stack([s.window for s in batch]), np.array([s.label for s in batch], dtype=np.float64)


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, **hyper)

    def copy(self) -> "AdamState":
        return replace(self, m=self.m.copy(), v=self.v.copy())


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray):
    """One bias-corrected Adam update. Returns new (params, state); inputs untouched."""
    if not (params.shape == grad.shape == state.m.shape):
        raise ValidationError(
            f"length mismatch: params {params.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, m=m, v=v, t=t)


def n_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def train_epoch(
    cfg: ModelConfig,
    params: np.ndarray,
    opt: AdamState,
    data: SampleSet,
    batch_size: int,
    seed,
    trainable: slice | None = None,
):
    """Seeded shuffle, sequential mini-batches, one Adam step per batch.

    With ``trainable`` set, only that slice of the vector is updated and
    ``opt`` must be sized to it; everything else is left bit-identical.
    """
    if batch_size < 1:
        raise ParameterError("batch_size must be >= 1")
    n = len(data)
    if n == 0:
        raise SizeError("cannot train on an empty sample set")
    if data.labels is None:
        raise ValidationError("sample set is unlabeled")
    perm = np.random.default_rng(seed).permutation(n)
    X, y = data.X, data.labels.astype(np.float64)
    params = params.copy()
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        _, g = loss_and_grad(cfg, params, X[idx], y[idx])
        if trainable is None:
            params, opt = adam_step(opt, params, g)
        else:
            sub, opt = adam_step(opt, params[trainable], g[trainable])
            params[trainable] = sub
    return params, opt


@dataclass(frozen=True)
class Metrics:
    bce: float
    accuracy: float
    n: int


def metrics_from_probs(prob: np.ndarray, labels: np.ndarray) -> Metrics:
    prob = np.asarray(prob, dtype=np.float64)
    labels = np.asarray(labels)
    if len(prob) == 0:
        raise SizeError("cannot evaluate on no samples")
    pred = (prob >= 0.5).astype(labels.dtype)
    return Metrics(
        bce=float(np.mean(bce_loss(prob, labels))),
        accuracy=float(np.mean(pred == labels)),
        n=len(prob),
    )


def evaluate(cfg: ModelConfig, params: np.ndarray, data: SampleSet) -> Metrics:
    if len(data) == 0:
        raise SizeError("cannot evaluate on an empty sample set")
    if data.labels is None:
        raise ValidationError("sample set is unlabeled")
    return metrics_from_probs(predict_proba(cfg, params, data.X), data.labels)


# --------------------------------------------------------------------------
# verification
# --------------------------------------------------------------------------

def numerical_grad(cfg: ModelConfig, w: np.ndarray, X, y, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the mean BCE, coordinate by coordinate."""
    out = np.empty_like(w)
    wp = w.copy()
    for k in range(len(w)):
        orig = wp[k]
        wp[k] = orig + step
        lp = np.mean(bce_loss(predict_proba(cfg, wp, X), y))
        wp[k] = orig - step
        lm = np.mean(bce_loss(predict_proba(cfg, wp, X), y))
        wp[k] = orig
        out[k] = (lp - lm) / (2.0 * step)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max_k |a_k - b_k| / max(|a_k|, |b_k|, floor)."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def grad_check(cfg: ModelConfig = ModelConfig(3, 4, 3), seed: int = 0, step: float = 1e-5,
               batch: int = 2) -> float:
    """Max relative error of ``backward`` against central differences on a random batch."""
    rng = np.random.default_rng(seed)
    w = init_params(cfg, rng)
    # move biases off their init values so every path carries signal
    lay = Layout(cfg)
    w[lay.b] += rng.normal(0.0, 0.5, size=lay.b.stop - lay.b.start)
    w[-1] = rng.normal(0.0, 0.5)
    X = rng.normal(size=(batch, cfg.horizon, cfg.input_dim))
    y = rng.integers(0, 2, size=batch).astype(np.float64)
    _, g = loss_and_grad(cfg, w, X, y)
    return relative_error(g, numerical_grad(cfg, w, X, y, step))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

MAGIC = b"FEDVOLCK"
_HEADER = struct.Struct("<IIIdQ")  # input_dim, hidden_dim, horizon, clamp_eps, p


def save_checkpoint(path, cfg: ModelConfig, params: np.ndarray) -> None:
    if params.shape != (cfg.n_params,):
        raise ValidationError("parameter vector does not match the config")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(cfg.input_dim, cfg.hidden_dim, cfg.horizon, cfg.clamp_eps, len(params)))
        fh.write(np.asarray(params, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    off = len(MAGIC)
    try:
        d, H, T, eps, p = _HEADER.unpack_from(blob, off)
    except struct.error:
        raise FormatError("truncated checkpoint header") from None
    cfg = ModelConfig(d, H, T, eps)
    off += _HEADER.size
    if p != cfg.n_params or len(blob) - off != 8 * p:
        raise FormatError("checkpoint payload size does not match its header")
    return cfg, np.frombuffer(blob, dtype="<f8", count=p, offset=off).astype(np.float64)
