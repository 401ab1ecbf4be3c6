import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedvol.data import SampleSet
from fedvol.errors import FormatError, ParameterError, SizeError, ValidationError
from fedvol.model import (
    AdamState,
    Layout,
    ModelConfig,
    adam_step,
    backward,
    bce_loss,
    evaluate,
    forward,
    grad_check,
    init_params,
    load_checkpoint,
    loss_and_grad,
    metrics_from_probs,
    predict_proba,
    relative_error,
    save_checkpoint,
    train_epoch,
)

SMALL = ModelConfig(3, 4, 3)


def _labeled(X, y):
    n = len(X)
    dates = np.datetime64("2016-01-04") + np.arange(n)
    return SampleSet(np.asarray(X, float), np.zeros(n), dates, dates - 1,
                     np.full(n, "T", dtype=object), labels=np.asarray(y, dtype=np.int64))


def _sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


# ---------------------------------------------------------------- layout

def test_param_count():
    assert ModelConfig(7, 32, 5).n_params == 5153
    for d, H in [(1, 1), (3, 4), (7, 16)]:
        assert ModelConfig(d, H).n_params == 4 * (H * d + H * H + H) + H + 1


def test_segments_tile_exactly():
    lay = Layout(ModelConfig(5, 6, 2))
    off = 0
    for s in lay.segments:
        assert s.offset == off
        off = s.stop
    assert off == lay.size == ModelConfig(5, 6, 2).n_params
    assert lay.head == slice(lay["v"].offset, lay.size)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_flatten_unflatten_roundtrip(d, H, seed):
    lay = Layout(ModelConfig(d, H))
    x = np.random.default_rng(seed).normal(size=lay.size)
    assert lay.flatten(lay.unflatten(x)).tobytes() == x.tobytes()


def test_init_params():
    cfg = ModelConfig(7, 8)
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    assert a.tobytes() == b.tobytes()
    parts = Layout(cfg).unflatten(a)
    assert np.all(parts["b_f"] == 1.0)
    for g in "igo":
        assert np.all(parts[f"b_{g}"] == 0.0)
    assert np.all(np.abs(a[Layout(cfg).W]) <= 1 / math.sqrt(8))


def test_bad_config():
    with pytest.raises(ParameterError):
        ModelConfig(0, 4)
    with pytest.raises(ParameterError):
        ModelConfig(3, 4, 3, clamp_eps=0.5)


# ---------------------------------------------------------------- forward

def test_zero_params_give_half():
    cfg = ModelConfig(7, 5, 4)
    X = np.random.default_rng(0).normal(size=(6, 4, 7))
    assert np.all(predict_proba(cfg, np.zeros(cfg.n_params), X) == 0.5)


def test_hand_traced_single_step():
    cfg = ModelConfig(1, 1, 1)
    lay = Layout(cfg)
    parts = {s.name: np.zeros(s.shape) for s in lay.segments}
    parts["b_o"][:] = 5.0
    parts["b_g"][:] = 0.7
    parts["b_i"][:] = -0.3
    parts["v"][:] = 1.0
    w = lay.flatten(parts)
    # hand trace: i=s(-0.3), f=s(0), g=tanh(.7), o=s(5); c=f*0+i*g; h=o*tanh(c)
    i, g, o = _sigmoid(-0.3), math.tanh(0.7), _sigmoid(5.0)
    h = o * math.tanh(i * g)
    assert forward(cfg, w, np.array([[2.0]])) == pytest.approx(_sigmoid(h), abs=1e-15)


def _reference_forward(cfg, w, x):
    """Per-gate loop straight from the recurrence, one sample."""
    p = Layout(cfg).unflatten(w)
    H = cfg.hidden_dim
    h, c = np.zeros(H), np.zeros(H)
    sig = lambda z: 1 / (1 + np.exp(-z))
    for t in range(cfg.horizon):
        pre = {k: p[f"W_{k}"] @ x[t] + p[f"U_{k}"] @ h + p[f"b_{k}"] for k in "ifgo"}
        c = sig(pre["f"]) * c + sig(pre["i"]) * np.tanh(pre["g"])
        h = sig(pre["o"]) * np.tanh(c)
    return float(np.clip(sig(p["v"] @ h + p["c"][0]), cfg.clamp_eps, 1 - cfg.clamp_eps))


def test_batched_forward_matches_reference():
    cfg = ModelConfig(3, 5, 4)
    rng = np.random.default_rng(1)
    w = rng.normal(size=cfg.n_params)
    X = rng.normal(size=(7, 4, 3))
    got = predict_proba(cfg, w, X)
    for k in range(7):
        assert got[k] == pytest.approx(_reference_forward(cfg, w, X[k]), abs=1e-14)


def test_output_clamped():
    cfg = ModelConfig(2, 2, 2, clamp_eps=1e-3)
    w = np.zeros(cfg.n_params)
    w[-1] = 100.0
    assert forward(cfg, w, np.zeros((2, 2))) == 1 - 1e-3
    w[-1] = -100.0
    assert forward(cfg, w, np.zeros((2, 2))) == 1e-3


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 50))
def test_output_range(seed, scale):
    rng = np.random.default_rng(seed)
    w = rng.normal(scale=scale, size=SMALL.n_params)
    p = predict_proba(SMALL, w, rng.normal(scale=scale, size=(4, 3, 3)))
    assert np.all(p >= SMALL.clamp_eps) and np.all(p <= 1 - SMALL.clamp_eps)


def test_forward_rejects_bad_input():
    w = np.zeros(SMALL.n_params)
    with pytest.raises(ValidationError):
        forward(SMALL, w, np.zeros((3, 4)))
    with pytest.raises(ValidationError):
        forward(SMALL, w, np.full((3, 3), np.nan))
    with pytest.raises(ValidationError):
        forward(SMALL, np.zeros(5), np.zeros((3, 3)))


# ---------------------------------------------------------------- loss and gradients

def test_bce_values():
    assert bce_loss(0.5, 1) == pytest.approx(math.log(2), abs=1e-15)
    assert bce_loss(0.5, 0) == pytest.approx(math.log(2), abs=1e-15)
    eps = 1e-7
    assert bce_loss(1 - eps, 1) == pytest.approx(-math.log1p(-eps), rel=1e-9)
    assert bce_loss(1 - eps, 1) == pytest.approx(eps, rel=1e-6)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_check_small_config(seed):
    err = grad_check(SMALL, seed=seed)
    assert 0 < err < 1e-4


def test_fd_error_second_order():
    # truncation error of central differences scales as step^2
    errs = [grad_check(SMALL, seed=4, step=s) for s in (1e-3, 2e-3, 4e-3)]
    assert 3.0 < errs[1] / errs[0] < 5.0
    assert 3.0 < errs[2] / errs[1] < 5.0


def test_head_bias_gradient_identity():
    cfg = ModelConfig(3, 4, 3)
    rng = np.random.default_rng(2)
    w = rng.normal(size=cfg.n_params)
    X, y = rng.normal(size=(9, 3, 3)), rng.integers(0, 2, 9).astype(float)
    _, g = loss_and_grad(cfg, w, X, y)
    assert g[-1] == pytest.approx(np.mean(predict_proba(cfg, w, X) - y), abs=1e-12)


def test_zero_head_weight_blocks_lstm_gradient():
    cfg = ModelConfig(3, 4, 3)
    rng = np.random.default_rng(5)
    w = rng.normal(size=cfg.n_params)
    w[Layout(cfg)["v"].offset:Layout(cfg)["v"].stop] = 0.0
    _, g = loss_and_grad(cfg, w, rng.normal(size=(4, 3, 3)), np.array([1.0, 0, 1, 1]))
    assert np.all(g[Layout(cfg).lstm] == 0.0)


def test_batch_gradient_is_mean_of_sample_gradients():
    rng = np.random.default_rng(3)
    w = rng.normal(size=SMALL.n_params)
    X, y = rng.normal(size=(5, 3, 3)), rng.integers(0, 2, 5).astype(float)
    full = loss_and_grad(SMALL, w, X, y)[1]
    each = np.mean([loss_and_grad(SMALL, w, X[k:k + 1], y[k:k + 1])[1] for k in range(5)], axis=0)
    assert np.allclose(full, each, rtol=0, atol=1e-13)


def test_backward_accepts_samples_and_rejects_empty():
    rng = np.random.default_rng(0)
    s = _labeled(rng.normal(size=(3, 3, 3)), [1, 0, 1])
    w = init_params(SMALL, 0)
    assert np.array_equal(backward(SMALL, w, s), backward(SMALL, w, list(s)))
    with pytest.raises(SizeError):
        backward(SMALL, w, [])


# ---------------------------------------------------------------- adam

def test_adam_first_step_by_hand():
    st0 = AdamState.zeros(2, lr=0.1)
    params, g = np.array([1.0, -2.0]), np.array([0.5, -4.0])
    new, st1 = adam_step(st0, params, g)
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    expect = params - 0.1 * g / (np.abs(g) + 1e-8)
    assert np.allclose(new, expect, atol=1e-15)
    assert st1.t == 1 and st0.t == 0
    assert np.allclose(st1.m, 0.1 * g) and np.allclose(st1.v, 0.001 * g * g)


def test_adam_zero_grad_and_determinism():
    st0 = AdamState(np.array([1.0, 2.0]), np.array([3.0, 4.0]), 5, lr=0.0)
    new, st1 = adam_step(st0, np.array([1.0, 1.0]), np.zeros(2))
    assert np.array_equal(new, [1.0, 1.0])
    assert np.allclose(st1.m, [0.9, 1.8]) and np.allclose(st1.v, [3 * 0.999, 4 * 0.999])
    a = adam_step(AdamState.zeros(2), np.ones(2), np.array([0.3, 0.1]))
    b = adam_step(AdamState.zeros(2), np.ones(2), np.array([0.3, 0.1]))
    assert a[0].tobytes() == b[0].tobytes()
    with pytest.raises(ValidationError):
        adam_step(AdamState.zeros(3), np.ones(2), np.ones(2))


# ---------------------------------------------------------------- training

def test_train_epoch_step_count():
    rng = np.random.default_rng(0)
    data = _labeled(rng.normal(size=(10, 3, 3)), rng.integers(0, 2, 10))
    _, opt = train_epoch(SMALL, init_params(SMALL, 0), AdamState.zeros(SMALL.n_params), data, 4, 0)
    assert opt.t == 3
    with pytest.raises(ParameterError):
        train_epoch(SMALL, init_params(SMALL, 0), AdamState.zeros(SMALL.n_params), data, 0, 0)


def test_train_epoch_deterministic_and_trainable_slice():
    rng = np.random.default_rng(1)
    data = _labeled(rng.normal(size=(20, 3, 3)), rng.integers(0, 2, 20))
    w0 = init_params(SMALL, 1)
    a, _ = train_epoch(SMALL, w0, AdamState.zeros(SMALL.n_params), data, 8, 5)
    b, _ = train_epoch(SMALL, w0, AdamState.zeros(SMALL.n_params), data, 8, 5)
    assert a.tobytes() == b.tobytes()
    head = Layout(SMALL).head
    c, _ = train_epoch(SMALL, w0, AdamState.zeros(head.stop - head.start), data, 8, 5, trainable=head)
    assert c[Layout(SMALL).lstm].tobytes() == w0[Layout(SMALL).lstm].tobytes()
    assert not np.array_equal(c[head], w0[head])


def test_learns_separable_toy():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(64, 3, 3))
    y = (X.mean(axis=(1, 2)) > 0).astype(int)
    data = _labeled(X, y)
    w, opt = init_params(SMALL, 0), AdamState.zeros(SMALL.n_params, lr=0.02)
    for e in range(50):
        w, opt = train_epoch(SMALL, w, opt, data, 16, e)
    assert evaluate(SMALL, w, data).accuracy == 1.0


# ---------------------------------------------------------------- evaluation

def test_evaluate_examples():
    m = metrics_from_probs(np.array([0.6, 0.4]), np.array([1, 0]))
    assert m.accuracy == 1.0 and m.n == 2
    cfg = ModelConfig(3, 2, 3)
    data = _labeled(np.ones((4, 3, 3)), [1, 0, 1, 1])
    z = evaluate(cfg, np.zeros(cfg.n_params), data)
    assert z.bce == pytest.approx(math.log(2), abs=1e-15)
    assert z.accuracy == 0.75
    confident = metrics_from_probs(np.array([1 - 1e-7, 1e-7]), np.array([1, 0]))
    assert confident.bce == pytest.approx(-math.log1p(-1e-7), rel=1e-9)
    with pytest.raises(SizeError):
        metrics_from_probs(np.array([]), np.array([]))


def test_evaluate_does_not_mutate():
    w = init_params(SMALL, 0)
    before = w.tobytes()
    evaluate(SMALL, w, _labeled(np.ones((2, 3, 3)), [0, 1]))
    assert w.tobytes() == before


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([0.0])) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig(7, 6, 5, 1e-6)
    w = np.random.default_rng(0).normal(size=cfg.n_params)
    path = tmp_path / "m.ck"
    save_checkpoint(path, cfg, w)
    cfg2, w2 = load_checkpoint(path)
    assert cfg2 == cfg
    assert w2.tobytes() == w.tobytes()
    raw = path.read_bytes()
    assert raw[:8] == b"FEDVOLCK"
    assert raw[-8:] == w[-1:].astype("<f8").tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ck"
    path.write_bytes(b"NOTACHECKPOINT")
    with pytest.raises(FormatError):
        load_checkpoint(path)
    cfg = ModelConfig(2, 2, 2)
    save_checkpoint(path, cfg, np.zeros(cfg.n_params))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(path)
