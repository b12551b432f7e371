import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdm_risk import nn
from pdm_risk.data_model import Generation, Window
from pdm_risk.errors import ConfigError, ContractError, NumericError
from pdm_risk.nn import ModelConfig


def _cfg(**kw):
    base = dict(n_layers=2, hidden_size=5, input_size=3, dropout_rate=0.0, l2_lambda=0.0, seed=0)
    return ModelConfig(**{**base, **kw})


def _batch(b=4, f=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(b, 10, f)), rng.integers(0, 3, size=(b, 10))


def _numeric_grad(model, x, y, key, n_probe=6, eps=1e-6, weights=None, drop_seed=None):
    rng = np.random.default_rng(123)
    p = model.params[key]
    out = []
    for flat in rng.choice(p.size, size=min(n_probe, p.size), replace=False):
        idx = np.unravel_index(flat, p.shape)
        vals = []
        for sign in (1, -1):
            p[idx] += sign * eps
            r = None if drop_seed is None else np.random.default_rng(drop_seed)
            logits, _ = nn.forward(model, x, training=drop_seed is not None or model.training, rng=r)
            vals.append(nn.loss(logits, y, model, model.config.l2_lambda, weights))
            p[idx] -= sign * eps
        out.append((idx, (vals[0] - vals[1]) / (2 * eps)))
    return out


@pytest.mark.parametrize("training", [True, False])
def test_gradient_check(training):
    cfg = _cfg(dropout_rate=0.3 if training else 0.0, l2_lambda=0.01)
    model = nn.init(cfg, 0)
    # move running stats and affine params off their identity values
    rng = np.random.default_rng(5)
    for k in model.running:
        model.running[k] = model.running[k] + rng.uniform(0.1, 0.5, model.running[k].shape)
    for k in model.params:
        if k.startswith("bn"):
            model.params[k] = model.params[k] + rng.normal(0, 0.3, model.params[k].shape)
    model.training = training
    x, y = _batch()
    weights = np.array([1.0, 0.5, 2.0, 1.0])
    drop_seed = 9 if training else None
    r = None if drop_seed is None else np.random.default_rng(drop_seed)
    logits, cache = nn.forward(model, x, training=training, rng=r)
    grads = nn.backward(model, cache, y, weights)
    worst = 0.0
    for key in model.params:
        for idx, num in _numeric_grad(model, x, y, key, weights=weights, drop_seed=drop_seed):
            ana = grads[key][idx]
            worst = max(worst, abs(ana - num) / max(1e-8, abs(ana) + abs(num)))
    assert worst < 1e-4


def test_adam_first_step_hand_value():
    cfg = _cfg(n_layers=1, hidden_size=1, input_size=1)
    model = nn.init(cfg, 0)
    for k in model.params:
        model.params[k] = np.zeros_like(model.params[k])
    nn.adam_step(model, {k: np.full_like(v, 0.5) for k, v in model.params.items()})
    # m_hat = g and v_hat = g^2, so the step is -lr * g / (|g| + eps)
    expected = -0.001 * 0.5 / (0.5 + 1e-8)
    assert model.params["head.b"][0] == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(-0.00099999998, rel=1e-9)


def test_adam_clipping_scales_global_norm():
    cfg = _cfg(n_layers=1, hidden_size=1, input_size=1, clip_norm=1.0, adam_beta1=0.0, adam_beta2=0.0)
    model = nn.init(cfg, 0)
    before = {k: v.copy() for k, v in model.params.items()}
    nn.adam_step(model, {k: np.full_like(v, 10.0) for k, v in model.params.items()})
    # with both betas 0 the step is lr * sign(g) regardless of scale
    for k in model.params:
        assert np.allclose(model.params[k] - before[k], -0.001, atol=1e-9)


def test_loss_uniform_logits_is_ln3():
    model = nn.init(_cfg(), 0)
    logits = np.zeros((2, 10, 3))
    y = np.zeros((2, 10), int)
    assert nn.loss(logits, y, model, 0.0) == pytest.approx(np.log(3), abs=1e-12)


def test_l2_penalty_hand_value():
    cfg = _cfg(n_layers=1, hidden_size=1, input_size=1)
    model = nn.init(cfg, 0)
    for k in model.params:
        model.params[k] = np.zeros_like(model.params[k])
    model.params["head.W"][:] = 1.0  # 3 entries
    model.params["lstm0.W"][0, 0] = 1.0
    model.params["lstm0.b"][:] = 5.0  # biases are not penalized
    assert nn.l2_penalty(model, 2e-4) == pytest.approx(2e-4 * 4)
    assert nn.l2_penalty(model, 2e-4) == pytest.approx(0.0008)


def test_init_shapes_and_forget_bias():
    cfg = _cfg(n_layers=3, hidden_size=4, input_size=7)
    model = nn.init(cfg, 0)
    assert model.params["lstm0.W"].shape == (16, 11)
    assert model.params["lstm1.W"].shape == (16, 8)
    assert model.params["head.W"].shape == (4, 3)
    for l in range(3):
        assert np.all(model.gate_bias(l, "forget") == 1.0)
        assert np.all(model.gate_bias(l, "input") == 0.0)
        assert np.all(np.abs(model.params[f"lstm{l}.W"]) <= 0.5)
    assert sorted(model.weight_names) == ["head.W", "lstm0.W", "lstm1.W", "lstm2.W"]


def test_zero_weights_give_zero_logits():
    model = nn.init(_cfg(), 0)
    for k in model.params:
        if k.endswith(".W") or k == "head.b":
            model.params[k] = np.zeros_like(model.params[k])
    x, _ = _batch()
    logits, _ = nn.forward(model, x, training=False)
    assert np.all(logits == 0.0)


def test_batchnorm_identity_in_inference():
    # running mean 0, var 1 - eps, gamma 1, beta 0: the BN layer passes h through unchanged
    cfg = _cfg(n_layers=1)
    model = nn.init(cfg, 0)
    model.running["bn0.var"] = np.full(5, 1.0 - cfg.bn_eps)
    x, _ = _batch()
    logits, cache = nn.forward(model, x, training=False)
    hs = cache["layers"][0]["hs"].transpose(1, 0, 2)  # cache is time-major
    assert np.allclose(logits, hs @ model.params["head.W"] + model.params["head.b"], atol=1e-12)


def test_forward_is_per_window_in_inference():
    model = nn.init(_cfg(), 0)
    x, _ = _batch(b=6)
    perm = np.random.default_rng(1).permutation(6)
    a, _ = nn.forward(model, x, training=False)
    b, _ = nn.forward(model, x[perm], training=False)
    assert np.allclose(a[perm], b, atol=1e-12)


def test_duplicated_batch_gives_same_gradient():
    model = nn.init(_cfg(l2_lambda=1e-3), 0)
    x, y = _batch()
    g1 = nn.backward(model, nn.forward(model, x, False)[1], y)
    g2 = nn.backward(model, nn.forward(model, np.concatenate([x, x]), False)[1], np.concatenate([y, y]))
    for k in g1:
        assert np.allclose(g1[k], g2[k], atol=1e-12)


def test_nonfinite_input_raises_numeric_error():
    model = nn.init(_cfg(), 0)
    x, _ = _batch()
    x[0, 4, 0] = np.nan
    with pytest.raises(NumericError, match="layer 0 at timestep 4"):
        nn.forward(model, x, training=False)


def test_shape_and_config_contracts():
    model = nn.init(_cfg(), 0)
    with pytest.raises(ContractError):
        nn.forward(model, np.zeros((2, 10, 4)), training=False)
    with pytest.raises(ContractError):
        nn.forward(nn.init(_cfg(dropout_rate=0.5), 0), np.zeros((2, 10, 3)), training=True)
    with pytest.raises(ConfigError):
        ModelConfig(dropout_rate=1.0)
    with pytest.raises(ConfigError):
        ModelConfig(dtype="float16")


def _windows(n=16, seed=0, f=3):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        y = rng.integers(0, 3, size=10)
        x = rng.normal(0, 0.3, size=(10, f))
        x[:, 0] += y  # the class is readable from feature 0
        out.append(Window(f"w{i}", Generation.GEN1, x, y))
    return out


def test_checkpoint_roundtrip_and_mismatch(tmp_path):
    cfg = _cfg(epochs=2, batch_size=8, dropout_rate=0.2)
    model, _ = nn.train(nn.init(cfg), _windows())
    path = tmp_path / "m.npz"
    nn.save_checkpoint(model, path)
    back = nn.load_checkpoint(path, expected=cfg)
    assert back.step == model.step
    for k in model.params:
        assert np.array_equal(back.params[k], model.params[k])
        assert np.array_equal(back.m[k], model.m[k])
    for k in model.running:
        assert np.array_equal(back.running[k], model.running[k])
    p1, p2 = nn.predict(model, _windows(seed=1)), nn.predict(back, _windows(seed=1))
    assert np.array_equal(p1.probs, p2.probs)
    with pytest.raises(ContractError, match="hidden_size"):
        nn.load_checkpoint(path, expected=cfg.replace(hidden_size=6))


def test_training_is_deterministic():
    cfg = _cfg(epochs=2, batch_size=8, dropout_rate=0.3)
    a, ta = nn.train(nn.init(cfg), _windows())
    b, tb = nn.train(nn.init(cfg), _windows())
    assert ta == tb
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_model_learns_separable_labels():
    cfg = _cfg(hidden_size=8, epochs=40, batch_size=8, learning_rate=0.01, dropout_rate=0.0)
    model, trace = nn.train(nn.init(cfg), _windows(64))
    assert trace[-1] < 0.2 < trace[0]
    test = _windows(32, seed=3)
    pred = nn.predict(model, test)
    acc = np.mean(pred.labels == np.stack([w.labels for w in test]))
    assert acc > 0.85


def test_float32_matches_float64():
    x, _ = _batch()
    m64 = nn.init(_cfg(), 0)
    m32 = nn.init(_cfg(dtype="float32"), 0)
    assert m32.params["lstm0.W"].dtype == np.float32
    a, _ = nn.forward(m64, x, training=False)
    b, _ = nn.forward(m32, x, training=False)
    assert b.dtype == np.float32
    assert np.allclose(a, b, atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), b=st.integers(1, 5))
def test_predict_probs_are_distributions(seed, b):
    model = nn.init(_cfg(), seed)
    wins = [Window(f"k{i}", Generation.GEN2, np.random.default_rng(seed + i).normal(size=(10, 3))) for i in range(b)]
    pred = nn.predict(model, wins)
    assert pred.probs.shape == (b, 10, 3)
    assert np.allclose(pred.probs.sum(-1), 1.0, atol=1e-9)
    assert np.array_equal(pred.labels, pred.probs.argmax(-1))


def test_float32_checkpoint_is_exact(tmp_path):
    cfg = _cfg(epochs=1, batch_size=8, dtype="float32")
    model, _ = nn.train(nn.init(cfg), _windows())
    nn.save_checkpoint(model, tmp_path / "m.npz")
    with np.load(tmp_path / "m.npz") as z:
        assert z["param/head.W"].dtype == np.float64
    back = nn.load_checkpoint(tmp_path / "m.npz", expected=cfg)
    assert back.params["head.W"].dtype == np.float32
    assert all(np.array_equal(back.params[k], model.params[k]) for k in model.params)
