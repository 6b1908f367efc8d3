import json
import math

import numpy as np
import pytest

from evforecast.errors import CorruptModelError, ModelVersionError, ShapeError, TrainingDivergenceError
from evforecast.lstm import (
    AdamState,
    LstmLayerParams,
    LstmModel,
    LstmState,
    TrainReport,
    adam_update,
    backward_window,
    build_model,
    cell_step,
    clip_by_global_norm,
    forward_batch,
    forward_window,
    load_model,
    predict,
    save_model,
    train,
)
from oracles import fixed_masks, gradient_check, random_tiny_model


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


class Windows:
    def __init__(self, inputs, targets):
        self.inputs, self.targets = inputs, targets


def sine_windows(n=300, w=12, seed=0):
    t = np.arange(n + w)
    s = np.sin(2 * np.pi * t / 24)
    X = np.stack([s[i:i + w, None] for i in range(n)])
    return Windows(X, s[w:w + n])


def zero_model(f=2, H=3, layers=1, bias=0.0):
    ls = [LstmLayerParams.zeros(f if k == 0 else H, H) for k in range(layers)]
    return LstmModel(ls, np.zeros(H), np.array([bias]))


# --- cell ---------------------------------------------------------------------

def test_cell_zero_parameters():
    p = LstmLayerParams.zeros(3, 2)
    state, cache = cell_step(p, [1.0, -2.0, 5.0], LstmState.zeros(2))
    assert np.array_equal(state.h, [0, 0]) and np.array_equal(state.c, [0, 0])
    assert np.array_equal(cache["f"], [0.5, 0.5]) and np.array_equal(cache["c_bar"], [0, 0])


def test_cell_scalar_hand_computation():
    one = {g: np.ones((1, 1)) for g in "fioc"}
    p = LstmLayerParams.from_gates(one, one, {g: 0.0 for g in "fioc"})
    state, cache = cell_step(p, [1.0], LstmState.zeros(1))
    f = sig(1.0)
    c = f * math.tanh(1.0)
    h = f * math.tanh(c)
    assert abs(cache["f"][0] - 0.7310585786) < 1e-10
    assert abs(cache["c_bar"][0] - 0.7615941560) < 1e-10
    assert abs(state.c[0] - c) < 1e-15 and abs(state.c[0] - 0.55677) < 1e-5
    assert abs(state.h[0] - h) < 1e-15
    # 0.7310586 * tanh(0.5567705) = 0.3696064; the quoted 0.36953 agrees to 1e-4 only
    assert abs(state.h[0] - 0.3696064) < 1e-7 and abs(state.h[0] - 0.36953) < 1e-4


def test_cell_forget_gate_open_keeps_cell():
    p = LstmLayerParams.zeros(2, 3)
    p.b_f[:] = 40.0
    p.b_i[:] = -40.0
    K = np.array([1.5, -0.25, 3.0])
    state, _ = cell_step(p, [0.3, 0.7], LstmState(np.zeros(3), K))
    assert np.allclose(state.c, K, atol=1e-12)


def test_cell_shape_error():
    with pytest.raises(ShapeError):
        cell_step(LstmLayerParams.zeros(3, 2), [1.0, 2.0], LstmState.zeros(2))


def test_named_gate_views_alias_fused_storage():
    p = LstmLayerParams.zeros(2, 3)
    p.W_ox[:] = 7.0
    assert np.all(p.wx[6:9] == 7.0) and np.all(p.wx[:6] == 0) and np.all(p.wx[9:] == 0)
    assert p.W_ch.shape == (3, 3) and p.b_c.shape == (3,)


def test_gate_ranges_in_cache():
    rng = np.random.default_rng(5)
    model = build_model(3, 6, 2, seed=2)
    _, cache = forward_batch(model, rng.normal(0, 3, (4, 10, 3)))
    for g in cache.gates:
        assert np.all((g[..., :18] > 0) & (g[..., :18] < 1))
        assert np.all((g[..., 18:] > -1) & (g[..., 18:] < 1))


# --- forward ----------------------------------------------------------------

def test_forward_deterministic_without_dropout():
    model = build_model(2, 5, 2, seed=1)
    win = np.random.default_rng(0).normal(size=(8, 2))
    assert forward_window(model, win)[0] == forward_window(model, win)[0]


def test_forward_dropout_rng_position():
    model = build_model(2, 5, 2, dropout_p=0.1, seed=1)
    win = np.random.default_rng(0).normal(size=(8, 2))
    a = forward_window(model, win, True, np.random.default_rng(3))[0]
    b = forward_window(model, win, True, np.random.default_rng(3))[0]
    assert a == b
    rng = np.random.default_rng(4)
    preds = [forward_window(model, win, True, rng)[0] for _ in range(201)]
    differ = sum(preds[2 * k] != preds[2 * k + 1] for k in range(100))
    assert differ >= 90


def test_all_zero_model_predicts_bias():
    model = zero_model(bias=0.75, layers=2)
    assert forward_window(model, np.ones((5, 2)))[0] == 0.75


def test_divergent_activation_raises():
    model = build_model(1, 2, seed=0)
    model.head_weights[:] = np.nan
    with pytest.raises(TrainingDivergenceError):
        forward_window(model, np.ones((3, 1)))


def test_dropout_expectation_linear_probe():
    # one layer: only the head input is masked, so the output is linear in the mask
    model = build_model(2, 8, 1, dropout_p=0.15, seed=3)
    x = np.random.default_rng(1).normal(size=(1, 6, 2))
    clean = predict(model, x)[0]
    draws = predict(model, np.repeat(x, 10_000, axis=0), True, np.random.default_rng(2))
    se = draws.std() / math.sqrt(draws.size)
    assert abs(draws.mean() - clean) < 3 * se


def test_initialisation_bounds():
    for H in (1, 4, 64):
        m = build_model(5, H, 2, seed=H)
        r = 1 / math.sqrt(H)
        for layer in m.layers:
            assert np.abs(layer.wx).max() <= r and np.abs(layer.wh).max() <= r
            assert np.all(layer.b == 0)
        assert np.abs(m.head_weights).max() <= r and m.head_bias == 0.0


def test_model_validation():
    with pytest.raises(Exception):
        build_model(2, 3, dropout_p=0.5)
    with pytest.raises(ShapeError):
        LstmModel([LstmLayerParams.zeros(2, 3), LstmLayerParams.zeros(4, 3)], np.zeros(3))


# --- backward -----------------------------------------------------------------

def test_zero_model_head_bias_gradient():
    model = zero_model()
    _, cache = forward_window(model, np.ones((4, 2)))
    grads = backward_window(cache, 1.0)
    assert grads[-1][0] == 1.0
    assert all(np.all(g == 0) for g in grads[:-1])


def test_zero_upstream_gradient():
    model = build_model(3, 4, 2, seed=8)
    _, cache = forward_window(model, np.random.default_rng(0).normal(size=(5, 3)))
    assert all(np.all(g == 0) for g in backward_window(cache, 0.0))


def test_gradient_matches_finite_differences_hidden3_w4():
    rng = np.random.default_rng(42)
    model = build_model(2, 3, 1, seed=5)
    X = rng.normal(size=(1, 4, 2))
    assert gradient_check(model, X, np.array([0.3])) < 1e-4


def test_gradient_with_dropout_masks():
    rng = np.random.default_rng(7)
    model = random_tiny_model(rng, dropout=0.1)
    X = rng.normal(size=(3, 5, model.n_features))
    masks = fixed_masks(model, 5, 3, rng)
    assert gradient_check(model, X, rng.normal(size=3), masks=masks) < 1e-4


def test_cache_model_mismatch():
    model = build_model(2, 3, seed=0)
    _, cache = forward_window(model, np.ones((4, 2)))
    cache.model = build_model(2, 4, seed=0)
    with pytest.raises(ShapeError):
        backward_window(cache, 1.0)


# --- optimiser ------------------------------------------------------------

def test_adam_first_step():
    params = [np.array([1.0, -2.0]), np.array([[0.5]])]
    s = AdamState(learning_rate=1e-3)
    adam_update(params, [np.ones(2), np.ones((1, 1))], s)
    # m_hat = 1, v_hat = 1 -> step lr / (1 + eps)
    step = 1e-3 / (1 + 1e-8)
    assert np.allclose(params[0], [1.0 - step, -2.0 - step], rtol=0, atol=1e-15)
    assert s.step == 1


def test_adam_zero_gradient_fixed_point():
    params = [np.array([0.25, 4.0])]
    s = AdamState(learning_rate=0.1)
    for _ in range(50):
        adam_update(params, [np.zeros(2)], s)
    assert np.array_equal(params[0], [0.25, 4.0]) and s.step == 50


def test_adam_shape_error():
    with pytest.raises(ShapeError):
        adam_update([np.zeros(2)], [np.zeros(3)], AdamState())


def test_clip_by_global_norm():
    g = [np.array([3.0]), np.array([4.0])]
    assert clip_by_global_norm(g, 1.0) == 5.0
    assert np.allclose([g[0][0], g[1][0]], [0.6, 0.8])
    g = [np.array([0.3])]
    clip_by_global_norm(g, 5.0)
    assert g[0][0] == 0.3


# --- training -------------------------------------------------------------------

def test_train_reduces_loss_on_sine():
    data = sine_windows()
    model = build_model(1, 16, seed=42)
    rep = train(model, data, data, batch_size=32, epochs=15, adam=AdamState(1e-2))
    assert rep.epochs_run == 15 and len(rep.epoch_train_loss) == len(rep.epoch_val_loss) == 15
    assert rep.epoch_train_loss[-1] < rep.epoch_train_loss[0]


def test_zero_epochs_is_noop():
    data = sine_windows(40)
    model = build_model(1, 4, seed=1)
    before = [p.copy() for p in model.parameters()]
    rep = train(model, data, data, epochs=0)
    assert rep == TrainReport([], [], 0)
    assert all(np.array_equal(a, b) for a, b in zip(before, model.parameters()))


def test_training_is_deterministic():
    data = sine_windows(100)
    reports, params = [], []
    for _ in range(2):
        model = build_model(1, 8, dropout_p=0.1, seed=9)
        reports.append(train(model, data, data, batch_size=32, epochs=3))
        params.append(model.parameters())
    assert reports[0] == reports[1]
    assert all(np.array_equal(a, b) for a, b in zip(*params))


def test_divergence_names_epoch():
    data = sine_windows(40)
    data.targets = data.targets.copy()
    data.targets[5] = np.nan
    with pytest.raises(TrainingDivergenceError, match="epoch 1"):
        train(build_model(1, 4, seed=1), data, epochs=2)


def test_loss_curve_plateaus(small_prepared):
    tr, va, _ = small_prepared.windows(12)
    model = build_model(tr.f, 16, seed=42)
    rep = train(model, tr, va, batch_size=32, epochs=150, adam=AdamState(1e-3))
    val = np.asarray(rep.epoch_val_loss)
    total = val[0] - val.min()
    late = val[-21] - val[-1]
    assert total > 0
    assert late < 0.05 * total


def test_early_stopping_patience():
    data = sine_windows(60)
    rep = train(build_model(1, 4, seed=1), data, data, epochs=100, patience=1, adam=AdamState(1e-2))
    assert rep.epochs_run < 100 or rep.epoch_val_loss[-1] < rep.epoch_val_loss[-2]


# --- persistence ------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    model = build_model(3, 5, 2, dropout_p=0.05, seed=13, norm_id="abc123")
    path = tmp_path / "m.npz"
    save_model(model, path)
    loaded = load_model(path)
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert a.dtype == b.dtype == np.float64 and np.array_equal(a, b)
    assert (loaded.dropout_p, loaded.rng_seed, loaded.norm_id) == (0.05, 13, "abc123")
    X = np.random.default_rng(0).normal(size=(100, 7, 3))
    assert np.array_equal(predict(model, X), predict(loaded, X))


def test_truncated_file_is_corrupt(tmp_path):
    path = tmp_path / "m.npz"
    save_model(build_model(2, 3, seed=0), path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptModelError):
        load_model(path)


def test_unknown_version(tmp_path):
    model = build_model(2, 3, seed=0)
    meta = {"format": "evforecast-model", "version": 99, "n_features": 2, "hidden_sizes": [3],
            "dropout_p": 0.0, "rng_seed": 0, "norm_id": ""}
    arrays = dict(zip(model.parameter_names(), model.parameters()))
    path = tmp_path / "m.npz"
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    with pytest.raises(ModelVersionError):
        load_model(path)


def test_not_a_model_file(tmp_path):
    path = tmp_path / "junk.npz"
    path.write_text("hello")
    with pytest.raises(CorruptModelError):
        load_model(path)
