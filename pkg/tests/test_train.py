import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deltaformer.baselines import build_model
from deltaformer.config import ModelConfig, TrainConfig, build_configs, config_hash, parse_config_text
from deltaformer.data import TimeSeriesDataset
from deltaformer.errors import ConfigurationError, ContractError, NumericError
from deltaformer.tensor import Tensor
from deltaformer.train import (AdamState, adam_step, compute_metrics, evaluate, load_checkpoint, prepare,
                               save_checkpoint, train)

CFG = dict(n_vars=2, lookback=16, horizon=4, patch_len=4, d_patch=8, layers=1)


def trend_dataset(n=400):
    t = np.arange(n, dtype=float)
    return TimeSeriesDataset("trend", np.stack([0.01 * t, -0.02 * t + 3.0]), ["a", "b"])


def sine_dataset(n=400, c=2):
    t = np.arange(n, dtype=float)
    return TimeSeriesDataset("sine", np.stack([np.sin(2 * np.pi * t / 16 + i) for i in range(c)]),
                             [f"v{i}" for i in range(c)])


# -- Adam ------------------------------------------------------------------------------

def test_adam_first_step_is_lr():
    p = {"w": Tensor(np.array([0.0]))}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=1e-3)
    np.testing.assert_allclose(p["w"].data, [-0.001 / (1 + 1e-8)], rtol=1e-12)
    assert abs(p["w"].data[0] + 0.000999999) < 1e-9


def test_adam_zero_gradient_leaves_params_and_decays_moments():
    p = {"w": Tensor(np.array([2.0]))}
    state = AdamState()
    adam_step(p, {"w": np.array([1.0])}, state, lr=0.0)
    m1 = state.m["w"].copy()
    adam_step(p, {"w": np.array([0.0])}, state, lr=0.1)
    np.testing.assert_allclose(state.m["w"], 0.9 * m1)
    before = p["w"].data.copy()
    state2 = AdamState()
    adam_step(p, {"w": np.array([0.0])}, state2, lr=0.1)
    np.testing.assert_array_equal(p["w"].data, before)


def test_adam_matches_reference_two_steps():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    grads = [np.array([0.5, -2.0]), np.array([1.0, 0.25])]
    theta = np.array([1.0, -1.0])
    m = v = np.zeros(2)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    p = {"w": Tensor(np.array([1.0, -1.0]))}
    state = AdamState()
    for g in grads:
        adam_step(p, {"w": g}, state, lr=lr)
    np.testing.assert_allclose(p["w"].data, theta, rtol=1e-14)


def test_adam_non_finite_gradient_names_parameter():
    p = {"layer.weight": Tensor(np.zeros(2))}
    with pytest.raises(NumericError, match="layer.weight"):
        adam_step(p, {"layer.weight": np.array([1.0, np.inf])}, AdamState(), lr=1e-3)


# -- metrics ----------------------------------------------------------------------------

def test_metric_examples():
    assert compute_metrics(np.zeros(2), np.array([1.0, 3.0])) == {"mse": 5.0, "mae": 2.0}
    x = np.arange(6.0).reshape(1, 2, 3)
    assert compute_metrics(x + 2, x) == {"mse": 4.0, "mae": 2.0}
    assert compute_metrics(x, x) == {"mse": 0.0, "mae": 0.0}


def test_metric_shape_mismatch():
    with pytest.raises(ContractError):
        compute_metrics(np.zeros(3), np.zeros(2))


@given(arrays(np.float64, 6, elements=st.floats(-100, 100)), arrays(np.float64, 6, elements=st.floats(-100, 100)))
def test_mae_bounded_by_root_mse(a, b):
    m = compute_metrics(a, b)
    assert m["mse"] >= 0 and m["mae"] >= 0
    assert m["mae"] <= np.sqrt(m["mse"]) + 1e-9


# -- training ----------------------------------------------------------------------------

def test_lr_zero_leaves_parameters_unchanged():
    model = build_model(ModelConfig(**CFG))
    before = model.checksum()
    metrics_before = evaluate(model, trend_dataset())
    train(model, trend_dataset(), TrainConfig(learning_rate=0.0, epochs=2, batch_size=32))
    assert model.checksum() == before
    assert evaluate(model, trend_dataset()) == metrics_before


def test_training_reduces_loss_on_linear_trend():
    model = build_model(ModelConfig(**{**CFG, "d_patch": 4}))
    result = train(model, trend_dataset(200), TrainConfig(epochs=50, batch_size=32, learning_rate=1e-3))
    first, last = result.history[0]["train_loss"], result.history[-1]["train_loss"]
    assert last <= 0.5 * first


def test_training_is_bitwise_reproducible():
    sums = []
    for _ in range(2):
        model = build_model(ModelConfig(**CFG))
        train(model, sine_dataset(), TrainConfig(epochs=2, batch_size=16))
        sums.append(model.checksum())
    assert sums[0] == sums[1]


def test_best_validation_checkpoint_kept():
    model = build_model(ModelConfig(**CFG))
    result = train(model, sine_dataset(), TrainConfig(epochs=3, batch_size=16))
    best = min(h["val_mse"] for h in result.history)
    assert result.best_val_mse == best
    data = prepare(sine_dataset(), 16, 4)
    from deltaformer.train import predict_split
    pred, truth, _ = predict_split(model, data, "val")
    assert compute_metrics(pred, truth)["mse"] == pytest.approx(best, rel=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_location():
    values = sine_dataset().values * 1e200
    ds = TimeSeriesDataset("huge", values, ["a", "b"])
    model = build_model(ModelConfig(**{**CFG, "revin": False}))
    with pytest.raises(NumericError, match="epoch 1"):
        train(model, ds, TrainConfig(epochs=1, global_zscore=False))


def test_naive_baselines_on_constant_series():
    ds = TimeSeriesDataset("flat", np.full((2, 300), 5.0), ["a", "b"])
    rows = evaluate(build_model(ModelConfig(**CFG)), ds)
    assert rows[0]["last_mse"] == 0.0


def test_average_row_is_mean_of_horizons():
    ds = sine_dataset()
    models = {h: build_model(ModelConfig(**{**CFG, "horizon": h})) for h in (2, 4)}
    rows = evaluate(models, ds)
    assert rows[-1]["horizon"] == "avg"
    assert rows[-1]["mse"] == pytest.approx((rows[0]["mse"] + rows[1]["mse"]) / 2)


def test_checkpoint_round_trip(tmp_path, rng):
    model = build_model(ModelConfig(**CFG, seed=5))
    manifest = save_checkpoint(tmp_path / "m.npz", model)
    back, man = load_checkpoint(tmp_path / "m.npz")
    assert man["config_hash"] == manifest["config_hash"] and man["seed"] == 5
    x = rng.normal(size=(2, 2, 16))
    np.testing.assert_array_equal(back.predict(x), model.predict(x))


# -- configuration ---------------------------------------------------------------------

def test_config_grammar():
    values = parse_config_text("# header\n epochs = 3  # trailing\n\narch=full\n")
    mc, tc = build_configs(values, env={})
    assert tc.epochs == 3 and mc.arch == "full"


def test_unknown_config_key_rejected():
    with pytest.raises(ConfigurationError, match="epoch"):
        build_configs({"epoch": "3"}, env={})


def test_env_seed_overrides():
    mc, tc = build_configs({"seed": "1"}, env={"DELTA_SEED": "9"})
    assert mc.seed == tc.seed == 9


def test_invalid_config_lists_fields():
    with pytest.raises(ConfigurationError, match="patch_len"):
        ModelConfig(lookback=10, patch_len=3).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0).validate()


def test_config_hash_stable():
    assert config_hash(ModelConfig()) == config_hash(ModelConfig())
    assert config_hash(ModelConfig()) != config_hash(ModelConfig(seed=1))
