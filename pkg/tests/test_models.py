import numpy as np
import pytest

from deltaformer import tensor as T
from deltaformer.baselines import build_model, funnel_variant_forward, variant_arch
from deltaformer.config import ARCHS, ModelConfig
from deltaformer.delta import DeltaFormer
from deltaformer.errors import ConfigurationError, ShapeError
from deltaformer.gradcheck import gradcheck_model
from deltaformer.profiler import analytic_attention_elements

SMALL = dict(n_vars=5, lookback=16, horizon=6, patch_len=4, d_patch=8, layers=2)


def small(arch="delta", **kw):
    return build_model(ModelConfig(arch=arch, **{**SMALL, **kw}))


@pytest.mark.parametrize("arch", ARCHS)
def test_forward_shape(arch, rng):
    out = small(arch).predict(rng.normal(size=(3, 5, 16)))
    assert out.shape == (3, 5, 6)
    assert np.all(np.isfinite(out))


def test_wrong_lookback_is_shape_error(rng):
    with pytest.raises(ShapeError):
        small().predict(rng.normal(size=(1, 5, 12)))


def test_seeded_init_is_deterministic():
    assert small(seed=3).checksum() == small(seed=3).checksum()
    assert small(seed=3).checksum() != small(seed=4).checksum()


def test_delta_parameters_do_not_depend_on_variable_count():
    assert small(n_vars=3).parameter_count() == small(n_vars=300).parameter_count()


def test_delta_runs_on_any_variable_count(rng):
    model = small(n_vars=5)
    assert model.predict(rng.normal(size=(1, 9, 16))).shape == (1, 9, 6)


@pytest.mark.parametrize("mode", ["variable-gate", "all-delegates", "singleton"])
def test_trace_rows_are_distributions(mode, rng):
    model = small(funnel_out_mode=mode)
    model.trace.enabled = True
    model.predict(rng.normal(size=(2, 5, 16)))
    stages = {e.stage for e in model.trace.entries}
    assert stages == {"funnel_in", "delegate", "funnel_out"}
    for entry, rows in model.trace.rows():
        assert np.all(rows >= 0)
        np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-12)
        if entry.stage == "funnel_in":
            assert rows.shape[1] == 5
        if entry.stage == "delegate":
            assert rows.shape[1] == 4


def test_trace_records_are_json_ready(rng):
    model = small()
    model.trace.enabled = True
    model.predict(rng.normal(size=(2, 5, 16)))
    rec = model.trace.to_records()[0]
    assert set(rec) == {"layer", "stage", "position", "weights"}
    assert isinstance(rec["weights"], list)


def test_singleton_funnel_out_is_degenerate(rng):
    layer = small(funnel_out_mode="singleton").layers[0]
    s = layer.stages(T.Tensor(rng.normal(size=(2, 5, 4, 8))))
    pre = s["funnel_out_pre"].data             # (B, N, C, d')
    np.testing.assert_array_equal(pre, np.broadcast_to(pre[:, :, :1], pre.shape))


def test_variable_gate_funnel_out_differs_across_variables(rng):
    layer = small().layers[0]
    pre = layer.stages(T.Tensor(rng.normal(size=(2, 5, 4, 8))))["funnel_out_pre"].data
    assert not np.allclose(pre[:, :, 0], pre[:, :, 1])


@pytest.mark.parametrize("arch", ["delta", "variate_only", "full", "delta_mixed_funnel_in_attn"])
def test_variable_permutation_equivariance(arch, rng):
    model = build_model(ModelConfig(arch=arch, **{**SMALL, "n_vars": 12}))
    x = rng.normal(size=(2, 12, 16))
    base = model.predict(x)
    for _ in range(3):
        perm = rng.permutation(12)
        np.testing.assert_allclose(model.predict(x[:, perm]), base[:, perm], atol=1e-9)


def test_funnel_in_ignores_order_of_variables(rng):
    layer = small().layers[0]
    mt = T.Tensor(rng.normal(size=(1, 4, 5, layer.delegates.shape[1])))
    perm = rng.permutation(5)
    a = layer.funnel_in(mt).data
    b = layer.funnel_in(T.Tensor(mt.data[:, :, perm])).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("arch", ARCHS)
def test_counters_match_closed_form(arch, rng):
    for C, L in [(1, 4), (3, 8), (6, 16)]:
        model = build_model(ModelConfig(arch=arch, n_vars=C, lookback=L, patch_len=4, d_patch=4, horizon=2))
        model.predict(rng.normal(size=(2, C, L)))
        counts = model.trace.elements_per_layer()
        assert set(counts.values()) == {analytic_attention_elements(arch, C, L, 4)}


def test_closed_form_examples():
    assert analytic_attention_elements("delta", 321, 96, 16) == 3888
    assert analytic_attention_elements("full", 2, 8, 4) == 16
    assert analytic_attention_elements("variate_only", 1, 96, 16) == 1
    assert analytic_attention_elements("delta", 4, 8, 2, "all-delegates") == 4 * 4 + 16 + 4 * 16


def test_unknown_arch_rejected():
    with pytest.raises(ConfigurationError):
        build_model(ModelConfig(arch="perceiver"))
    with pytest.raises(ConfigurationError):
        analytic_attention_elements("nope", 2, 8, 4)


def test_funnel_variant_forward(rng):
    cfg = ModelConfig(**SMALL)
    out = funnel_variant_forward(rng.normal(size=(1, 5, 16)), ("linear", "linear"), cfg)
    assert out.shape == (1, 5, 6)
    assert variant_arch("mlp", "attention") == "delta_mixed_funnel_out_attn"
    with pytest.raises(ConfigurationError):
        variant_arch("conv", "mlp")


def test_time_only_rejects_other_variable_counts(rng):
    with pytest.raises(ConfigurationError):
        small("time_only").predict(rng.normal(size=(1, 4, 16)))


def test_delta_is_deltaformer_instance():
    assert isinstance(small(), DeltaFormer)


def test_gradcheck_delta_small():
    assert gradcheck_model("delta", seed=7).passed


def test_state_dict_round_trip(rng):
    a, b = small(seed=1), small(seed=2)
    b.load_state_dict(a.state_dict())
    x = rng.normal(size=(1, 5, 16))
    np.testing.assert_array_equal(a.predict(x), b.predict(x))
    with pytest.raises((KeyError, ValueError)):
        small("full").load_state_dict(a.state_dict())
