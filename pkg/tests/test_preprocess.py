import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deltaformer.errors import ConfigurationError, ContractError
from deltaformer.preprocess import (gather_windows, make_patches, revin_denormalize, revin_normalize,
                                    split_ranges, unpatch, window_starts)
from deltaformer.tensor import Tensor


def test_patch_layout_is_variable_then_position():
    x = np.arange(2 * 8, dtype=float).reshape(1, 2, 8)
    grid = make_patches(x, 4)
    assert grid.tokens.shape == (1, 2, 2, 4)
    np.testing.assert_array_equal(grid.tokens.data[0, 1, 0], [8, 9, 10, 11])
    assert grid.n_patches == 2


def test_patch_len_must_divide_lookback():
    with pytest.raises(ConfigurationError):
        make_patches(np.zeros((1, 2, 10)), 4)


@given(st.integers(1, 3), st.integers(1, 4), st.sampled_from([1, 2, 4, 8]))
def test_unpatch_inverts_patching(b, c, p):
    x = np.random.default_rng(b + c + p).normal(size=(b, c, 8))
    np.testing.assert_array_equal(unpatch(make_patches(x, p)).data, x)


def test_revin_matches_formula():
    x = np.array([[[1.0, 2.0, 3.0, 4.0]]])
    xn, stats = revin_normalize(x)
    sigma = np.sqrt(x.var() + 1e-5)
    np.testing.assert_allclose(xn.data, (x - 2.5) / sigma)
    np.testing.assert_allclose(stats.sigma, sigma)


def test_revin_round_trip_with_constant_rows(rng):
    x = rng.normal(size=(1000, 3, 16)) * rng.uniform(0.1, 50, size=(1000, 3, 1))
    x[::7, 1, :] = 4.2
    xn, stats = revin_normalize(x)
    np.testing.assert_allclose(revin_denormalize(xn, stats).data, x, atol=1e-6)
    assert np.all(np.isfinite(xn.data))


@given(arrays(np.float64, (2, 3, 8), elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_revin_round_trip_property(x):
    xn, stats = revin_normalize(x)
    np.testing.assert_allclose(revin_denormalize(xn, stats).data, x, atol=1e-6)


def test_revin_affine_round_trip(rng):
    x = rng.normal(size=(4, 3, 8))
    gamma = Tensor(np.array([1.5, 0.5, 2.0]))
    beta = Tensor(np.array([0.1, -0.2, 0.3]))
    xn, stats = revin_normalize(x, gamma, beta)
    y = (xn.data - beta.data[:, None]) / gamma.data[:, None]
    np.testing.assert_allclose(revin_denormalize(y, stats).data, x, atol=1e-9)


def test_denormalize_without_stats_is_contract_error():
    with pytest.raises(ContractError):
        revin_denormalize(np.zeros((1, 2, 3)), None)


def test_denormalize_shape_mismatch():
    _, stats = revin_normalize(np.ones((2, 3, 4)))
    with pytest.raises(ContractError):
        revin_denormalize(np.zeros((2, 4, 4)), stats)


def test_ett_window_counts():
    # hourly ETT: 12/4/4 months of 720 steps; targets-only windows (horizon 0)
    ranges = split_ranges(14400, (0.6, 0.2, 0.2))
    counts = [len(window_starts(ranges, s, 96, 0)) for s in ("train", "val", "test")]
    assert counts == [8545, 2881, 2881]


def test_split_ranges_floor_train_and_test():
    r = split_ranges(10, (0.7, 0.1, 0.2))
    assert (r.train, r.val, r.test) == ((0, 7), (7, 8), (8, 10))


@given(st.integers(50, 5000), st.sampled_from([(0.7, 0.1, 0.2), (0.6, 0.2, 0.2)]))
def test_splits_partition_the_series(n, ratios):
    r = split_ranges(n, ratios)
    assert r.train[0] == 0 and r.train[1] == r.val[0] and r.val[1] == r.test[0] and r.test[1] == n


def test_windows_without_overlap_stay_inside_split():
    r = split_ranges(1000)
    starts = window_starts(r, "test", 24, 12, overlap_lookback=False)
    assert starts.min() >= r.test[0] and starts.max() + 36 <= r.test[1]


def test_targets_never_leave_split():
    r = split_ranges(1000)
    for split in ("train", "val", "test"):
        starts = window_starts(r, split, 24, 12)
        assert starts.min() + 24 >= r[split][0]
        assert starts.max() + 36 <= r[split][1]


def test_too_short_split_is_configuration_error():
    with pytest.raises(ConfigurationError):
        window_starts(split_ranges(100), "val", 24, 12)


def test_gather_windows_values():
    values = np.arange(20, dtype=float).reshape(2, 10)
    x, y = gather_windows(values, np.array([0, 3]), 4, 2)
    np.testing.assert_array_equal(x[1, 0], [3, 4, 5, 6])
    np.testing.assert_array_equal(y[1, 1], [17, 18])
