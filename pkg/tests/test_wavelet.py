import numpy as np
import pytest

from wavemom.errors import DataError
from wavemom.wavelet import MIN_COARSE_COUNT, build_filter, decompose, max_level


def test_filter_taps_level1():
    f = build_filter(1)
    np.testing.assert_allclose(f.h, [0.5, -0.5], rtol=0, atol=0)
    np.testing.assert_allclose(f.c, [0.5], rtol=0, atol=0)
    assert f.length == 2 and f.scale == 2


def test_filter_taps_level2():
    f = build_filter(2)
    np.testing.assert_allclose(f.h, [0.25, 0.25, -0.25, -0.25], rtol=0, atol=0)
    np.testing.assert_allclose(f.c, [0.25, 0.5, 0.25], rtol=0, atol=0)


@pytest.mark.parametrize("j", range(1, 13))
def test_filter_invariants(j):
    f = build_filter(j)
    assert f.h.shape == (2**j,)
    assert f.c.shape == (2**j - 1,)
    # Taps sum to zero, so constants are annihilated.
    assert abs(f.h.sum()) < 1e-15
    # Running sums form a symmetric triangle peaking at 1/2.
    np.testing.assert_allclose(f.c, f.c[::-1], rtol=0, atol=1e-15)
    assert abs(f.c.max() - 0.5) < 1e-15
    # Their total is 2**(j-2): the constant picked out of a unit ramp,
    # up to the 1/tau normalization.
    assert abs(f.c.sum() - 2.0 ** (j - 2)) < 1e-12 * 2.0 ** (j - 2)


def test_filter_level_out_of_range():
    with pytest.raises(ValueError):
        build_filter(0)
    with pytest.raises(ValueError):
        build_filter(31)


def test_decompose_ramp_level1():
    out = decompose(np.array([1.0, 2.0, 3.0, 4.0]), 1)
    np.testing.assert_allclose(out.values, [0.5, 0.5, 0.5], rtol=0, atol=0)
    assert out.count == 3


def test_decompose_alternating_level1():
    out = decompose(np.array([1.0, -1.0, 1.0, -1.0]), 1)
    np.testing.assert_allclose(out.values, [-1.0, 1.0, -1.0], rtol=0, atol=0)


def test_decompose_constant_is_zero():
    out = decompose(np.full(64, 7.25), 3)
    np.testing.assert_allclose(out.values, 0.0, rtol=0, atol=1e-12)


@pytest.mark.parametrize("j", [1, 2, 3, 5, 8])
def test_decompose_matches_direct_convolution(j):
    rng = np.random.default_rng(42 + j)
    x = rng.standard_normal(1000)
    f = build_filter(j)
    direct = np.convolve(x, f.h, mode="valid")
    out = decompose(x, j)
    assert out.count == x.size - 2**j + 1
    np.testing.assert_allclose(out.values, direct, rtol=0, atol=1e-12)


@pytest.mark.parametrize("j", [1, 2, 4, 6])
def test_difference_representation(j):
    # Applying the taps to x equals applying their running sums to diff(x).
    rng = np.random.default_rng(7 * j)
    x = np.cumsum(rng.standard_normal(512))  # rough path, exercises both forms
    f = build_filter(j)
    via_h = decompose(x, j).values
    via_c = np.convolve(np.diff(x), f.c, mode="valid")
    np.testing.assert_allclose(via_h, via_c, rtol=0, atol=1e-10)


def test_decompose_linearity():
    rng = np.random.default_rng(11)
    x = rng.standard_normal(256)
    y = rng.standard_normal(256)
    lhs = decompose(2.0 * x - 3.0 * y, 4).values
    rhs = 2.0 * decompose(x, 4).values - 3.0 * decompose(y, 4).values
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_white_noise_variance_law():
    # Level-j variance of N(0, s2) white noise is s2 / 2**j.
    rng = np.random.default_rng(2024)
    s2 = 2.5
    T = 200_000
    x = rng.normal(0.0, np.sqrt(s2), size=T)
    for j in [1, 2, 3, 4, 5]:
        w = decompose(x, j).values
        est = np.mean(w**2)
        target = s2 / 2**j
        # 3 standard errors of the mean of w^2 (approximate, chi-square tails).
        se = np.std(w**2) / np.sqrt(w.size)
        assert abs(est - target) <= 3.2 * se, (j, est, target)


def test_decompose_errors():
    with pytest.raises(DataError):
        decompose(np.ones((4, 4)), 1)
    with pytest.raises(DataError):
        decompose(np.ones(7), 3)  # needs 8 samples
    with pytest.raises(ValueError):
        decompose(np.ones(16), 0)


def test_max_level_reference_values():
    assert max_level(100_000) == 15
    assert max_level(16) == 2
    assert max_level(4) == 1


def test_max_level_backoff_rule():
    # T = 20: nominal depth 3 gives 13 coefficients, depth 2 gives 17.
    assert max_level(20) == 2
    # Exact powers of two must not be rounded down by the float log.
    for p in range(5, 21):
        T = 2**p
        j = max_level(T)
        assert T - 2**j + 1 >= MIN_COARSE_COUNT or j == p - 2
        assert j <= p - 1


def test_max_level_monotone_and_valid():
    prev = 1
    for T in range(4, 3000, 7):
        j = max_level(T)
        assert 1 <= j
        assert 2**j <= T  # at least one coefficient exists
        assert j >= prev - 1  # never collapses suddenly
        prev = j


def test_max_level_too_short():
    with pytest.raises(ValueError):
        max_level(3)
