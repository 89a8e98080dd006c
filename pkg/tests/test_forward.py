import math

import numpy as np
import pytest
from scipy import stats

from gendenoise import distributions as D
from gendenoise import forward
from gendenoise.core import (
    EPS_FLOOR,
    GammaNoise,
    GaussianNoise,
    PoissonNoise,
    Schedule,
    build_schedule,
    rng_stream,
)
from gendenoise.errors import ConfigurationError

M = 10_000


def test_gaussian_marginal_std_at_t1():
    s = build_schedule(GaussianNoise(25.0), 20)
    x = forward.sample_marginal(s, np.full((M, 1, 1), 100.0), 1, rng_stream(0))
    assert x.std() == pytest.approx(s[1], rel=0.05)


def test_gamma_marginal_moments():
    s = build_schedule(GammaNoise(26.0), 20)
    x = forward.sample_marginal(s, np.full((M, 1, 1), 100.0), 20, rng_stream(1))
    assert x.mean() == pytest.approx(100.0, rel=0.05)
    assert x.std() == pytest.approx(100 / math.sqrt(26), rel=0.05)


def test_poisson_marginal_grid_and_mean():
    s = build_schedule(PoissonNoise(0.2), 20)
    x = forward.sample_marginal(s, np.full((M, 1, 1), 100.0), 20, rng_stream(2))
    k = x * 0.2
    assert np.allclose(k, np.round(k))
    assert x.mean() == pytest.approx(100.0, rel=0.05)


def test_marginal_t_range():
    s = build_schedule(GaussianNoise(25.0), 4)
    with pytest.raises(IndexError):
        forward.sample_marginal(s, np.zeros((2, 2)), 0, rng_stream(0))
    with pytest.raises(IndexError):
        forward.sample_marginal(s, np.zeros((2, 2)), 5, rng_stream(0))


def test_poisson_has_no_upward_step():
    s = build_schedule(PoissonNoise(0.2), 4)
    with pytest.raises(ConfigurationError):
        forward.sample_step(s, np.ones((2, 2)), 0, rng_stream(0))


def test_gamma_first_step_spread():
    s = build_schedule(GammaNoise(26.0), 20)
    assert s[1] == pytest.approx(10400.0)
    x = forward.sample_step(s, np.full((M, 1, 1), 50.0), 0, rng_stream(3))
    assert (x / 50.0).std() == pytest.approx(1 / math.sqrt(10400), rel=0.10)


def test_gaussian_composition_five_steps():
    s = build_schedule(GaussianNoise(25.0), 20)
    rng = rng_stream(4)
    x = np.full((M, 1, 1), 80.0)
    for t in range(5):
        x = forward.sample_step(s, x, t, rng)
    assert D.ks_test(x.ravel(), stats.norm(80.0, s[5]).cdf).passed


@pytest.mark.parametrize("x0", [EPS_FLOOR, 50.0, 255.0])
def test_gamma_composition(x0):
    s = build_schedule(GammaNoise(26.0), 20)
    rng = rng_stream(5)
    x = np.full((M, 1, 1), x0)
    for t in range(10):
        x = forward.sample_step(s, x, t, rng)
    assert D.ks_test(x.ravel(), stats.gamma(s[10], scale=x0 / s[10]).cdf).passed


def test_gaussian_bridge_closed_form():
    s = Schedule(GaussianNoise(7.0), [3.0, 5.0, 7.0])
    bp = forward.bridge_params_gaussian(s, 0.0, 10.0, 1)
    assert float(bp.mu_tilde) == pytest.approx(3.6)
    assert bp.sigma_tilde == pytest.approx(2.4)


def test_gaussian_bridge_endpoint_and_fixed_point():
    s = build_schedule(GaussianNoise(25.0), 10)
    x0 = np.array([[1.0, 2.0]])
    bp = forward.bridge_params_gaussian(s, x0, np.array([[9.0, 9.0]]), 0)
    assert np.array_equal(bp.mu_tilde, x0) and bp.sigma_tilde == 0.0
    for t in range(1, 10):
        assert float(forward.bridge_params_gaussian(s, 4.2, 4.2, t).mu_tilde) == pytest.approx(4.2)
    with pytest.raises(ConfigurationError):
        forward.bridge_params_gaussian(build_schedule(GammaNoise(2.0), 3), 1.0, 1.0, 1)


def test_gaussian_bridge_sample_moments():
    s = build_schedule(GaussianNoise(25.0), 10)
    x = forward.sample_bridge(s, np.full((M, 1, 1), 60.0), np.full((M, 1, 1), 90.0), 4,
                              rng_stream(6))
    bp = forward.bridge_params_gaussian(s, 60.0, 90.0, 4)
    se = bp.sigma_tilde / math.sqrt(M)
    assert abs(x.mean() - float(bp.mu_tilde)) < 4 * se
    assert abs(x.std() - bp.sigma_tilde) < 4 * bp.sigma_tilde / math.sqrt(2 * (M - 1))


def test_gamma_bridge_mean():
    s = Schedule(GammaNoise(3.0), [8.0, 6.0, 3.0])
    x = forward.sample_bridge(s, np.full((M, 1, 1), 1.0), np.full((M, 1, 1), 2.0), 1,
                              rng_stream(7))
    se = math.sqrt(2.0) / 8.0 / math.sqrt(M)
    assert abs(x.mean() - 1.75) < 4 * se


def test_poisson_bridge_mean():
    s = Schedule(PoissonNoise(1.0), [3.0, 2.0, 1.0])
    x = forward.sample_bridge(s, np.full((M, 1, 1), 2.0), np.zeros((M, 1, 1)), 1, rng_stream(8))
    assert x.mean() == pytest.approx(2.0 / 3.0, rel=0.05)


def test_bridge_at_zero_returns_clean_image():
    s = build_schedule(PoissonNoise(0.2), 5)
    x0 = np.array([[3.0, 4.0]])
    out = forward.sample_bridge(s, x0, np.array([[5.0, 10.0]]), 0, rng_stream(0))
    assert np.array_equal(out, x0)


def test_poisson_counts_rejects_off_grid():
    assert forward.poisson_counts(np.array([2.5, 5.0]), 0.4).tolist() == [1.0, 2.0]
    with pytest.raises(ConfigurationError):
        forward.poisson_counts(np.array([1.3]), 0.4)


@pytest.mark.parametrize("x0", [1.0, 50.0, 255.0])
def test_poisson_tower(x0):
    s = build_schedule(PoissonNoise(0.2), 20)
    rng = rng_stream(9, int(x0))
    x = forward.sample_marginal(s, np.full((M, 1, 1), x0), 20, rng)
    for t in range(19, 4, -1):
        x = forward.sample_bridge(s, x0, x, t, rng)
    assert D.poisson_count_test(forward.poisson_counts(x, s[5]), s[5] * x0).passed


def test_gamma_bridge_residual():
    s = build_schedule(GammaNoise(26.0), 20)
    rng = rng_stream(10)
    x0 = 120.0
    x = np.full((M, 1, 1), x0)
    for t in range(7):
        x = forward.sample_step(s, x, t, rng)
    nxt = forward.sample_step(s, x, 7, rng)
    resid = (s[7] * x - s[8] * nxt) / x0
    assert D.ks_test(resid.ravel(), stats.gamma(s[7] - s[8]).cdf).passed


@pytest.mark.parametrize("fam", [GaussianNoise(25.0), GammaNoise(26.0), PoissonNoise(0.2)])
def test_chain_shape_and_nonnegativity(fam):
    s = build_schedule(fam, 6)
    chain = forward.sample_chain(s, np.full((50, 2, 2), 3.0), rng_stream(11))
    assert len(chain) == 7
    assert np.array_equal(chain[0], np.full((50, 2, 2), 3.0))
    if not isinstance(fam, GaussianNoise):
        assert all(np.all(c >= 0) for c in chain)
