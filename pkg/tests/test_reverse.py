import numpy as np
import pytest
from scipy import stats

from gendenoise import distributions as D
from gendenoise import forward
from gendenoise.core import GammaNoise, GaussianNoise, PoissonNoise, build_schedule, rng_stream
from gendenoise.denoise import FinitePrior, OracleDenoiser
from gendenoise.errors import ContractError, ParameterError
from gendenoise.pgm import load_pgm
from gendenoise.reverse import (
    final_step,
    posterior_mean_estimate,
    reverse_step,
    sample_many,
    sample_reverse,
)

M = 10_000


class Recorder:
    """Wraps a denoiser and logs every call."""

    def __init__(self, inner):
        self.inner = inner
        self.needs_terminal = inner.needs_terminal
        self.calls = []

    def predict(self, x_next, x_N, t_next):
        self.calls.append((t_next, x_N))
        return self.inner.predict(x_next, x_N, t_next)


class Constant:
    needs_terminal = False

    def __init__(self, value):
        self.value = value

    def predict(self, x_next, x_N, t_next):
        return np.full_like(np.asarray(x_next, dtype=float), self.value)


def single_atom(fam, value=100.0, N=10):
    s = build_schedule(fam, N)
    atom = np.full((1, 1), value)
    return s, atom, OracleDenoiser(FinitePrior.uniform(atom[None]), s)


@pytest.mark.parametrize("fam", [GaussianNoise(25.0), GammaNoise(26.0), PoissonNoise(0.2)])
def test_perfect_denoiser_step_equals_bridge(fam):
    s, atom, den = single_atom(fam)
    rng = rng_stream(1)
    x_N = forward.sample_marginal(s, np.broadcast_to(atom, (M, 1, 1)), s.N, rng)
    x_next = forward.sample_marginal(s, np.broadcast_to(atom, (M, 1, 1)), 6, rng)
    if fam.name == "poisson":
        x_next = forward.sample_bridge(s, atom, x_N, 9, rng)
        for t in range(8, 5, -1):
            x_next = forward.sample_bridge(s, atom, x_next, t, rng)
    learned = reverse_step(s, x_next, x_N, 5, den, rng_stream(2))
    exact = forward.sample_bridge(s, atom, x_next, 5, rng_stream(2))
    np.testing.assert_allclose(learned, exact, rtol=1e-12)


def test_gaussian_step_limit_and_gamma_mean():
    s = build_schedule(GaussianNoise(25.0), 1000)
    x = np.full((M, 1, 1), 80.0)
    out = reverse_step(s, x, None, 999, Constant(80.0), rng_stream(3))
    assert abs(out.mean() - 80.0) < 4 * out.std() / np.sqrt(M)

    s = build_schedule(GammaNoise(26.0), 10)
    out = reverse_step(s, np.full((M, 1, 1), 90.0), None, 4, Constant(120.0), rng_stream(4))
    want = (120.0 * (s[4] - s[5]) + s[5] * 90.0) / s[4]
    se = 120.0 * np.sqrt(s[4] - s[5]) / s[4] / np.sqrt(M)
    assert abs(out.mean() - want) < 4 * se


def test_poisson_requires_terminal():
    s, atom, den = single_atom(PoissonNoise(0.2))
    x = forward.sample_marginal(s, atom, s.N, rng_stream(5))
    with pytest.raises(ContractError):
        reverse_step(s, x, None, 3, den, rng_stream(5))
    with pytest.raises(ContractError):
        final_step(s, x, None, den)


def test_step_range():
    s, atom, den = single_atom(GaussianNoise(25.0))
    for t in (0, s.N):
        with pytest.raises(IndexError):
            reverse_step(s, atom, None, t, den, rng_stream(0))


@pytest.mark.parametrize("fam", [GaussianNoise(25.0), GammaNoise(26.0)])
def test_gaussian_and_gamma_never_pass_terminal(fam):
    s, atom, den = single_atom(fam)
    rec = Recorder(den)
    sample_reverse(s, forward.sample_marginal(s, atom, s.N, rng_stream(6)), rec, rng_stream(7))
    assert [t for t, _ in rec.calls] == list(range(s.N, 0, -1))
    assert all(x_N is None for _, x_N in rec.calls)


def test_poisson_passes_terminal_every_step():
    s, atom, den = single_atom(PoissonNoise(0.2))
    rec = Recorder(den)
    x_N = forward.sample_marginal(s, atom, s.N, rng_stream(8))
    sample_reverse(s, x_N, rec, rng_stream(9))
    assert all(x is x_N or np.array_equal(x, x_N) for _, x in rec.calls)


def test_two_step_chain_calls():
    s, atom, den = single_atom(GaussianNoise(25.0), N=2)
    rec = Recorder(den)
    sample_reverse(s, atom, rec, rng_stream(0))
    assert [t for t, _ in rec.calls] == [2, 1]


def test_final_step_deterministic_and_exact():
    s, atom, den = single_atom(GammaNoise(26.0))
    x1 = forward.sample_marginal(s, atom, 1, rng_stream(10))
    assert np.array_equal(final_step(s, x1, None, den), atom)
    assert np.array_equal(final_step(s, x1, None, den), final_step(s, x1, None, den))


@pytest.mark.parametrize("fam", [GaussianNoise(25.0), GammaNoise(26.0), PoissonNoise(0.2)])
def test_full_chain_marginals_match_forward(fam):
    s, atom, den = single_atom(fam)
    x_N = forward.sample_marginal(s, np.broadcast_to(atom, (M, 1, 1)), s.N, rng_stream(11))
    _, traj = sample_reverse(s, x_N, den, rng_stream(12), keep_trajectory=True)
    states = dict(traj.states)
    assert list(states) == list(range(s.N, -1, -1))
    for t in (2, 7):
        x = states[t].ravel()
        if fam.name == "poisson":
            rep = D.poisson_count_test(forward.poisson_counts(x, s[t]), s[t] * 100.0)
        elif fam.name == "gamma":
            rep = D.ks_test(x, stats.gamma(s[t], scale=100.0 / s[t]).cdf)
        else:
            rep = D.ks_test(x, stats.norm(100.0, s[t]).cdf)
        assert rep.passed, (t, rep)


def test_monotone_fidelity():
    s, atom, den = single_atom(GammaNoise(26.0))
    x_N = forward.sample_marginal(s, np.broadcast_to(atom, (M, 1, 1)), s.N, rng_stream(13))
    _, traj = sample_reverse(s, x_N, den, rng_stream(14), keep_trajectory=True)
    mse = [float(np.mean((x - atom) ** 2)) for _, x in traj.states]
    assert all(b <= a for a, b in zip(mse, mse[1:]))


def test_seed_determinism():
    s = build_schedule(PoissonNoise(0.2), 10)
    prior = FinitePrior.uniform(rng_stream(15).uniform(20, 200, size=(3, 4, 4)))
    den = OracleDenoiser(prior, s)
    x_N = forward.sample_marginal(s, prior.atoms[0], s.N, rng_stream(16))
    a = sample_many(s, x_N, den, 20, rng_stream(17))
    b = sample_many(s, x_N, den, 20, rng_stream(17))
    assert a.tobytes() == b.tobytes() and a.shape == (20, 4, 4)


def test_posterior_mean_estimate():
    s = build_schedule(GaussianNoise(25.0), 10)
    prior = FinitePrior.uniform(rng_stream(18).uniform(20, 200, size=(3, 4, 4)))
    den = OracleDenoiser(prior, s)
    x_N = forward.sample_marginal(s, prior.atoms[1], s.N, rng_stream(19))
    one = posterior_mean_estimate(s, x_N, den, 1, rng_stream(20))
    ref, _ = sample_reverse(s, x_N[None], den, rng_stream(20))
    np.testing.assert_array_equal(one, ref[0])
    with pytest.raises(ParameterError):
        posterior_mean_estimate(s, x_N, den, 0, rng_stream(20))
    s1, atom, den1 = single_atom(GaussianNoise(25.0))
    assert np.array_equal(posterior_mean_estimate(s1, atom + 30, den1, 7, rng_stream(0)),
                          np.broadcast_to(atom, atom.shape))


def test_trajectory_export(tmp_path):
    s, atom, den = single_atom(GaussianNoise(25.0), N=6)
    img = np.full((3, 3), 100.0)
    den = OracleDenoiser(FinitePrior.uniform(img[None]), s)
    _, traj = sample_reverse(s, img + 20, den, rng_stream(21), keep_trajectory=True, seed=21)
    files = traj.export(tmp_path)
    assert sorted(p.rsplit("/", 1)[-1] for p in files) == [f"t_{t}.pgm" for t in range(6)]
    assert np.array_equal(load_pgm(tmp_path / "t_0.pgm"), img)
    meta = (tmp_path / "metadata.txt").read_text()
    assert f"schedule_fingerprint={s.fingerprint()}" in meta and "seed=21" in meta
