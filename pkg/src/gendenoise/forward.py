"""Noise-model-specific diffusion processes.

For each family this module provides the marginal corruption q(x_t | x_0),
the forward Markov step (Gaussian and Gamma only) and the closed-form bridge
q(x_t | x_0, x_{t+1}).  Poisson's chain is defined top-down through the bridge,
so it has no upward step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import distributions as D
from .core import GammaNoise, GaussianNoise, PoissonNoise, Schedule
from .errors import ConfigurationError

# tolerance when recovering integer Poisson counts from lambda_t * x_t
COUNT_TOL = 1e-6


def poisson_counts(x, lam: float) -> np.ndarray:
    """Recover the integer counts ``lam * x`` of a Poisson-grid image."""
    scaled = np.asarray(x, dtype=float) * lam
    counts = np.rint(scaled)
    bad = np.abs(scaled - counts) > COUNT_TOL * np.maximum(1.0, np.abs(scaled))
    if np.any(bad) or np.any(counts < 0):
        raise ConfigurationError(
            f"image is not on the Poisson grid k/{lam:g} (max deviation "
            f"{np.max(np.abs(scaled - counts)):.3g})"
        )
    return counts


def _check_t(s: Schedule, t: int, lo: int, hi: int):
    if not lo <= t <= hi:
        raise IndexError(f"t must be in {lo}..{hi} for N={s.N}, got {t}")


def sample_marginal(s: Schedule, x0, t: int, rng: np.random.Generator):
    """Independent per-pixel draw of x_t given x_0, ``1 <= t <= N``."""
    _check_t(s, t, 1, s.N)
    x0 = np.asarray(x0, dtype=float)
    p = s[t]
    if isinstance(s.family, GaussianNoise):
        return x0 + D.sample_gaussian(0.0, p, rng, size=x0.shape)
    if isinstance(s.family, GammaNoise):
        return D.sample_gamma(p, rng, size=x0.shape) / p * x0
    if isinstance(s.family, PoissonNoise):
        return D.sample_poisson(p * x0, rng) / p
    raise ConfigurationError(f"unsupported family {s.family!r}")


def sample_step(s: Schedule, x_t, t: int, rng: np.random.Generator):
    """One upward Markov step x_t -> x_{t+1}, ``0 <= t <= N-1``.

    Gaussian adds independent noise of variance sigma_{t+1}^2 - sigma_t^2.
    Gamma multiplies by a Gamma draw at t = 0 and thins by a Beta draw after.
    """
    _check_t(s, t, 0, s.N - 1)
    x_t = np.asarray(x_t, dtype=float)
    if isinstance(s.family, GaussianNoise):
        inc = np.sqrt(s[t + 1] ** 2 - s.param(t) ** 2)
        return x_t + D.sample_gaussian(0.0, inc, rng, size=x_t.shape)
    if isinstance(s.family, GammaNoise):
        a_next = s[t + 1]
        if t == 0:
            return D.sample_gamma(a_next, rng, size=x_t.shape) / a_next * x_t
        a_t = s[t]
        zeta = D.sample_beta(a_next, a_t - a_next, rng, size=x_t.shape)
        return a_t / a_next * zeta * x_t
    if isinstance(s.family, PoissonNoise):
        raise ConfigurationError(
            "the Poisson process is defined downward; use sample_marginal(t=N) "
            "followed by sample_bridge"
        )
    raise ConfigurationError(f"unsupported family {s.family!r}")


@dataclass(frozen=True)
class GaussianBridgeParams:
    mu_tilde: np.ndarray
    sigma_tilde: float


def bridge_coefficients(s: Schedule, t: int) -> tuple[float, float, float]:
    """Gaussian bridge weights ``(w_next, w_clean, sigma_tilde)`` for step t."""
    if not isinstance(s.family, GaussianNoise):
        raise ConfigurationError("Gaussian bridge requested for a non-Gaussian schedule")
    _check_t(s, t, 0, s.N - 1)
    var_t = s.param(t) ** 2
    var_next = s[t + 1] ** 2
    w_next = var_t / var_next
    w_clean = (var_next - var_t) / var_next
    sigma_tilde = float(np.sqrt(var_t) / np.sqrt(var_next) * np.sqrt(var_next - var_t))
    return w_next, w_clean, sigma_tilde


def bridge_params_gaussian(s: Schedule, x0, x_next, t: int) -> GaussianBridgeParams:
    w_next, w_clean, sigma_tilde = bridge_coefficients(s, t)
    mu = w_next * np.asarray(x_next, dtype=float) + w_clean * np.asarray(x0, dtype=float)
    return GaussianBridgeParams(mu, sigma_tilde)


def sample_bridge(s: Schedule, x0, x_next, t: int, rng: np.random.Generator):
    """Draw x_t from q(x_t | x_0, x_{t+1}); at ``t = 0`` this is x_0 itself."""
    _check_t(s, t, 0, s.N - 1)
    x0 = np.asarray(x0, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    shape = np.broadcast_shapes(x0.shape, x_next.shape)
    if t == 0:
        return np.broadcast_to(x0, shape).copy()
    if isinstance(s.family, GaussianNoise):
        bp = bridge_params_gaussian(s, x0, x_next, t)
        return bp.mu_tilde + D.sample_gaussian(0.0, bp.sigma_tilde, rng, size=shape)
    if isinstance(s.family, GammaNoise):
        a_t, a_next = s[t], s[t + 1]
        tau = D.sample_gamma(a_t - a_next, rng, size=shape)
        return (x0 * tau + a_next * x_next) / a_t
    if isinstance(s.family, PoissonNoise):
        l_t, l_next = s[t], s[t + 1]
        kept = poisson_counts(x_next, l_next)
        added = D.sample_poisson(np.broadcast_to((l_t - l_next) * x0, shape), rng)
        return (kept + added) / l_t
    raise ConfigurationError(f"unsupported family {s.family!r}")


def sample_chain(s: Schedule, x0, rng: np.random.Generator) -> list[np.ndarray]:
    """Full forward trajectory ``[x_0, x_1, ..., x_N]`` given x_0.

    Gaussian/Gamma chain upward with :func:`sample_step`; Poisson draws x_N
    from its marginal and fills in the rest with bridges.
    """
    x0 = np.asarray(x0, dtype=float)
    if isinstance(s.family, PoissonNoise):
        states = [sample_marginal(s, x0, s.N, rng)]
        for t in range(s.N - 1, 0, -1):
            states.append(sample_bridge(s, x0, states[-1], t, rng))
        states.append(x0.copy())
        return states[::-1]
    states = [x0.copy()]
    for t in range(s.N):
        states.append(sample_step(s, states[-1], t, rng))
    return states
