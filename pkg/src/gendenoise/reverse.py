"""Reverse (denoising) samplers.

Each learned step is the forward bridge q(x_t | x_0, x_{t+1}) with x_0 replaced
by the denoiser's estimate.  The last step returns the estimate itself.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import distributions as D
from . import forward
from .core import GammaNoise, GaussianNoise, PoissonNoise, Schedule
from .denoise import Denoiser, clamp_output
from .errors import ConfigurationError, ContractError, ParameterError
from .pgm import save_pgm


@dataclass
class Trajectory:
    """States ``(t, x_t)`` from t = N down to t = 0 for one reverse run."""

    states: list[tuple[int, np.ndarray]] = field(default_factory=list)
    schedule_fingerprint: str = ""
    seed: Optional[int] = None

    def export(self, directory, *, include_start: bool = False) -> list[str]:
        """Write ``t_<index>.pgm`` frames plus ``metadata.txt``.

        The starting image x_N is the caller's input and is skipped unless
        ``include_start`` is set, so a full run writes N frames.
        """
        os.makedirs(directory, exist_ok=True)
        n_top = self.states[0][0] if self.states else 0
        written = []
        for t, img in self.states:
            if t == n_top and not include_start:
                continue
            if img.ndim != 2:
                raise ConfigurationError("only single-image trajectories can be exported")
            path = os.path.join(directory, f"t_{t}.pgm")
            save_pgm(img, path)
            written.append(path)
        with open(os.path.join(directory, "metadata.txt"), "w") as fh:
            fh.write(f"schedule_fingerprint={self.schedule_fingerprint}\n")
            fh.write(f"seed={self.seed}\n")
            fh.write(f"frames={len(written)}\n")
        return written


def _terminal_for(den: Denoiser, x_N):
    if den.needs_terminal:
        if x_N is None:
            raise ContractError("this denoiser conditions on x_N, which was not given")
        return x_N
    # Gaussian/Gamma steps never look at x_N
    return None


def reverse_step(s: Schedule, x_next, x_N, t: int, den: Denoiser, rng: np.random.Generator):
    """Sample x_t given x_{t+1} (and x_N), ``1 <= t <= N-1``."""
    if not 1 <= t <= s.N - 1:
        raise IndexError(f"reverse_step needs t in 1..{s.N - 1}, got {t}")
    x_next = np.asarray(x_next, dtype=float)
    f_hat = np.asarray(den.predict(x_next, _terminal_for(den, x_N), t + 1), dtype=float)
    if isinstance(s.family, GaussianNoise):
        w_next, w_clean, sigma_tilde = forward.bridge_coefficients(s, t)
        mu = w_next * x_next + w_clean * f_hat
        return mu + D.sample_gaussian(0.0, sigma_tilde, rng, size=mu.shape)
    f_hat = clamp_output(f_hat, s.family)
    if isinstance(s.family, GammaNoise):
        a_t, a_next = s[t], s[t + 1]
        tau = D.sample_gamma(a_t - a_next, rng, size=f_hat.shape)
        return (f_hat * tau + a_next * x_next) / a_t
    if isinstance(s.family, PoissonNoise):
        l_t, l_next = s[t], s[t + 1]
        kept = forward.poisson_counts(x_next, l_next)
        added = D.sample_poisson((l_t - l_next) * f_hat, rng)
        return (kept + added) / l_t
    raise ConfigurationError(f"unsupported family {s.family!r}")


def final_step(s: Schedule, x_1, x_N, den: Denoiser):
    """Deterministic last step: the denoiser's estimate of x_0 from x_1."""
    return np.asarray(den.predict(np.asarray(x_1, dtype=float), _terminal_for(den, x_N), 1),
                      dtype=float)


def sample_reverse(s: Schedule, x_N, den: Denoiser, rng: np.random.Generator,
                   keep_trajectory: bool = False, seed: Optional[int] = None):
    """Run the reverse chain from x_N; returns ``(x_0, trajectory or None)``.

    ``x_N`` may carry leading batch axes to run independent chains together.
    """
    x_N = np.asarray(x_N, dtype=float)
    traj = Trajectory(schedule_fingerprint=s.fingerprint(), seed=seed) if keep_trajectory else None
    x = x_N
    if traj is not None:
        traj.states.append((s.N, x_N.copy()))
    for t in range(s.N - 1, 0, -1):
        x = reverse_step(s, x, x_N, t, den, rng)
        if traj is not None:
            traj.states.append((t, x.copy()))
    x0 = final_step(s, x, x_N, den)
    if traj is not None:
        traj.states.append((0, x0.copy()))
    return x0, traj


def sample_many(s: Schedule, x_N, den: Denoiser, n_samples: int, rng: np.random.Generator):
    """``n_samples`` independent reverse draws for one x_N, shape ``(n, H, W)``."""
    if n_samples < 1:
        raise ParameterError(f"n_samples must be >= 1, got {n_samples}")
    x_N = np.asarray(x_N, dtype=float)
    batch = np.broadcast_to(x_N, (n_samples,) + x_N.shape).copy()
    out, _ = sample_reverse(s, batch, den, rng)
    return out


def posterior_mean_estimate(s: Schedule, x_N, den: Denoiser, n_samples: int,
                            rng: np.random.Generator):
    """Pixelwise mean of ``n_samples`` reverse-chain outputs."""
    return sample_many(s, x_N, den, n_samples, rng).mean(axis=0)
