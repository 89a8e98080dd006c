"""Per-step KL divergences between true and learned reverse steps, plus PSNR/SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, ParameterError, ShapeError
from .forward import GaussianBridgeParams


def _same_shape(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def kl_gaussian_bridge(q: GaussianBridgeParams, p: GaussianBridgeParams, *,
                       simplified: bool = False) -> float:
    """KL(q || p) for two isotropic Gaussians sharing the bridge std.

    The exact value is ``|mu_p - mu_q|^2 / (2 sigma^2)``.  With
    ``simplified=True`` the constant factor is dropped and the plain squared
    distance is returned, which has the same minimiser.
    """
    if not math.isclose(q.sigma_tilde, p.sigma_tilde, rel_tol=1e-12, abs_tol=0.0):
        raise ContractError(
            f"bridge std mismatch: {q.sigma_tilde} vs {p.sigma_tilde}"
        )
    mq, mp = _same_shape(q.mu_tilde, p.mu_tilde)
    sq = float(np.sum((mp - mq) ** 2))
    if simplified:
        return sq
    if q.sigma_tilde == 0:
        return 0.0 if sq == 0 else math.inf
    return sq / (2.0 * q.sigma_tilde**2)


def kl_gamma_terms(x0, f, gap: float) -> np.ndarray:
    """Per-pixel Gamma-step KL, ``gap * (log(f/x0) + x0/f - 1)``, broadcasting."""
    x0 = np.asarray(x0, dtype=float)
    f = np.asarray(f, dtype=float)
    if np.any(x0 <= 0) or np.any(f <= 0):
        raise ParameterError("KL evaluators need strictly positive pixels")
    r = x0 / f
    return gap * (r - 1.0 - np.log(r))


def kl_poisson_terms(x0, f, gap: float) -> np.ndarray:
    """Per-pixel Poisson-step KL, ``gap * (x0 log(x0/f) - x0 + f)``, broadcasting."""
    x0 = np.asarray(x0, dtype=float)
    f = np.asarray(f, dtype=float)
    if np.any(x0 <= 0) or np.any(f <= 0):
        raise ParameterError("KL evaluators need strictly positive pixels")
    return gap * (x0 * np.log(x0 / f) - x0 + f)


def kl_gamma(x0, f, alpha_t: float, alpha_next: float) -> float:
    """Sum over pixels of ``(a_t - a_next) (log(f/x0) + x0/f - 1)``."""
    if not alpha_t > alpha_next:
        raise ParameterError("need alpha_t > alpha_next")
    x0, f = _same_shape(x0, f)
    return float(np.sum(kl_gamma_terms(x0, f, alpha_t - alpha_next)))


def kl_poisson(x0, f, lambda_t: float, lambda_next: float) -> float:
    """Sum over pixels of ``d x0 log(x0/f) - d (x0 - f)`` with ``d = l_t - l_next``."""
    if not lambda_t > lambda_next:
        raise ParameterError("need lambda_t > lambda_next")
    x0, f = _same_shape(x0, f)
    return float(np.sum(kl_poisson_terms(x0, f, lambda_t - lambda_next)))


def psnr(a, b, data_range: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give ``inf``."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=float) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation over the last two axes
    k = g.size
    h, w = img.shape[-2:]
    rows = sum(g[i] * img[..., i : h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., :, j : w - k + 1 + j] for j in range(k))


def ssim(a, b, *, win_size: int = 11, win_sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 255.0) -> float:
    """Mean structural similarity over all fully-contained Gaussian windows."""
    a, b = _same_shape(a, b)
    if a.ndim != 2:
        raise ShapeError("ssim expects single 2-D images")
    if min(a.shape) < win_size:
        raise ConfigurationError(
            f"image {a.shape} smaller than the {win_size}x{win_size} SSIM window"
        )
    g = gaussian_window(win_size, win_sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class MetricPair:
    psnr_db: float
    ssim: float


def evaluate_pair(reference, candidate) -> MetricPair:
    return MetricPair(psnr(reference, candidate), ssim(reference, candidate))
