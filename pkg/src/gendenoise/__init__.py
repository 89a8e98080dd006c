"""Noise-model-adapted diffusion for generative image denoising.

Gaussian, Gamma and Poisson forward chains, their closed-form bridges, a
finite-prior Bayes oracle, a small trainable regressor and reverse samplers.
"""

__version__ = "0.1.0"

from .core import (
    EPS_FLOOR,
    GammaNoise,
    GaussianNoise,
    PoissonNoise,
    Schedule,
    build_schedule,
    make_family,
    rng_stream,
    scale_from_model,
    scale_to_model,
)
from .denoise import FinitePrior, OracleDenoiser, ToyRegressor, TrainConfig, train
from .pgm import load_pgm, save_pgm
from .reverse import posterior_mean_estimate, sample_reverse

__all__ = [
    "EPS_FLOOR", "GammaNoise", "GaussianNoise", "PoissonNoise", "Schedule",
    "build_schedule", "make_family", "rng_stream", "scale_from_model", "scale_to_model",
    "FinitePrior", "OracleDenoiser", "ToyRegressor", "TrainConfig", "train",
    "load_pgm", "save_pgm", "posterior_mean_estimate", "sample_reverse",
]
