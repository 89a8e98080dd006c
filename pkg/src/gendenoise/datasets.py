"""Small synthetic grayscale images for desk-scale training and tests."""

from __future__ import annotations

import numpy as np


def smooth_images(n: int, size: int, rng: np.random.Generator, *,
                  n_waves: int = 3, low: float = 40.0, high: float = 215.0) -> np.ndarray:
    """``n`` random low-frequency images of shape ``(size, size)`` in [low, high].

    Each image is a sum of ``n_waves`` random planar cosines plus a random
    linear ramp, rescaled into the target range.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((n, size, size))
    for k in range(n):
        field = rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy
        for _ in range(n_waves):
            fx, fy = rng.uniform(-2.0, 2.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            field = field + rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
        field = field - field.min()
        span = field.max()
        field = field / span if span > 0 else field
        out[k] = low + (high - low) * field
    return out
