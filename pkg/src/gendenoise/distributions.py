"""Samplers, log-densities and goodness-of-fit statistics.

The samplers are thin, validated wrappers over :class:`numpy.random.Generator`,
whose Gamma (Marsaglia-Tsang rejection, with the boost for shape < 1) and
Poisson (inversion below rate 10, PTRS transformed rejection above) routines
are exact for every parameter the diffusion processes need.  All samplers
accept array parameters and broadcast them.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .errors import ParameterError, TestConfigurationError

LOG_2PI = math.log(2.0 * math.pi)


def _check(cond, msg):
    if not np.all(cond):
        raise ParameterError(msg)


def sample_gaussian(mean, std, rng: np.random.Generator, size=None):
    """Draw from N(mean, std^2); ``std == 0`` returns ``mean`` exactly."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    _check(np.isfinite(std) & (std >= 0), "Gaussian std must be finite and >= 0")
    if size is None:
        size = np.broadcast_shapes(mean.shape, std.shape)
    z = rng.standard_normal(size)
    out = mean + std * z
    return out if np.ndim(out) else float(out)


def sample_gamma(shape, rng: np.random.Generator, size=None):
    """Unit-scale Gamma(shape, 1) draws."""
    shape = np.asarray(shape, dtype=float)
    _check(np.isfinite(shape) & (shape > 0), "Gamma shape must be > 0")
    if size is None:
        size = shape.shape
    out = rng.standard_gamma(shape, size)
    return out if np.ndim(out) else float(out)


def sample_beta(a, b, rng: np.random.Generator, size=None):
    """Beta(a, b) built as X / (X + Y) with independent unit Gammas X, Y."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check(np.isfinite(a) & (a > 0), "Beta parameter a must be > 0")
    _check(np.isfinite(b) & (b > 0), "Beta parameter b must be > 0")
    if size is None:
        size = np.broadcast_shapes(a.shape, b.shape)
    x = rng.standard_gamma(a, size)
    y = rng.standard_gamma(b, size)
    out = x / (x + y)
    return out if np.ndim(out) else float(out)


def sample_poisson(rate, rng: np.random.Generator, size=None):
    """Poisson(rate) counts as int64; ``rate == 0`` yields 0."""
    rate = np.asarray(rate, dtype=float)
    _check(np.isfinite(rate) & (rate >= 0), "Poisson rate must be finite and >= 0")
    if size is None:
        size = rate.shape
    out = rng.poisson(rate, size)
    return out if np.ndim(out) else int(out)


@dataclass(frozen=True)
class NormalDist:
    mean: float = 0.0
    std: float = 1.0

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.mean) / self.std
        return -0.5 * z * z - math.log(self.std) - 0.5 * LOG_2PI

    def cdf(self, x):
        return special.ndtr((np.asarray(x, dtype=float) - self.mean) / self.std)


@dataclass(frozen=True)
class GammaDist:
    shape: float
    scale: float = 1.0

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        k, th = self.shape, self.scale
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (k - 1) * np.log(x / th) - x / th - special.gammaln(k) - math.log(th)
        return np.where(x > 0, out, -np.inf)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return special.gammainc(self.shape, np.maximum(x, 0) / self.scale)


@dataclass(frozen=True)
class PoissonDist:
    rate: float

    def logpmf(self, k):
        k = np.asarray(k, dtype=float)
        valid = (k >= 0) & (k == np.floor(k))
        kk = np.where(valid, k, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = special.xlogy(kk, self.rate) - self.rate - special.gammaln(kk + 1)
        return np.where(valid, out, -np.inf)

    logpdf = logpmf

    def pmf(self, k):
        return np.exp(self.logpmf(k))

    def cdf(self, k):
        return special.pdtr(np.floor(np.asarray(k, dtype=float)), self.rate)


def log_density(dist, value):
    """Log-density (log-pmf for Poisson); ``-inf`` outside the support."""
    out = dist.logpdf(value)
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class TestReport:
    """Outcome of one goodness-of-fit test."""

    __test__ = False

    name: str
    statistic: float
    p_value: float
    sample_count: int
    significance: float = 0.01

    @property
    def passed(self) -> bool:
        return self.p_value >= self.significance

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"


REPORT_FIELDS = ("test_name", "statistic", "p_value", "n", "verdict")


def reports_to_csv(reports: Sequence[TestReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in reports:
        w.writerow([r.name, repr(r.statistic), repr(r.p_value), r.sample_count, r.verdict])
    return buf.getvalue()


def ks_test(samples, cdf: Callable, *, name: str = "ks", significance: float = 0.01,
            min_samples: int = 100) -> TestReport:
    """One-sample two-sided Kolmogorov-Smirnov test with asymptotic p-value."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n < min_samples:
        raise TestConfigurationError(f"KS test needs >= {min_samples} samples, got {n}")
    f = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    d = max(float(np.max(i / n - f)), float(np.max(f - (i - 1) / n)))
    p = float(np.clip(special.kolmogorov(math.sqrt(n) * d), 0.0, 1.0))
    return TestReport(name, d, p, n, significance)


def merge_tail_bins(observed, expected_prob, min_expected: float = 5.0):
    """Merge adjacent bins until every bin's expected count is >= min_expected.

    Bins are merged left to right; a short remainder is folded into the
    last retained bin.
    """
    obs = np.asarray(observed, dtype=float)
    prob = np.asarray(expected_prob, dtype=float)
    n = obs.sum()
    out_o, out_p = [], []
    acc_o = acc_p = 0.0
    for o, p in zip(obs, prob):
        acc_o += o
        acc_p += p
        if acc_p * n >= min_expected:
            out_o.append(acc_o)
            out_p.append(acc_p)
            acc_o = acc_p = 0.0
    if acc_p > 0 or acc_o > 0:
        if not out_o:
            raise TestConfigurationError("no bin reaches the minimum expected count")
        out_o[-1] += acc_o
        out_p[-1] += acc_p
    return np.array(out_o), np.array(out_p)


def chi_square_test(observed, expected_prob, *, name: str = "chi2",
                    significance: float = 0.01, min_expected: float = 5.0) -> TestReport:
    """Pearson chi-square goodness of fit.

    ``expected_prob`` must cover the whole support (tail mass included in the
    outermost bins).  Bins with small expectation are merged first.
    """
    observed = np.asarray(observed, dtype=float)
    expected_prob = np.asarray(expected_prob, dtype=float)
    if observed.shape != expected_prob.shape or observed.ndim != 1:
        raise TestConfigurationError("observed and expected must be equal-length vectors")
    n = observed.sum()
    if n <= 0:
        raise TestConfigurationError("no observations")
    if np.any(expected_prob < 0) or not math.isclose(expected_prob.sum(), 1.0, abs_tol=1e-9):
        raise TestConfigurationError("expected probabilities must be >= 0 and sum to 1")
    obs, prob = merge_tail_bins(observed, expected_prob, min_expected)
    if obs.size < 2:
        raise TestConfigurationError("chi-square needs at least two retained bins")
    exp = prob * n
    stat = float(np.sum((obs - exp) ** 2 / exp))
    p = float(special.chdtrc(obs.size - 1, stat))
    return TestReport(name, stat, min(max(p, 0.0), 1.0), int(n), significance)


def poisson_count_test(counts, rate: float, **kw) -> TestReport:
    """Chi-square of integer ``counts`` against Poisson(rate)."""
    counts = np.asarray(counts).ravel()
    if np.any(counts < 0) or np.any(counts != np.round(counts)):
        raise TestConfigurationError("counts must be non-negative integers")
    counts = counts.astype(np.int64)
    hi = int(max(counts.max(), rate + 12 * math.sqrt(rate) + 12))
    observed = np.bincount(counts, minlength=hi + 1)[: hi + 1].astype(float)
    prob = PoissonDist(rate).pmf(np.arange(hi + 1))
    prob[-1] += max(0.0, 1.0 - prob.sum())
    prob /= prob.sum()
    return chi_square_test(observed, prob, **kw)
