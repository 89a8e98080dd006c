"""Packaged statistical-identity suite.

Every check is seeded from ``(config.seed, crc32(test name))`` so results do
not depend on which other checks run.  Failures are reported as rows, never
raised.
"""

from __future__ import annotations

import csv
import io
import math
import zlib
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from . import __version__
from . import distributions as D
from . import forward
from .core import (
    EPS_FLOOR,
    GammaNoise,
    GaussianNoise,
    PoissonNoise,
    Schedule,
    build_schedule,
    floor_clean,
    rng_stream,
)
from .denoise import FinitePrior, OracleDenoiser, kl_minimizer_grid_check, posterior_weights
from .diagnostics import kl_gamma_terms, kl_poisson_terms
from .reverse import reverse_step, sample_many


@dataclass(frozen=True)
class SuiteRow:
    suite: str
    test: str
    statistic: float
    p_value: Optional[float]
    threshold: float
    passed: bool
    seed: int
    n: int

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"


@dataclass
class SuiteConfig:
    seed: int = 0
    n_samples: int = 10_000
    significance: float = 0.01
    # fault injection: make one Gaussian schedule non-monotone
    corrupt_schedule: bool = False
    suites: Optional[tuple[str, ...]] = None


CSV_FIELDS = ("suite_name", "test_name", "statistic", "p_value", "threshold",
              "verdict", "seed", "n")


def csv_footer(seed: int) -> str:
    """Trailing metadata comment carried by every CSV this package writes."""
    return f"# version={__version__} seed={seed}\n"


def rows_to_csv(rows, seed: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([r.suite, r.test, repr(r.statistic),
                    "" if r.p_value is None else repr(r.p_value),
                    repr(r.threshold), r.verdict, r.seed, r.n])
    buf.write(csv_footer(seed))
    return buf.getvalue()


class _Ctx:
    def __init__(self, suite: str, cfg: SuiteConfig):
        self.suite = suite
        self.cfg = cfg

    def rng(self, name: str) -> np.random.Generator:
        return rng_stream(self.cfg.seed, zlib.crc32(f"{self.suite}/{name}".encode()))

    def from_report(self, rep: D.TestReport) -> SuiteRow:
        return SuiteRow(self.suite, rep.name, rep.statistic, rep.p_value,
                        self.cfg.significance, rep.p_value >= self.cfg.significance,
                        self.cfg.seed, rep.sample_count)

    def tolerance(self, name: str, statistic: float, threshold: float, n: int) -> SuiteRow:
        ok = bool(statistic <= threshold)
        return SuiteRow(self.suite, name, float(statistic), None, threshold, ok,
                        self.cfg.seed, n)


# --------------------------------------------------------------------------
# core


def linear_std_error(s: Schedule, x0: float = 100.0) -> float:
    """Largest relative deviation of std(x_t|x_0) from (t/N) std(x_N|x_0)."""
    top = s.marginal_std(s.N, x0)
    worst = 0.0
    for t in range(1, s.N + 1):
        want = t / s.N * top
        worst = max(worst, abs(float(s.marginal_std(t, x0)) / float(want) - 1.0))
    return worst


def _core(ctx: _Ctx) -> Iterator[SuiteRow]:
    families = [GaussianNoise(25.0), GammaNoise(26.0), PoissonNoise(0.2)]
    for fam in families:
        bad = 0
        worst = 0.0
        for N in range(2, 1001):
            s = build_schedule(fam, N)
            if ctx.cfg.corrupt_schedule and isinstance(fam, GaussianNoise) and N == 20:
                p = s.params.copy()
                p[[4, 5]] = p[[5, 4]]
                s = Schedule.unchecked(fam, p)
            bad += len(s.violations()) > 0
            if N <= 200:
                worst = max(worst, linear_std_error(s))
        yield ctx.tolerance(f"schedule_invariants_{fam.name}", bad, 0, 999)
        yield ctx.tolerance(f"linear_std_{fam.name}", worst, 1e-12, 199)


# --------------------------------------------------------------------------
# distributions


def moment_rows(ctx: _Ctx, name: str, draws, mean: float, var: float):
    draws = np.asarray(draws, dtype=float)
    n = draws.size
    z = abs(draws.mean() - mean) / math.sqrt(var / n)
    rel = abs(draws.var(ddof=1) / var - 1.0)
    yield ctx.tolerance(f"{name}_mean_z", z, 4.0, n)
    yield ctx.tolerance(f"{name}_var_rel", rel, 0.05, n)


def _distributions(ctx: _Ctx) -> Iterator[SuiteRow]:
    n = 100_000
    sig = ctx.cfg.significance
    yield from moment_rows(ctx, "gaussian_0_1",
                           D.sample_gaussian(0, 1, ctx.rng("g01"), size=n), 0, 1)
    yield from moment_rows(ctx, "gaussian_0_2",
                           D.sample_gaussian(0, 2, ctx.rng("g02"), size=n), 0, 4)
    for k in (3.0, 0.5):
        yield from moment_rows(ctx, f"gamma_{k:g}",
                               D.sample_gamma(k, ctx.rng(f"gamma{k}"), size=n), k, k)
    yield from moment_rows(ctx, "beta_2_2",
                           D.sample_beta(2, 2, ctx.rng("beta22"), size=n), 0.5, 0.05)
    yield from moment_rows(ctx, "poisson_7",
                           D.sample_poisson(7, ctx.rng("pois7"), size=n), 7, 7)

    m = ctx.cfg.n_samples
    yield ctx.from_report(D.ks_test(D.sample_beta(1, 1, ctx.rng("beta11"), size=m),
                                    lambda x: np.clip(x, 0, 1), name="ks_beta11_uniform",
                                    significance=sig))
    yield ctx.from_report(D.ks_test(D.sample_gamma(2.5, ctx.rng("ks_gamma"), size=m),
                                    D.GammaDist(2.5).cdf, name="ks_gamma_2.5",
                                    significance=sig))
    yield ctx.from_report(D.poisson_count_test(D.sample_poisson(4, ctx.rng("chi_pois"), size=m),
                                               4.0, name="chi2_poisson_4", significance=sig))
    for a, b in ((2, 3), (0.7, 1.3), (26, 78)):
        rng = ctx.rng(f"bg{a}_{b}")
        u = D.sample_beta(a, b, rng, size=m)
        v = D.sample_gamma(a + b, rng, size=m)
        yield ctx.from_report(D.ks_test(u * v, D.GammaDist(a).cdf,
                                        name=f"beta_gamma_product_{a:g}_{b:g}",
                                        significance=sig))
    rng = ctx.rng("superposition")
    total = D.sample_poisson(3.0, rng, size=m) + D.sample_poisson(4.5, rng, size=m)
    yield ctx.from_report(D.poisson_count_test(total, 7.5, name="poisson_superposition",
                                               significance=sig))


# --------------------------------------------------------------------------
# forward

COMPOSITION_X0 = (EPS_FLOOR, 50.0, 255.0)
TOWER_X0 = (1.0, 50.0, 255.0)


def marginal_cdf(s: Schedule, x0: float, t: int) -> Callable:
    p = s[t]
    if isinstance(s.family, GaussianNoise):
        return D.NormalDist(x0, p).cdf
    if isinstance(s.family, GammaNoise):
        return D.GammaDist(p, x0 / p).cdf
    raise ValueError("continuous marginal only for Gaussian/Gamma")


def _forward(ctx: _Ctx) -> Iterator[SuiteRow]:
    m = ctx.cfg.n_samples
    sig = ctx.cfg.significance
    x0 = np.array([COMPOSITION_X0])
    for fam in (GaussianNoise(25.0), GammaNoise(26.0)):
        s = build_schedule(fam, 20)
        rng = ctx.rng(f"composition_{fam.name}")
        x = np.broadcast_to(x0, (m,) + x0.shape).copy()
        checkpoints = {5, s.N // 2, s.N}
        for t in range(s.N):
            x = forward.sample_step(s, x, t, rng)
            if t + 1 in checkpoints:
                for j, v in enumerate(COMPOSITION_X0):
                    yield ctx.from_report(D.ks_test(
                        x[:, 0, j], marginal_cdf(s, v, t + 1),
                        name=f"composition_{fam.name}_t{t + 1}_x0_{v:g}", significance=sig))

    s = build_schedule(PoissonNoise(0.2), 20)
    x0 = np.array([TOWER_X0])
    rng = ctx.rng("poisson_tower")
    x = forward.sample_marginal(s, np.broadcast_to(x0, (m,) + x0.shape), s.N, rng)
    for t in range(s.N - 1, 0, -1):
        x = forward.sample_bridge(s, x0, x, t, rng)
        if t in (1, 5, 10):
            counts = forward.poisson_counts(x, s[t])
            for j, v in enumerate(TOWER_X0):
                yield ctx.from_report(D.poisson_count_test(
                    counts[:, 0, j], s[t] * v,
                    name=f"poisson_tower_t{t}_x0_{v:g}", significance=sig))

    s = build_schedule(GammaNoise(26.0), 20)
    for t, v in ((1, 50.0), (10, 255.0), (19, EPS_FLOOR)):
        rng = ctx.rng(f"gamma_residual_{t}")
        x = np.full((m, 1, 1), v)
        for step in range(t):
            x = forward.sample_step(s, x, step, rng)
        x_next = forward.sample_step(s, x, t, rng)
        resid = (s[t] * x - s[t + 1] * x_next) / v
        yield ctx.from_report(D.ks_test(resid.ravel(), D.GammaDist(s[t] - s[t + 1]).cdf,
                                        name=f"gamma_bridge_residual_t{t}_x0_{v:g}",
                                        significance=sig))

    for row in gaussian_bridge_binned(ctx.rng("gaussian_bridge"), ctx.cfg.n_samples * 10):
        yield ctx.tolerance(row[0], row[1], 3.0, row[2])

    for fam in (GammaNoise(26.0), PoissonNoise(0.2)):
        s = build_schedule(fam, 10)
        rng = ctx.rng(f"nonneg_{fam.name}")
        x0 = np.array([[EPS_FLOOR, 1.0, 255.0]])
        chain = forward.sample_chain(s, np.broadcast_to(x0, (1000,) + x0.shape), rng)
        negatives = sum(int(np.sum(c < 0)) for c in chain)
        yield ctx.tolerance(f"bridge_nonnegative_{fam.name}", negatives, 0, 1000)


def gaussian_bridge_binned(rng, n: int, *, t: int = 5, x0: float = 100.0, bins: int = 20,
                           s: Optional[Schedule] = None):
    """Bin forward joint draws on x_{t+1}; compare within-bin moments to the bridge.

    Yields ``(name, max |z| over bins, n)`` for the conditional mean and std.
    """
    s = s or build_schedule(GaussianNoise(25.0), 20)
    x_t = forward.sample_marginal(s, np.full(n, x0)[:, None], t, rng)[:, 0]
    x_next = forward.sample_step(s, x_t[:, None], t, rng)[:, 0]
    bp = forward.bridge_params_gaussian(s, x0, x_next, t)
    edges = np.quantile(x_next, np.linspace(0, 1, bins + 1))
    idx = np.clip(np.searchsorted(edges, x_next, side="right") - 1, 0, bins - 1)
    z_mean, z_std = [], []
    for b in range(bins):
        sel = idx == b
        k = int(sel.sum())
        resid = x_t[sel] - bp.mu_tilde[sel]
        z_mean.append(abs(resid.mean()) / (bp.sigma_tilde / math.sqrt(k)))
        sd = resid.std(ddof=1)
        z_std.append(abs(sd - bp.sigma_tilde) / (bp.sigma_tilde / math.sqrt(2 * (k - 1))))
    yield "gaussian_bridge_mean_max_z", max(z_mean), n
    yield "gaussian_bridge_std_max_z", max(z_std), n


# --------------------------------------------------------------------------
# reverse


def posterior_test_prior(contrast: float = 12.5) -> FinitePrior:
    """Four distinct 4x4 atoms around mid-gray: flat, checkerboard, two half-splits."""
    i, j = np.mgrid[0:4, 0:4]
    patterns = np.stack([
        np.zeros((4, 4)),
        np.where((i + j) % 2, 1.0, -1.0),
        np.where(i < 2, 1.0, -1.0),
        np.where(j < 2, 1.0, -1.0),
    ])
    return FinitePrior.uniform(128.0 + contrast * patterns)


POSTERIOR_FAMILIES = (GaussianNoise(25.0), GammaNoise(26.0), PoissonNoise(0.2))


class PosteriorDrawOracle:
    """Control denoiser that returns a posterior *draw* of x_0, not its mean.

    Bridging from a drawn atom samples the true mixture q(x_t | x_{t+1}), so a
    chain driven by this object samples the Bayes posterior exactly.  It
    isolates the bias of the mean-plugging step from implementation errors.
    """

    def __init__(self, prior: FinitePrior, schedule: Schedule, rng: np.random.Generator):
        self.prior = prior
        self.schedule = schedule
        self.rng = rng
        self.needs_terminal = isinstance(schedule.family, PoissonNoise)

    def predict(self, x_next, x_N, t_next: int):
        w = posterior_weights(self.prior, self.schedule, x_next, x_N, t_next)
        u = self.rng.random(w.shape[:-1] + (1,))
        k = np.minimum(np.sum(np.cumsum(w, axis=-1) < u, axis=-1), len(self.prior) - 1)
        return floor_clean(self.prior.atoms, self.schedule.family)[k]


def exact_posterior_tv(fam, seed: int, n: int = 10_000, N: int = 10,
                       prior: Optional[FinitePrior] = None, *, control: bool = False):
    """TV distance between reverse-chain atom frequencies and the Bayes posterior.

    x_N is drawn from the first atom; ``n`` oracle-driven reverse chains are
    classified to their nearest atom.  ``control=True`` swaps the mean oracle
    for :class:`PosteriorDrawOracle`.  Returns ``(tv, posterior, empirical)``.
    """
    prior = prior or posterior_test_prior()
    s = build_schedule(fam, N)
    x_N = forward.sample_marginal(s, prior.atoms[0], s.N, rng_stream(seed, 0))
    post = posterior_weights(prior, s, x_N, x_N, s.N)
    if control:
        den = PosteriorDrawOracle(prior, s, rng_stream(seed, 2))
    else:
        den = OracleDenoiser(prior, s)
    out = sample_many(s, x_N, den, n, rng_stream(seed, 1))
    d2 = np.sum((out[:, None] - prior.atoms[None]) ** 2, axis=(-2, -1))
    emp = np.bincount(np.argmin(d2, axis=1), minlength=len(prior)) / n
    return 0.5 * float(np.abs(post - emp).sum()), post, emp


def _reverse(ctx: _Ctx) -> Iterator[SuiteRow]:
    m = ctx.cfg.n_samples
    sig = ctx.cfg.significance
    x0 = np.full((1, 1), 100.0)
    for fam in (GaussianNoise(25.0), GammaNoise(26.0), PoissonNoise(0.2)):
        s = build_schedule(fam, 10)
        den = OracleDenoiser(FinitePrior.uniform(x0[None]), s)
        rng = ctx.rng(f"perfect_{fam.name}")
        x_N = forward.sample_marginal(s, np.broadcast_to(x0, (m, 1, 1)), s.N, rng)
        x = x_N
        mse = [float(np.mean((x_N - x0) ** 2))]
        se = [float(np.std((x_N - x0) ** 2) / math.sqrt(m))]
        for t in range(s.N - 1, 0, -1):
            x = reverse_step(s, x, x_N, t, den, rng)
            err = (x - x0) ** 2
            mse.append(float(err.mean()))
            se.append(float(err.std() / math.sqrt(m)))
            if t in (1, s.N // 2):
                name = f"perfect_denoiser_{fam.name}_t{t}"
                if isinstance(fam, PoissonNoise):
                    rep = D.poisson_count_test(forward.poisson_counts(x, s[t]).ravel(),
                                               s[t] * 100.0, name=name, significance=sig)
                else:
                    rep = D.ks_test(x.ravel(), marginal_cdf(s, 100.0, t), name=name,
                                    significance=sig)
                yield ctx.from_report(rep)
        # mse must not grow as t decreases; measure the largest increase in SE units
        worst = max((mse[k + 1] - mse[k]) / math.hypot(se[k], se[k + 1])
                    for k in range(len(mse) - 1))
        yield ctx.tolerance(f"monotone_fidelity_{fam.name}", max(worst, 0.0), 3.0, m)

    for fam in POSTERIOR_FAMILIES:
        tv, _, _ = exact_posterior_tv(fam, ctx.cfg.seed, n=m)
        yield ctx.tolerance(f"exact_posterior_tv_{fam.name}", tv, 0.05, m)
        tv, _, _ = exact_posterior_tv(fam, ctx.cfg.seed, n=m, control=True)
        yield ctx.tolerance(f"posterior_draw_control_tv_{fam.name}", tv, 0.05, m)


# --------------------------------------------------------------------------
# diagnostics


def _diagnostics(ctx: _Ctx) -> Iterator[SuiteRow]:
    grid = np.round(np.arange(1, 15001) * 0.01, 10)
    for fam, terms, gap in ((GammaNoise(26.0), kl_gamma_terms, 2.0),
                            (PoissonNoise(0.2), kl_poisson_terms, 1.5)):
        for v in (0.5, 2.0, 100.0):
            best = kl_minimizer_grid_check(fam, gap, v, grid)
            yield ctx.tolerance(f"kl_argmin_{fam.name}_x0_{v:g}", abs(best - v), 0.01 + 1e-9,
                                grid.size)
            kl = terms(v, grid, gap)
            yield ctx.tolerance(f"kl_nonnegative_{fam.name}_x0_{v:g}", max(0.0, -kl.min()),
                                0.0, grid.size)
            yield ctx.tolerance(f"kl_zero_at_x0_{fam.name}_x0_{v:g}",
                                abs(float(terms(v, v, gap))), 1e-12, 1)
            # Gamma's expression bends concave past f = 2 x0, so its convexity
            # is checked on a log-spaced grid, where it holds everywhere.
            if isinstance(fam, GammaNoise):
                vals = terms(v, np.exp(np.linspace(-5.0, 5.0, grid.size)) * v, gap)
                label = "kl_convex_logf"
            else:
                vals, label = kl, "kl_convex"
            second = vals[2:] - 2 * vals[1:-1] + vals[:-2]
            yield ctx.tolerance(f"{label}_{fam.name}_x0_{v:g}", max(0.0, -second.min()),
                                1e-9, grid.size)

    n = 1_000_000
    k = D.sample_poisson(2.0, ctx.rng("kl_mc"), size=n)
    mc = float(np.mean(k * math.log(2.0) - 1.0))
    exact = 2 * math.log(2.0) - 1.0
    yield ctx.tolerance("kl_poisson_monte_carlo_rel", abs(mc / exact - 1.0), 0.02, n)


SUITES = {
    "core": _core,
    "distributions": _distributions,
    "forward": _forward,
    "reverse": _reverse,
    "diagnostics": _diagnostics,
}


def run_verification_suite(config: Optional[SuiteConfig] = None) -> list[SuiteRow]:
    config = config or SuiteConfig()
    names = config.suites or tuple(SUITES)
    rows = []
    for name in names:
        rows.extend(SUITES[name](_Ctx(name, config)))
    return rows


def all_passed(rows) -> bool:
    return all(r.passed for r in rows)
