"""Denoisers: the exact finite-prior Bayes oracle and a small trainable MLP.

A denoiser maps ``(x_{t+1}, [x_N], t+1)`` to an estimate of x_0.  Every
family's training objective reduces to plain squared error against x_0, so
one regression loop serves Gaussian, Gamma and Poisson alike; only the
corruption used to build the inputs differs.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy import special

from . import forward
from .core import (
    GammaNoise,
    GaussianNoise,
    PoissonNoise,
    Schedule,
    floor_clean,
    make_family,
    rng_stream,
    scale_from_model,
    scale_to_model,
)
from .diagnostics import kl_gamma_terms, kl_poisson_terms
from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateEvidenceError,
    FormatError,
    ParameterError,
    ShapeError,
    TrainingDivergedError,
)


class Denoiser(Protocol):
    needs_terminal: bool

    def predict(self, x_next, x_N, t_next: int) -> np.ndarray:
        """Estimate x_0 (canonical domain) from x_{t+1}, optional x_N, and t+1."""
        ...


def clamp_output(f_hat, family) -> np.ndarray:
    """Denoiser outputs feed Gamma scales / Poisson rates, which must be positive."""
    return floor_clean(f_hat, family)


# --------------------------------------------------------------------------
# Finite-prior oracle


@dataclass(frozen=True, eq=False)
class FinitePrior:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=float)
        if atoms.ndim != 3 or atoms.shape[0] < 1:
            raise ShapeError(f"atoms must have shape (K, H, W) with K >= 1, got {atoms.shape}")
        if not np.all(np.isfinite(atoms)):
            raise ParameterError("atoms must be finite")
        w = np.array(self.weights, dtype=float)
        if w.shape != (atoms.shape[0],) or np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ParameterError("need one positive finite weight per atom")
        w = w / w.sum()
        atoms.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, atoms) -> "FinitePrior":
        atoms = np.asarray(atoms, dtype=float)
        return cls(atoms, np.ones(atoms.shape[0]))

    @property
    def shape(self) -> tuple[int, int]:
        return self.atoms.shape[1:]

    def __len__(self):
        return self.atoms.shape[0]


def observation_loglik(prior: FinitePrior, s: Schedule, x_next, x_N, t_next: int):
    """Log-likelihood of the observations under each atom, shape ``(..., K)``.

    Gaussian and Gamma condition on x_{t+1} alone.  Poisson conditions on
    (x_{t+1}, x_N): the count ``lam_{t+1} x_{t+1} - lam_N x_N`` is a Poisson
    increment with rate ``(lam_{t+1} - lam_N) x_0``.
    """
    x_next = np.asarray(x_next, dtype=float)
    if x_next.shape[-2:] != prior.shape:
        raise ShapeError(f"observation shape {x_next.shape[-2:]} != prior shape {prior.shape}")
    if not 1 <= t_next <= s.N:
        raise IndexError(f"t_next must be in 1..{s.N}, got {t_next}")
    atoms = floor_clean(prior.atoms, s.family)
    obs = x_next[..., None, :, :]
    p = s[t_next]
    if isinstance(s.family, GaussianNoise):
        ll = -0.5 * ((obs - atoms) / p) ** 2 - math.log(p) - 0.5 * math.log(2 * math.pi)
    elif isinstance(s.family, GammaNoise):
        # x_{t+1} ~ Gamma(shape=a, scale=x0/a)
        with np.errstate(divide="ignore"):
            ll = ((p - 1) * np.log(p * obs / atoms) - p * obs / atoms
                  + math.log(p) - np.log(atoms) - special.gammaln(p))
        ll = np.where(obs > 0, ll, -np.inf)
    elif isinstance(s.family, PoissonNoise):
        if x_N is None:
            raise ContractError("Poisson posterior needs the terminal image x_N")
        x_N = np.asarray(x_N, dtype=float)
        if x_N.shape[-2:] != prior.shape:
            raise ShapeError("x_N shape does not match prior")
        lam_N = s[s.N]
        n_N = forward.poisson_counts(x_N, lam_N)[..., None, :, :]
        n_next = forward.poisson_counts(x_next, p)[..., None, :, :]
        ll = _poisson_logpmf(n_N, lam_N * atoms)
        if t_next < s.N:
            ll = ll + _poisson_logpmf(n_next - n_N, (p - lam_N) * atoms)
        else:
            ll = ll + np.where(n_next == n_N, 0.0, -np.inf)
    else:
        raise ConfigurationError(f"unsupported family {s.family!r}")
    return np.sum(ll, axis=(-2, -1))


def _poisson_logpmf(k, rate):
    ok = k >= 0
    kk = np.where(ok, k, 0.0)
    out = special.xlogy(kk, rate) - rate - special.gammaln(kk + 1)
    return np.where(ok, out, -np.inf)


def posterior_weights(prior: FinitePrior, s: Schedule, x_next, x_N, t_next: int):
    """Normalised posterior over atoms, shape ``(..., K)``."""
    ll = observation_loglik(prior, s, x_next, x_N, t_next)
    with np.errstate(divide="ignore"):
        logw = ll + np.log(prior.weights)
    top = np.max(logw, axis=-1, keepdims=True)
    if np.any(~np.isfinite(top)):
        raise DegenerateEvidenceError("every atom has zero likelihood for the observation")
    w = np.exp(logw - top)
    return w / w.sum(axis=-1, keepdims=True)


def oracle_posterior_mean(prior: FinitePrior, s: Schedule, x_next, x_N, t_next: int):
    """Exact E[x_0 | x_{t+1}, (x_N)] under a finite prior."""
    w = posterior_weights(prior, s, x_next, x_N, t_next)
    atoms = floor_clean(prior.atoms, s.family)
    return np.tensordot(w, atoms, axes=([-1], [0]))


class OracleDenoiser:
    """Bayes-optimal denoiser for data drawn from a :class:`FinitePrior`."""

    def __init__(self, prior: FinitePrior, schedule: Schedule):
        self.prior = prior
        self.schedule = schedule
        self.needs_terminal = isinstance(schedule.family, PoissonNoise)

    def predict(self, x_next, x_N, t_next: int):
        out = oracle_posterior_mean(self.prior, self.schedule, x_next, x_N, t_next)
        return clamp_output(out, self.schedule.family)


# --------------------------------------------------------------------------
# Loss


def unified_loss(f_hat, x0):
    """Squared L2 distance and its gradient ``2 (f_hat - x0)`` w.r.t. ``f_hat``."""
    f_hat = np.asarray(f_hat, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if f_hat.shape != x0.shape:
        raise ShapeError(f"shape mismatch: {f_hat.shape} vs {x0.shape}")
    diff = f_hat - x0
    return float(np.sum(diff * diff)), 2.0 * diff


# --------------------------------------------------------------------------
# Toy regressor


class ToyRegressor:
    """Two-hidden-layer tanh MLP predicting scaled x_0.

    Input is the flattened scaled x_{t+1} (and x_N for Poisson) with the time
    feature ``t_next / N`` appended.
    """

    def __init__(self, image_shape, N: int, *, needs_terminal: bool = False,
                 width: int = 256, seed: int = 0, family=None):
        self.image_shape = tuple(int(v) for v in image_shape)
        self.N = int(N)
        self.needs_terminal = bool(needs_terminal)
        self.width = int(width)
        self.family = family
        n_pix = self.image_shape[0] * self.image_shape[1]
        self.n_in = n_pix * (2 if needs_terminal else 1) + 1
        self.n_out = n_pix
        rng = rng_stream(seed, 0)
        dims = [self.n_in, self.width, self.width, self.n_out]
        self.weights = []
        self.biases = []
        for d_in, d_out in zip(dims[:-2], dims[1:-1]):
            self.weights.append(rng.standard_normal((d_in, d_out)) / math.sqrt(d_in))
            self.biases.append(np.zeros(d_out))
        # zero read-out: the untrained model predicts mid-gray everywhere
        self.weights.append(np.zeros((dims[-2], dims[-1])))
        self.biases.append(np.zeros(dims[-1]))

    @property
    def dims(self) -> list[int]:
        return [self.n_in, self.width, self.width, self.n_out]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        pos = 0
        for p in self.params():
            p[...] = flat[pos : pos + p.size].reshape(p.shape)
            pos += p.size
        if pos != flat.size:
            raise ShapeError(f"expected {pos} parameters, got {flat.size}")

    def copy(self) -> "ToyRegressor":
        new = object.__new__(ToyRegressor)
        new.__dict__.update(self.__dict__)
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        return new

    def features(self, x_next, x_N, t_next) -> np.ndarray:
        """Build the network input matrix from canonical-domain images."""
        x_next = np.asarray(x_next, dtype=float)
        if x_next.shape[-2:] != self.image_shape:
            raise ShapeError(f"expected images of shape {self.image_shape}, got {x_next.shape}")
        lead = x_next.shape[:-2]
        parts = [scale_to_model(x_next).reshape(lead + (-1,))]
        if self.needs_terminal:
            if x_N is None:
                raise ContractError("this model needs the terminal image x_N")
            x_N = np.broadcast_to(np.asarray(x_N, dtype=float), x_next.shape)
            parts.append(scale_to_model(x_N).reshape(lead + (-1,)))
        t_feat = np.broadcast_to(np.asarray(t_next, dtype=float) / self.N, lead)
        parts.append(t_feat[..., None])
        return np.concatenate(parts, axis=-1)

    def forward(self, inputs):
        """Return scaled outputs and the activations needed by :meth:`backward`."""
        w1, w2, w3 = self.weights
        b1, b2, b3 = self.biases
        h1 = np.tanh(inputs @ w1 + b1)
        h2 = np.tanh(h1 @ w2 + b2)
        out = h2 @ w3 + b3
        return out, (inputs, h1, h2)

    def backward(self, cache, d_out) -> list[np.ndarray]:
        """Gradients in the order of :meth:`params` for upstream gradient ``d_out``."""
        inputs, h1, h2 = cache
        w1, w2, w3 = self.weights
        g_w3 = h2.T @ d_out
        g_b3 = d_out.sum(axis=0)
        d_h2 = (d_out @ w3.T) * (1.0 - h2 * h2)
        g_w2 = h1.T @ d_h2
        g_b2 = d_h2.sum(axis=0)
        d_h1 = (d_h2 @ w2.T) * (1.0 - h1 * h1)
        g_w1 = inputs.T @ d_h1
        g_b1 = d_h1.sum(axis=0)
        return [g_w1, g_b1, g_w2, g_b2, g_w3, g_b3]

    def predict(self, x_next, x_N, t_next: int):
        x_next = np.asarray(x_next, dtype=float)
        out, _ = self.forward(self.features(x_next, x_N, t_next))
        img = scale_from_model(out.reshape(x_next.shape))
        if self.family is not None:
            img = clamp_output(img, self.family)
        return img


def objective(model: ToyRegressor, inputs, targets):
    """Batch-mean unified loss (scaled domain) and its parameter gradients.

    ``targets`` are scaled, flattened clean images with shape ``(B, H*W)``.
    """
    out, cache = model.forward(inputs)
    loss, d_out = unified_loss(out, targets)
    b = inputs.shape[0]
    return loss / b, model.backward(cache, d_out / b)


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 16
    learning_rate: float = 1e-3
    seed: int = 0


@dataclass
class TrainResult:
    model: ToyRegressor
    losses: list[float] = field(default_factory=list)


def corrupt_batch(s: Schedule, x0, rng: np.random.Generator):
    """Training inputs for clean images ``x0`` of shape (B, H, W).

    Returns ``(x_t, x_N or None, t)``.  Gaussian and Gamma draw t uniformly
    from 1..N and x_t from its marginal.  Poisson draws t from 1..N-1, x_N
    from the marginal, and x_t from the composed bridge given (x_N, x_0).
    """
    b = x0.shape[0]
    if isinstance(s.family, PoissonNoise):
        t = rng.integers(1, s.N, size=b)
        lam_N = s[s.N]
        x_N = forward.sample_marginal(s, x0, s.N, rng)
        lam_t = s.params[t - 1][:, None, None]
        counts = forward.poisson_counts(x_N, lam_N) + rng.poisson((lam_t - lam_N) * x0)
        return counts / lam_t, x_N, t
    t = rng.integers(1, s.N + 1, size=b)
    p = s.params[t - 1][:, None, None]
    if isinstance(s.family, GaussianNoise):
        x_t = x0 + p * rng.standard_normal(x0.shape)
    else:
        x_t = rng.standard_gamma(np.broadcast_to(p, x0.shape)) / p * x0
    return x_t, None, t


def train(dataset, s: Schedule, model: ToyRegressor, config: TrainConfig,
          log=None) -> TrainResult:
    """Plain SGD on the unified L2 objective.  Deterministic given ``config.seed``."""
    data = floor_clean(np.asarray(dataset, dtype=float), s.family)
    if data.ndim != 3 or data.shape[0] == 0:
        raise ShapeError("dataset must be a non-empty stack of images (K, H, W)")
    if model.needs_terminal != isinstance(s.family, PoissonNoise):
        raise ConfigurationError("model terminal-input flag does not match the schedule family")
    if model.N != s.N:
        raise ConfigurationError(f"model built for N={model.N}, schedule has N={s.N}")
    model = model.copy()
    rng = rng_stream(config.seed, 1)
    losses = []
    for step in range(config.steps):
        idx = rng.integers(0, data.shape[0], size=config.batch)
        x0 = data[idx]
        x_t, x_N, t = corrupt_batch(s, x0, rng)
        inputs = model.features(x_t, x_N, t)
        targets = scale_to_model(x0).reshape(config.batch, -1)
        loss, grads = objective(model, inputs, targets)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        for p, g in zip(model.params(), grads):
            p -= config.learning_rate * g
        losses.append(loss)
        if log is not None:
            log(step, loss)
    return TrainResult(model, losses)


# --------------------------------------------------------------------------
# Checkpoints
#
# Layout (little-endian): magic b"GDNZ", u32 version, u32 metadata length,
# metadata bytes (UTF-8 key=value lines), u32 layer count L, (L+1) u32 layer
# dims, then every parameter as f8 in the order W1, b1, W2, b2, W3, b3.

MAGIC = b"GDNZ"
VERSION = 1


def checkpoint_bytes(model: ToyRegressor, metadata: dict[str, str]) -> bytes:
    meta = dict(metadata)
    meta.update({
        "height": str(model.image_shape[0]),
        "width": str(model.image_shape[1]),
        "N": str(model.N),
        "needs_terminal": str(int(model.needs_terminal)),
    })
    text = "".join(f"{k}={v}\n" for k, v in sorted(meta.items())).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(text)))
    buf.write(text)
    dims = model.dims
    buf.write(struct.pack("<I", len(dims) - 1))
    buf.write(struct.pack(f"<{len(dims)}I", *dims))
    buf.write(model.get_flat().astype("<f8").tobytes())
    return buf.getvalue()


def model_from_checkpoint(data: bytes) -> tuple[ToyRegressor, dict[str, str]]:
    if data[:4] != MAGIC:
        raise FormatError("not a model checkpoint (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 12
        text = data[pos : pos + meta_len].decode("utf-8")
        pos += meta_len
        (n_layers,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = list(struct.unpack_from(f"<{n_layers + 1}I", data, pos))
        pos += 4 * (n_layers + 1)
    except struct.error:
        raise FormatError("truncated checkpoint") from None
    meta = dict(line.split("=", 1) for line in text.splitlines() if line)
    family = make_family(meta["family"], float(meta["param"])) if "family" in meta else None
    model = ToyRegressor(
        (int(meta["height"]), int(meta["width"])), int(meta["N"]),
        needs_terminal=meta["needs_terminal"] == "1", width=dims[1], family=family,
    )
    if dims != model.dims:
        raise FormatError(f"layer dims {dims} inconsistent with metadata")
    n_params = model.get_flat().size
    if len(data) - pos != 8 * n_params:
        raise FormatError("checkpoint parameter block has the wrong size")
    model.set_flat(np.frombuffer(data, dtype="<f8", offset=pos).astype(float))
    return model, meta


# --------------------------------------------------------------------------
# Executable check of the KL-minimiser equivalence


def kl_minimizer_grid_check(family, step_gap: float, x0: float, grid) -> float:
    """Grid argmin over f of the single-pixel KL between true and learned steps.

    ``step_gap`` is ``alpha_t - alpha_{t+1}`` (Gamma) or
    ``lambda_t - lambda_{t+1}`` (Poisson).  The minimiser should be x0.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0 or np.any(grid <= 0):
        raise ConfigurationError("grid must be non-empty and strictly positive")
    if not step_gap > 0:
        raise ParameterError("step gap must be positive")
    if isinstance(family, GammaNoise):
        kl = kl_gamma_terms(x0, grid, step_gap)
    elif isinstance(family, PoissonNoise):
        kl = kl_poisson_terms(x0, grid, step_gap)
    else:
        raise ConfigurationError("grid check is defined for the Gamma and Poisson families")
    return float(grid[int(np.argmin(kl))])
