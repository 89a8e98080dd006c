"""Domain types, parameter schedules, pixel scaling and random streams.

Images are plain ``float64`` numpy arrays in the canonical ``[0, 255]`` domain.
Every operation in the package broadcasts over leading axes, so a stack of
images with shape ``(batch, height, width)`` is handled the same way as a
single ``(height, width)`` image.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ConfigurationError, ParameterError, ScheduleSizeError

EPS_FLOOR = 1e-3
DEFAULT_STEPS = (20, 40)


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float

    name = "gaussian"

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma <= 0:
            raise ParameterError(f"Gaussian sigma must be > 0, got {self.sigma}")

    @property
    def terminal(self) -> float:
        return self.sigma


@dataclass(frozen=True)
class GammaNoise:
    alpha: float

    name = "gamma"

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha <= 1:
            raise ParameterError(f"Gamma alpha must be > 1, got {self.alpha}")

    @property
    def terminal(self) -> float:
        return self.alpha


@dataclass(frozen=True)
class PoissonNoise:
    lam: float

    name = "poisson"

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam <= 0:
            raise ParameterError(f"Poisson lambda must be > 0, got {self.lam}")

    @property
    def terminal(self) -> float:
        return self.lam


NoiseFamily = Union[GaussianNoise, GammaNoise, PoissonNoise]

_FAMILIES = {"gaussian": GaussianNoise, "gamma": GammaNoise, "poisson": PoissonNoise}


def make_family(name: str, param: float) -> NoiseFamily:
    """Build a noise family from its lowercase name and terminal parameter."""
    try:
        cls = _FAMILIES[name.lower()]
    except KeyError:
        raise ConfigurationError(
            f"unknown family {name!r}; expected one of {sorted(_FAMILIES)}"
        ) from None
    return cls(float(param))


def schedule_violations(family: NoiseFamily, params) -> list[str]:
    """Return human-readable descriptions of broken schedule invariants."""
    params = np.asarray(params, dtype=float)
    problems = []
    if params.ndim != 1 or params.size < 2:
        return [f"schedule needs N >= 2 parameters, got {params.size}"]
    if not np.all(np.isfinite(params)):
        problems.append("non-finite parameter")
    diffs = np.diff(params)
    if isinstance(family, GaussianNoise):
        if params[0] <= 0:
            problems.append("sigma_1 must be > 0")
        if np.any(diffs <= 0):
            problems.append("sigma_t must be strictly increasing")
    else:
        floor = 1.0 if isinstance(family, GammaNoise) else 0.0
        if np.any(params <= floor):
            problems.append(f"all parameters must be > {floor:g}")
        if np.any(diffs >= 0):
            problems.append("parameters must be strictly decreasing")
    if params[-1] != family.terminal:
        problems.append(
            f"terminal parameter {params[-1]!r} != family parameter {family.terminal!r}"
        )
    return problems


@dataclass(frozen=True, eq=False)
class Schedule:
    """A noise family with its parameter sequence ``params[t-1]`` for ``t = 1..N``.

    ``t = 0`` is the noise-free endpoint and never has a stored parameter.
    """

    family: NoiseFamily
    params: np.ndarray

    def __post_init__(self):
        params = np.array(self.params, dtype=float)
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        if params.ndim != 1 or params.size < 2:
            raise ScheduleSizeError(f"N must be >= 2, got {params.size}")
        problems = schedule_violations(self.family, params)
        if problems:
            raise ParameterError("invalid schedule: " + "; ".join(problems))

    @classmethod
    def unchecked(cls, family: NoiseFamily, params) -> "Schedule":
        """Build a schedule without validation (fault injection only)."""
        obj = object.__new__(cls)
        params = np.array(params, dtype=float)
        params.setflags(write=False)
        object.__setattr__(obj, "family", family)
        object.__setattr__(obj, "params", params)
        return obj

    @property
    def N(self) -> int:
        return int(self.params.size)

    @property
    def name(self) -> str:
        return self.family.name

    def __getitem__(self, t: int) -> float:
        """Parameter at step ``t`` (1-based, ``1 <= t <= N``)."""
        if not 1 <= t <= self.N:
            raise IndexError(f"t must be in 1..{self.N}, got {t}")
        return float(self.params[t - 1])

    def param(self, t: int) -> float:
        """Like ``self[t]`` but extended to the endpoint ``t = 0`` (0 or inf)."""
        if t == 0:
            return 0.0 if isinstance(self.family, GaussianNoise) else float("inf")
        return self[t]

    def marginal_std(self, t: int, x0):
        """Per-pixel standard deviation of x_t given x_0."""
        p = self[t]
        x0 = np.asarray(x0, dtype=float)
        if isinstance(self.family, GaussianNoise):
            return np.full_like(x0, p)
        if isinstance(self.family, GammaNoise):
            return x0 / np.sqrt(p)
        return np.sqrt(x0 / p)

    def violations(self) -> list[str]:
        return schedule_violations(self.family, self.params)

    def to_text(self) -> str:
        """Plain ``key=value`` provenance block."""
        return (
            f"family={self.name}\n"
            f"param={self.family.terminal!r}\n"
            f"N={self.N}\n"
            f"fingerprint={self.fingerprint()}\n"
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.name.encode())
        h.update(np.ascontiguousarray(self.params, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, Schedule):
            return NotImplemented
        return self.family == other.family and np.array_equal(self.params, other.params)

    def __hash__(self):
        return hash((self.family, self.params.tobytes()))

    def __repr__(self):
        return f"Schedule({self.family!r}, N={self.N})"


def build_schedule(family: NoiseFamily, N: int) -> Schedule:
    """Schedule whose std of x_t | x_0 grows linearly: ``(t/N) * std(x_N | x_0)``.

    Gaussian: sigma_t = sigma t/N.  Gamma: alpha_t = alpha (N/t)^2.
    Poisson: lambda_t = lambda (N/t)^2.
    """
    if int(N) != N or N < 2:
        raise ScheduleSizeError(f"N must be an integer >= 2, got {N}")
    N = int(N)
    t = np.arange(1, N + 1, dtype=float)
    if isinstance(family, GaussianNoise):
        params = family.sigma * t / N
    elif isinstance(family, GammaNoise):
        params = family.alpha * (N / t) ** 2
    elif isinstance(family, PoissonNoise):
        params = family.lam * (N / t) ** 2
    else:
        raise ConfigurationError(f"unsupported noise family {family!r}")
    params[-1] = family.terminal
    return Schedule(family, params)


def schedule_from_text(text: str) -> Schedule:
    """Inverse of :meth:`Schedule.to_text` (the fingerprint line is checked)."""
    fields = parse_key_values(text)
    try:
        family = make_family(fields["family"], float(fields["param"]))
        s = build_schedule(family, int(fields["N"]))
    except KeyError as exc:
        raise ConfigurationError(f"schedule block missing key {exc}") from None
    fp = fields.get("fingerprint")
    if fp is not None and fp != s.fingerprint():
        raise ConfigurationError("schedule fingerprint mismatch")
    return s


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def as_image(pixels, *, name: str = "image") -> np.ndarray:
    """Validate and convert to a float64 array with at least two axes."""
    arr = np.asarray(pixels, dtype=float)
    if arr.ndim < 2 or 0 in arr.shape[-2:]:
        raise ParameterError(f"{name} must have shape (..., height, width), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite pixels")
    return arr


def floor_clean(x0, family: NoiseFamily) -> np.ndarray:
    """Floor a clean image at EPS_FLOOR for the multiplicative families."""
    x0 = np.asarray(x0, dtype=float)
    if isinstance(family, GaussianNoise):
        return x0
    return np.maximum(x0, EPS_FLOOR)


def scale_to_model(img):
    """Map the canonical [0, 255] domain affinely onto [-1, 1] (no clamping)."""
    return np.asarray(img, dtype=float) / 127.5 - 1.0


def scale_from_model(img):
    return (np.asarray(img, dtype=float) + 1.0) * 127.5


def rng_stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Independent, reproducible generator for ``(seed, stream_id)``.

    Distinct stream ids are spawned children of the same seed sequence, so
    they are statistically independent of one another.
    """
    if seed < 0 or stream_id < 0:
        raise ParameterError("seed and stream_id must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.PCG64(ss))
