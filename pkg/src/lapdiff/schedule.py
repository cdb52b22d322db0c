"""Noise levels, per-band attenuation, preconditioning and sampling grids.

Time is identified with the noise level of the finest resolution (t == sigma,
variance-exploding). Coarser representations carry sigma in their own units;
see :mod:`lapdiff.process`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from lapdiff.errors import ConfigError

SHAPES = ("linear", "cosine", "step")


@dataclass(frozen=True)
class SigmaSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.rho <= 0:
            raise ConfigError(f"rho must be positive, got {self.rho}", key="rho")


@dataclass(frozen=True)
class AttenuationProfile:
    """Per-band attenuation of the clean signal.

    ``t_star`` holds the extinction times of bands 1..K-1; band K never dies.
    Band i stays at 1 until ``ramp_start[i]`` and reaches 0 at ``t_star[i]``.
    """

    t_star: tuple = ()
    ramp_start: tuple | None = None
    shape: str = "linear"

    def __post_init__(self):
        t_star = tuple(float(t) for t in self.t_star)
        ramp = tuple(0.0 for _ in t_star) if self.ramp_start is None else tuple(float(r) for r in self.ramp_start)
        if len(ramp) != len(t_star):
            raise ConfigError(f"expected {len(t_star)} ramp starts, got {len(ramp)}", key="ramp_start")
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}; choose from {SHAPES}", key="shape")
        for i, (r, t) in enumerate(zip(ramp, t_star)):
            if not 0 <= r < t:
                raise ConfigError(f"band {i + 1}: need 0 <= ramp_start < t_star, got {r}, {t}", key="t_star")
        # ordered starts and ends keep alpha_1 <= alpha_2 <= ... for every shape
        if any(b < a for a, b in zip(t_star, t_star[1:])):
            raise ConfigError("extinction times must be non-decreasing", key="t_star")
        if any(b < a for a, b in zip(ramp, ramp[1:])):
            raise ConfigError("ramp starts must be non-decreasing", key="ramp_start")
        object.__setattr__(self, "t_star", t_star)
        object.__setattr__(self, "ramp_start", ramp)

    @classmethod
    def constant(cls, K: int = 1) -> "AttenuationProfile":
        """Profile whose bands never attenuate: the standard process split into K bands."""
        return cls(t_star=(math.inf,) * (int(K) - 1))

    @property
    def K(self) -> int:
        return len(self.t_star) + 1

    def extinction(self, band: int) -> float:
        _check_band(self, band)
        return math.inf if band == self.K else self.t_star[band - 1]


def _check_band(profile, band):
    if int(band) != band or not 1 <= band <= profile.K:
        raise ConfigError(f"band {band} outside 1..{profile.K}", key="band")


def _ramp_position(profile, band, t):
    r = profile.ramp_start[band - 1]
    ts = profile.t_star[band - 1]
    return (t - r) / (ts - r), ts - r


def alpha(profile: AttenuationProfile, band: int, t: float) -> float:
    """Signal multiplier of ``band`` at time ``t``: 1 at t=0, 0 from its extinction time on."""
    _check_band(profile, band)
    if t < 0:
        raise ValueError(f"time must be non-negative, got {t}")
    if math.isinf(profile.extinction(band)):
        return 1.0
    ts = profile.t_star[band - 1]
    if t >= ts:
        return 0.0
    if profile.shape == "step":
        return 1.0
    s, _ = _ramp_position(profile, band, t)
    if s <= 0:
        return 1.0
    if profile.shape == "linear":
        return 1.0 - s
    return 0.5 * (1.0 + math.cos(math.pi * s))


def alpha_deriv(profile: AttenuationProfile, band: int, t: float) -> float:
    """Left derivative d alpha / dt, the one seen when integrating towards t=0.

    The step shape reports 0 everywhere; its jump is not differentiable.
    """
    _check_band(profile, band)
    if math.isinf(profile.extinction(band)) or profile.shape == "step":
        return 0.0
    s, width = _ramp_position(profile, band, t)
    if s <= 0 or s > 1:
        return 0.0
    if profile.shape == "linear":
        return -1.0 / width
    return -0.5 * math.pi * math.sin(math.pi * s) / width


def time_grid(s: SigmaSchedule, N: int) -> np.ndarray:
    """N+1 descending noise levels from ``sigma_max`` to exactly 0.

    Interior points interpolate ``sigma^(1/rho)`` in steps of 1/N towards
    ``sigma_min``; the last point is replaced by 0.
    """
    if int(N) != N or N < 1:
        raise ConfigError(f"need at least one step, got {N}", key="steps")
    inv = 1.0 / s.rho
    i = np.arange(N, dtype=np.float64)
    hi, lo = s.sigma_max**inv, s.sigma_min**inv
    sig = (hi + i / N * (lo - hi)) ** s.rho
    sig[0] = s.sigma_max
    return np.append(sig, 0.0)


def span_grid(sigma_hi: float, sigma_lo: float, N: int, rho: float = 7.0) -> np.ndarray:
    """N+1 rho-warped levels from ``sigma_hi`` down to ``sigma_lo`` > 0, endpoints exact."""
    if int(N) != N or N < 1:
        raise ConfigError(f"need at least one step, got {N}", key="steps")
    if not 0 < sigma_lo < sigma_hi:
        raise ConfigError(f"need 0 < sigma_lo < sigma_hi, got {sigma_lo}, {sigma_hi}")
    inv = 1.0 / rho
    i = np.arange(N + 1, dtype=np.float64)
    sig = (sigma_hi**inv + i / N * (sigma_lo**inv - sigma_hi**inv)) ** rho
    sig[0], sig[-1] = sigma_hi, sigma_lo
    return sig


@dataclass(frozen=True)
class Precondition:
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.sigma_data <= 0:
            raise ConfigError("sigma_data must be positive", key="sigma_data")


def precondition_coeffs(p: Precondition, sigma):
    """Return ``(c_skip, c_out, c_in, c_noise)`` for noise level ``sigma``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("preconditioning needs sigma > 0")
    sd2 = p.sigma_data**2
    total = sigma**2 + sd2
    c_skip = sd2 / total
    c_out = sigma * p.sigma_data / np.sqrt(total)
    c_in = 1.0 / np.sqrt(total)
    c_noise = np.log(sigma) / 4.0
    if sigma.ndim == 0:
        return float(c_skip), float(c_out), float(c_in), float(c_noise)
    return c_skip, c_out, c_in, c_noise


@dataclass(frozen=True)
class TrainSigmaDist:
    """ln(sigma) ~ Normal(p_mean, p_std^2)."""

    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if self.p_std < 0:
            raise ConfigError("p_std must be non-negative", key="p_std")


def sample_train_sigma(d: TrainSigmaDist, rng: np.random.Generator, size=None):
    return np.exp(d.p_mean + d.p_std * rng.standard_normal(size))


@dataclass(frozen=True)
class ScheduleSet:
    """Everything time-related a run needs, bundled for configs."""

    sigma: SigmaSchedule = field(default_factory=SigmaSchedule)
    profile: AttenuationProfile = field(default_factory=AttenuationProfile)
    precondition: Precondition = field(default_factory=Precondition)
    train: TrainSigmaDist = field(default_factory=TrainSigmaDist)
