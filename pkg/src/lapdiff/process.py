"""Forward noising (standard and Laplacian) and the resolution switch.

A state at level l lives on the grid ``H / f^(l-1)`` and carries sigma in that
grid's units: averaging f x f blocks of white noise shrinks its std by f, so
``sigma_l = t / f^(l-1)``. Bands finer than l are not represented at level l.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from lapdiff import grid
from lapdiff.errors import ConfigError, DimensionError
from lapdiff.schedule import AttenuationProfile, alpha, alpha_deriv


@dataclass(frozen=True)
class DiffusionState:
    """A noisy field at one resolution level.

    ``field`` may carry leading batch axes (one entry per chain). ``stream``
    identifies the RNG stream that produced it, for bookkeeping only.
    """

    field: np.ndarray
    sigma: float
    level: int = 1
    stream: object = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        if int(self.level) != self.level or self.level < 1:
            raise ValueError(f"level must be a positive integer, got {self.level}")


@dataclass(frozen=True)
class SwitchRecord:
    from_level: int
    to_level: int
    sigma_before: float
    sigma_after: float
    ratio: int


def chain_rng(seed: int, chain: int, level: int) -> np.random.Generator:
    """Independent generator for one (chain, level) pair of a seeded run."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(chain), int(level))))


def level_scale(f: int, level: int) -> int:
    return f ** (level - 1)


def global_time(sigma: float, level: int, f: int) -> float:
    """Finest-resolution time corresponding to ``sigma`` at ``level``."""
    return sigma * level_scale(f, level)


def _profile(profile, K=1):
    return AttenuationProfile.constant(K) if profile is None else profile


def band_alphas(profile: AttenuationProfile | None, level: int, t: float) -> np.ndarray:
    """Attenuation of bands ``level..K`` at time ``t``."""
    profile = _profile(profile, level)
    if level > profile.K:
        raise ConfigError(f"level {level} exceeds pyramid depth {profile.K}", key="level")
    return np.array([alpha(profile, i, t) for i in range(level, profile.K + 1)])


def band_alpha_derivs(profile: AttenuationProfile | None, level: int, t: float, f: int) -> np.ndarray:
    """d alpha / d sigma_level for bands ``level..K`` (chain rule through t = sigma f^(level-1))."""
    profile = _profile(profile, level)
    scale = level_scale(f, level)
    return np.array([alpha_deriv(profile, i, t) * scale for i in range(level, profile.K + 1)])


def weighted_bands(x, weights, f: int) -> np.ndarray:
    """``sum_i w_i up^(i-1)(x^(i))`` over the len(weights)-band decomposition of ``x``."""
    weights = np.asarray(weights, dtype=np.float64)
    if np.all(weights == 1.0):
        return np.asarray(x, dtype=np.float64)
    p = grid.laplacian_decompose(x, len(weights), f)
    return grid.laplacian_reconstruct(p.map(lambda i, b: weights[i] * b))


def forward_mean(x0, t: float, profile: AttenuationProfile | None, f: int = 2, level: int = 1) -> np.ndarray:
    """Attenuated mean: each Laplacian band of ``x0`` scaled by its alpha at time ``t``.

    ``x0`` is expressed at ``level``; only bands ``level..K`` exist there.
    """
    if t < 0:
        raise ValueError(f"time must be non-negative, got {t}")
    return weighted_bands(x0, band_alphas(profile, level, t), f)


def forward_noise(
    x0,
    t: float,
    rng: np.random.Generator,
    profile: AttenuationProfile | None = None,
    f: int = 2,
    level: int = 1,
    *,
    sigma: float | None = None,
    via_bands: bool = False,
) -> DiffusionState:
    """Draw ``x_t = mu(x0, t) + sigma * eps`` at ``level``.

    ``sigma`` defaults to ``t / f^(level-1)``. With ``via_bands`` the noise is
    split into its own Laplacian pyramid and added band by band; by linearity
    the result is the same sample.
    """
    x0 = grid.as_field(x0)
    if sigma is None:
        sigma = t / level_scale(f, level)
    mu = forward_mean(x0, t, profile, f, level)
    if sigma == 0:
        return DiffusionState(mu, 0.0, level)
    eps = rng.standard_normal(x0.shape)
    if not via_bands:
        return DiffusionState(mu + sigma * eps, float(sigma), level)
    alphas = band_alphas(profile, level, t)
    xb = grid.laplacian_decompose(x0, len(alphas), f)
    eb = decompose_noise(eps, len(alphas), f)
    bands = tuple(a * xi + sigma * ei for a, xi, ei in zip(alphas, xb.bands, eb.bands))
    return DiffusionState(grid.laplacian_reconstruct(grid.Pyramid(bands, f)), float(sigma), level)


def decompose_noise(eps, K: int, f: int = 2) -> grid.Pyramid:
    """Laplacian pyramid of a noise field."""
    return grid.laplacian_decompose(eps, K, f)


def project_noise_down(eps_R, ratio: int) -> np.ndarray:
    """Low-resolution unit noise coupled to ``eps_R``: ``down(eps_R, ratio) * ratio``."""
    return grid.downsample(eps_R, ratio) * ratio


def _levels_between(ratio: int, f: int) -> int:
    n = round(math.log(ratio) / math.log(f))
    if n < 1 or f**n != ratio:
        raise ConfigError(f"switch ratio {ratio} is not a positive power of f={f}", key="ratio")
    return n


def switch_up(
    state: DiffusionState,
    ratio: int,
    rng: np.random.Generator | None = None,
    *,
    f: int | None = None,
    noise=None,
) -> tuple[DiffusionState, SwitchRecord]:
    """Lift a noisy state to a grid ``ratio`` times finer.

    Upsamples the state and adds the high-frequency part of fresh fine-grid
    noise, ``sigma * ratio * (eps - up(down(eps)))``, which turns the coarse
    noise into isotropic fine noise of std ``sigma * ratio``. ``noise`` pins
    the fresh draw (shape of the output); otherwise it comes from ``rng``.
    """
    f = ratio if f is None else f
    n = _levels_between(ratio, f)
    if state.sigma <= 0:
        raise ValueError("cannot switch a noiseless state; upsample it instead")
    to_level = state.level - n
    if to_level < 1:
        raise ConfigError(f"cannot switch from level {state.level} by ratio {ratio}", key="ratio")
    up = grid.upsample(state.field, ratio)
    if noise is None:
        if rng is None:
            raise ValueError("switch_up needs either rng or noise")
        noise = rng.standard_normal(up.shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != up.shape:
        raise DimensionError(f"switch noise has shape {noise.shape}, expected {up.shape}")
    high = noise - grid.upsample(grid.downsample(noise, ratio), ratio)
    sigma_after = state.sigma * ratio
    out = up + sigma_after * high
    record = SwitchRecord(state.level, to_level, state.sigma, sigma_after, ratio)
    return replace(state, field=out, sigma=sigma_after, level=to_level), record


def downsample_state(state: DiffusionState, f: int = 2) -> DiffusionState:
    """Average-pool a state one level coarser; sigma shrinks by f."""
    return replace(state, field=grid.downsample(state.field, f), sigma=state.sigma / f, level=state.level + 1)


def snr(
    state: DiffusionState,
    x0,
    profile: AttenuationProfile | None = None,
    f: int = 2,
    *,
    amplitude: bool = False,
) -> float:
    """Per-pixel signal power over noise power, ``|mu|^2 / (sigma^2 dim)``.

    ``x0`` must be given at the state's level. ``amplitude=True`` returns the
    square root, the ratio of RMS signal to noise std. Noiseless states give inf.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[-3:] != np.shape(state.field)[-3:]:
        raise DimensionError(f"x0 shape {x0.shape} does not match state {np.shape(state.field)}")
    if state.sigma == 0:
        return math.inf
    t = global_time(state.sigma, state.level, f)
    mu = forward_mean(x0, t, profile, f, state.level)
    power = float(np.mean(mu**2)) / state.sigma**2
    return math.sqrt(power) if amplitude else power
