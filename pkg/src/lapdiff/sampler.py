"""Probability-flow ODE sampling across resolution levels.

Within a stage at level l the state is integrated in that level's sigma
(``t = sigma * f^(l-1)``). Band i of the state evolves as

    dx_i/dsigma = (alpha_i'/alpha_i) x_i - sigma (alpha_i - alpha_i' sigma)/alpha_i * score_i

which, with the score written through an x0 prediction D, is the same as

    dx_i/dsigma = (x_i - alpha_i D_i) / sigma + alpha_i' D_i.

The second form has no 1/alpha and stays finite at the moment a band is
switched in with alpha = 0, so the integrator uses it; :func:`ode_drift`
evaluates the first form directly.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from lapdiff import grid
from lapdiff.denoiser import Denoiser, ExpertRouter
from lapdiff.errors import ConfigError
from lapdiff.process import (
    DiffusionState,
    SwitchRecord,
    band_alpha_derivs,
    band_alphas,
    chain_rng,
    global_time,
    level_scale,
    switch_up,
    weighted_bands,
)
from lapdiff.schedule import AttenuationProfile, SigmaSchedule, span_grid, time_grid

INTEGRATORS = ("euler", "heun")


def ode_drift(state: DiffusionState, score, alphas=None, alpha_derivs=None, f: int = 2) -> np.ndarray:
    """dx/dsigma from the score, band by band, for bands ``level..K``.

    Raises ConfigError if a represented band has alpha = 0.
    """
    x = np.asarray(state.field, dtype=np.float64)
    score = np.asarray(score, dtype=np.float64)
    s = state.sigma
    if s <= 0:
        raise ValueError("drift is undefined at sigma=0")
    if alphas is None:
        return -s * score
    alphas = np.asarray(alphas, dtype=np.float64)
    derivs = np.zeros_like(alphas) if alpha_derivs is None else np.asarray(alpha_derivs, dtype=np.float64)
    if np.any(alphas == 0):
        raise ConfigError("a represented band has alpha = 0; it should have been dropped", key="alphas")
    if np.all(alphas == 1.0) and np.all(derivs == 0.0):
        return -s * score
    K = len(alphas)
    xb = grid.laplacian_decompose(x, K, f)
    sb = grid.laplacian_decompose(score, K, f)
    bands = tuple(
        (d / a) * xi - s * (a - d * s) / a * si for a, d, xi, si in zip(alphas, derivs, xb.bands, sb.bands)
    )
    return grid.laplacian_reconstruct(grid.Pyramid(bands, f))


def denoised_drift(x, denoised, sigma: float, alphas=None, alpha_derivs=None, f: int = 2) -> np.ndarray:
    """dx/dsigma from an x0 prediction; equals :func:`ode_drift` wherever both are defined."""
    plain = alphas is None or np.all(np.asarray(alphas) == 1.0)
    moving = alpha_derivs is not None and np.any(np.asarray(alpha_derivs) != 0.0)
    if plain and not moving:
        return (x - denoised) / sigma
    p = grid.laplacian_decompose(denoised, len(alphas), f)
    mean = denoised if plain else grid.laplacian_reconstruct(p.map(lambda i, b: alphas[i] * b))
    d = (x - mean) / sigma
    if moving:
        d = d + grid.laplacian_reconstruct(p.map(lambda i, b: alpha_derivs[i] * b))
    return d


@dataclass(frozen=True)
class Stage:
    """One leg of a cascade: integrate at ``level`` from sigma_entry to sigma_exit (level units)."""

    level: int
    sigma_entry: float
    sigma_exit: float
    steps: int
    denoiser: Denoiser | None = None


@dataclass(frozen=True)
class SamplerConfig:
    """A validated stage plan.

    ``shape`` is the (C, H, W) of the finest grid (level 1). Stages run from
    coarse to fine; between stages the state is lifted by ``switch_up``.
    Stages without their own denoiser are served by ``router``.
    """

    stages: tuple
    shape: tuple
    integrator: str = "heun"
    profile: AttenuationProfile | None = None
    f: int = 2
    churn: float = 0.0
    rho: float = 7.0
    sigma_min: float = 0.002
    router: ExpertRouter | None = None

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        self.validate()

    @property
    def K(self) -> int:
        return 1 if self.profile is None else self.profile.K

    def level_shape(self, level: int) -> tuple:
        s = level_scale(self.f, level)
        c, h, w = self.shape
        if h % s or w % s:
            raise ConfigError(f"shape {self.shape} not divisible at level {level}", key="shape")
        return (c, h // s, w // s)

    def validate(self):
        if self.integrator not in INTEGRATORS:
            raise ConfigError(f"unknown integrator {self.integrator!r}", key="integrator")
        if self.churn < 0:
            raise ConfigError("churn must be non-negative", key="churn")
        if not self.stages:
            raise ConfigError("stage plan is empty", key="stages")
        for j, st in enumerate(self.stages):
            key = f"stages[{j}]"
            if not 1 <= st.level <= self.K:
                raise ConfigError(f"level {st.level} outside 1..{self.K}", key=key)
            if not st.sigma_entry > st.sigma_exit >= 0:
                raise ConfigError(f"need sigma_entry > sigma_exit >= 0, got {st.sigma_entry}, {st.sigma_exit}", key=key)
            if int(st.steps) != st.steps or st.steps < 1:
                raise ConfigError(f"steps must be a positive integer, got {st.steps}", key=key)
            if st.sigma_exit == 0 and not self.sigma_min < st.sigma_entry:
                raise ConfigError("sigma_min must lie below sigma_entry", key=key)
            self.level_shape(st.level)
            if st.denoiser is None:
                if self.router is None:
                    raise ConfigError("stage has no denoiser and no router is configured", key=key)
                self.router.covers_span(st.level, st.sigma_entry, st.sigma_exit)
        for j, (a, b) in enumerate(zip(self.stages, self.stages[1:])):
            key = f"stages[{j + 1}]"
            if b.level >= a.level:
                raise ConfigError("stages must move to strictly finer levels", key=key)
            if a.sigma_exit == 0:
                raise ConfigError("only the last stage may end at sigma 0", key=key)
            ratio = self.f ** (a.level - b.level)
            if not math.isclose(a.sigma_exit * ratio, b.sigma_entry, rel_tol=1e-12):
                raise ConfigError(
                    f"disconnected: exit {a.sigma_exit} x {ratio} != entry {b.sigma_entry}", key=key
                )
        if self.stages[-1].sigma_exit != 0:
            raise ConfigError("the last stage must end at sigma 0", key="stages")

    def grid(self, stage: Stage) -> np.ndarray:
        if stage.sigma_exit == 0:
            return time_grid(SigmaSchedule(self.sigma_min, stage.sigma_entry, self.rho), stage.steps)
        return span_grid(stage.sigma_entry, stage.sigma_exit, stage.steps, self.rho)

    def denoiser_for(self, stage: Stage) -> Denoiser:
        if stage.denoiser is not None:
            return stage.denoiser
        return self.router.covers_span(stage.level, stage.sigma_entry, stage.sigma_exit)


def default_stage_plan(
    profile: AttenuationProfile,
    sigma_max: float,
    steps,
    f: int = 2,
    finest_level: int = 1,
) -> tuple:
    """Stages from the coarsest level down to ``finest_level``.

    The stage at level l < K begins at band l's extinction time; the coarsest
    stage begins at ``sigma_max`` in its own units.
    """
    K = profile.K
    levels = list(range(K, finest_level - 1, -1))
    steps = [steps] * len(levels) if np.ndim(steps) == 0 else list(steps)
    if len(steps) != len(levels):
        raise ConfigError(f"expected {len(levels)} step counts, got {len(steps)}", key="steps")
    entries = [sigma_max] + [profile.extinction(lv) / level_scale(f, lv) for lv in levels[1:]]
    exits = [e / f for e in entries[1:]] + [0.0]
    if not entries[0] > exits[0]:
        raise ConfigError("sigma_max must exceed the first switch level", key="sigma_max")
    return tuple(Stage(lv, en, ex, n) for lv, en, ex, n in zip(levels, entries, exits, steps))


@dataclass
class TrajectoryPoint:
    step: int
    sigma: float
    level: int
    norms: np.ndarray
    field: np.ndarray | None = None


@dataclass
class Trajectory:
    points: list = field(default_factory=list)
    switches: list = field(default_factory=list)
    final: np.ndarray | None = None
    chains: np.ndarray | None = None

    def to_csv(self, path, chain: int = 0, atoms: dict | None = None):
        """Write (step, sigma, level, field norm, distance to nearest atom) for one chain.

        ``atoms`` maps level -> array (n, C, H, W); distances need kept fields.
        """
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "sigma", "level", "field_norm", "dist_nearest_atom"])
            for p in self.points:
                dist = ""
                if atoms is not None and p.field is not None and p.level in atoms:
                    a = atoms[p.level].reshape(len(atoms[p.level]), -1)
                    x = p.field[chain].reshape(-1)
                    dist = repr(float(np.sqrt(np.min(np.sum((a - x) ** 2, axis=1)))))
                w.writerow([p.step, repr(float(p.sigma)), p.level, repr(float(p.norms[chain])), dist])


def _norms(x):
    return np.sqrt(np.sum(x.reshape(x.shape[0], -1) ** 2, axis=1))


def _alphas(cfg: SamplerConfig, sigma: float, level: int):
    if cfg.profile is None:
        return None, None
    t = global_time(sigma, level, cfg.f)
    return band_alphas(cfg.profile, level, t), band_alpha_derivs(cfg.profile, level, t, cfg.f)


def integrate_stage(
    state: DiffusionState,
    cfg: SamplerConfig,
    denoiser: Denoiser,
    sigmas,
    rngs=None,
    keep_fields: bool = False,
    step0: int = 0,
):
    """Integrate a batch of chains along ``sigmas`` at ``state.level``.

    Euler: ``x += h * d``. Heun adds a trapezoidal correction using a second
    evaluation at the next level, skipped when that level is 0. With churn,
    each step first raises sigma by a factor (1 + gamma) with fresh noise
    drawn from ``rngs`` (one generator per chain).

    Returns the final state and the list of visited TrajectoryPoints.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    level = state.level
    x = state.field
    points = [TrajectoryPoint(step0, float(sigmas[0]), level, _norms(x), x.copy() if keep_fields else None)]
    n = len(sigmas) - 1
    gamma = min(cfg.churn / n, math.sqrt(2.0) - 1.0) if cfg.churn > 0 else 0.0

    def drift(xv, s):
        a, da = _alphas(cfg, s, level)
        return denoised_drift(xv, denoiser(xv, s, level), s, a, da, cfg.f)

    for i in range(n):
        cur, nxt = float(sigmas[i]), float(sigmas[i + 1])
        if gamma > 0:
            hat = cur * (1.0 + gamma)
            eps = np.stack([r.standard_normal(x.shape[1:]) for r in rngs])
            x = x + math.sqrt(hat**2 - cur**2) * eps
            cur = hat
        d = drift(x, cur)
        x_next = x + (nxt - cur) * d
        if cfg.integrator == "heun" and nxt != 0:
            d2 = drift(x_next, nxt)
            x_next = x + (nxt - cur) * (0.5 * d + 0.5 * d2)
        x = x_next
        points.append(TrajectoryPoint(step0 + i + 1, nxt, level, _norms(x), x.copy() if keep_fields else None))
    return DiffusionState(x, float(sigmas[-1]), level, state.stream), points


def _run_chains(cfg: SamplerConfig, seed: int, chains, keep_fields: bool) -> Trajectory:
    first = cfg.stages[0]
    shape = cfg.level_shape(first.level)
    rngs = [chain_rng(seed, c, first.level) for c in chains]
    noise = np.stack([r.standard_normal(shape) for r in rngs])
    state = DiffusionState(noise * first.sigma_entry, first.sigma_entry, first.level, seed)
    traj = Trajectory(chains=np.asarray(chains))
    step = 0
    for j, stage in enumerate(cfg.stages):
        if j > 0:
            ratio = cfg.f ** (state.level - stage.level)
            rngs = [chain_rng(seed, c, stage.level) for c in chains]
            up_shape = cfg.level_shape(stage.level)
            fresh = np.stack([r.standard_normal(up_shape) for r in rngs])
            state, rec = switch_up(state, ratio, f=cfg.f, noise=fresh)
            traj.switches.append(rec)
        sig = cfg.grid(stage)
        state, pts = integrate_stage(state, cfg, cfg.denoiser_for(stage), sig, rngs, keep_fields, step)
        traj.points.extend(pts)
        step = pts[-1].step
    traj.final = state.field
    return traj


def _merge(parts) -> Trajectory:
    if len(parts) == 1:
        return parts[0]
    out = Trajectory(switches=parts[0].switches)
    for pts in zip(*(p.points for p in parts)):
        fields = None if pts[0].field is None else np.concatenate([p.field for p in pts])
        out.points.append(
            TrajectoryPoint(pts[0].step, pts[0].sigma, pts[0].level, np.concatenate([p.norms for p in pts]), fields)
        )
    out.final = np.concatenate([p.final for p in parts])
    out.chains = np.concatenate([p.chains for p in parts])
    return out


def sample_cascade(
    cfg: SamplerConfig,
    seed: int,
    n_chains: int = 1,
    *,
    chains=None,
    threads: int = 1,
    keep_fields: bool = False,
) -> Trajectory:
    """Run the stage plan for many chains; output depends only on (cfg, seed, chains).

    Chain c draws its starting noise and any churn noise at level l from the
    stream ``(seed, c, l)``, and its switch noise into level l from the same
    stream, so the split across threads never changes the numbers.
    """
    chains = np.arange(n_chains) if chains is None else np.asarray(chains)
    threads = max(1, min(int(threads), len(chains)))
    parts = np.array_split(chains, threads)
    if threads == 1:
        return _run_chains(cfg, seed, parts[0], keep_fields)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(lambda c: _run_chains(cfg, seed, c, keep_fields), parts))
    return _merge(results)


def reference_edm_sample(
    denoiser: Denoiser,
    shape,
    sigmas,
    seed: int,
    chains,
    integrator: str = "heun",
    level: int = 1,
) -> np.ndarray:
    """Plain single-resolution Euler/Heun sampler, kept free of pyramid machinery.

    Starting noise for chain c comes from stream ``(seed, c, level)``.
    """
    if integrator not in INTEGRATORS:
        raise ConfigError(f"unknown integrator {integrator!r}", key="integrator")
    sigmas = np.asarray(sigmas, dtype=np.float64)
    x = np.stack([chain_rng(seed, c, level).standard_normal(tuple(shape)) for c in chains]) * sigmas[0]
    for i in range(len(sigmas) - 1):
        s, s_next = float(sigmas[i]), float(sigmas[i + 1])
        d = (x - denoiser(x, s, level)) / s
        x_next = x + (s_next - s) * d
        if integrator == "heun" and s_next != 0:
            d2 = (x_next - denoiser(x_next, s_next, level)) / s_next
            x_next = x + (s_next - s) * (0.5 * d + 0.5 * d2)
        x = x_next
    return x
