"""Self-checks for the numerical engine, one per headline property.

Each check returns a list of :class:`Result` rows. ``run`` executes a
selection and applies tolerance overrides; the ``verify`` subcommand and the
acceptance tests are thin wrappers around it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from lapdiff import grid
from lapdiff.denoiser import (
    DatasetOracle,
    GmmOracle,
    IdentityDenoiser,
    MeanDenoiser,
    loss_samples,
    score_from_denoiser,
    train_linear,
)
from lapdiff.process import (
    DiffusionState,
    band_alphas,
    chain_rng,
    forward_mean,
    global_time,
    project_noise_down,
    switch_up,
)
from lapdiff.sampler import SamplerConfig, Stage, default_stage_plan, reference_edm_sample, sample_cascade
from lapdiff.schedule import AttenuationProfile, SigmaSchedule, time_grid
from lapdiff.denoiser import ExpertRouter


@dataclass(frozen=True)
class Result:
    name: str
    value: float
    lo: float = -math.inf
    hi: float = math.inf

    @property
    def passed(self) -> bool:
        return bool(self.lo <= self.value <= self.hi)

    def tolerance(self) -> str:
        if self.lo == -math.inf:
            return f"<= {self.hi:.6g}"
        if self.hi == math.inf:
            return f">= {self.lo:.6g}"
        return f"[{self.lo:.6g}, {self.hi:.6g}]"

    def line(self) -> str:
        return f"{self.name}\t{self.value:.6g}\t{self.tolerance()}\t{'PASS' if self.passed else 'FAIL'}"


def _rel(a, b) -> float:
    den = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / den) if den > 0 else float(np.linalg.norm(a - b))


def check_pyramid(seed: int = 0) -> list:
    """reconstruct(decompose(x)) on 200 random fields."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        K = int(rng.integers(1, 4))
        f = int(rng.choice([2, 4]))
        unit = f ** (K - 1)
        sizes = [s for s in range(4, 65) if s % unit == 0] or [unit]
        h, w = int(rng.choice(sizes)), int(rng.choice(sizes))
        x = rng.standard_normal((int(rng.integers(1, 4)), h, w)) * rng.uniform(0.1, 10)
        worst = max(worst, _rel(grid.laplacian_reconstruct(grid.laplacian_decompose(x, K, f)), x))
    elapsed = time.perf_counter() - start
    return [Result("pyramid.roundtrip_rel_err", worst, hi=1e-12), Result("pyramid.runtime_s", elapsed, hi=5.0)]


def check_haar(seed: int = 0) -> list:
    """2-level Haar shape, inverse and norm preservation."""
    rng = np.random.default_rng(seed)
    shape_bad, rt, nrm = 0, 0.0, 0.0
    for _ in range(50):
        h, w = 4 * int(rng.integers(1, 17)), 4 * int(rng.integers(1, 17))
        x = rng.standard_normal((3, h, w))
        y = grid.haar_forward_2level(x)
        shape_bad += y.shape != (48, h // 4, w // 4)
        rt = max(rt, _rel(grid.haar_inverse_2level(y), x))
        nrm = max(nrm, abs(np.sum(y**2) - np.sum(x**2)) / np.sum(x**2))
    return [
        Result("haar.shape_mismatches", shape_bad, hi=0),
        Result("haar.roundtrip_rel_err", rt, hi=1e-12),
        Result("haar.norm_rel_err", nrm, hi=1e-12),
    ]


def check_pooled_noise(seed: int = 0) -> list:
    """Std of 2 * down(eps, 2) over 10^6 pooled pixels."""
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((1, 2000, 2000))
    pooled = 2.0 * grid.downsample(eps, 2)
    return [Result("pooled_noise.std_rel_dev", abs(float(np.std(pooled)) - 1.0), hi=0.01)]


def check_switch_identity(seed: int = 0) -> list:
    """Switch with coupled noises equals up(x_r) + sigma * ratio * eps_R."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for ratio in (2, 4):
        for _ in range(100):
            c = int(rng.integers(1, 4))
            h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            x_r = rng.standard_normal((c, h, w))
            sigma = float(np.exp(rng.uniform(-3, 3)))
            eps_R = rng.standard_normal((c, h * ratio, w * ratio))
            eps_r = project_noise_down(eps_R, ratio)
            state = DiffusionState(x_r + sigma * eps_r, sigma, 2)
            out, rec = switch_up(state, ratio, noise=eps_R)
            target = grid.upsample(x_r, ratio) + sigma * ratio * eps_R
            worst = max(worst, _rel(out.field, target))
            if rec.sigma_after != sigma * ratio:
                worst = math.inf
    return [Result("switch.identity_rel_err", worst, hi=1e-12)]


def check_edm_reduction(seed: int = 0) -> list:
    """Single-stage cascade is bit-identical to the reference sampler."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    for k in range(10):
        for integrator in ("euler", "heun"):
            K = int(rng.integers(1, 4))
            t_star = np.sort(rng.uniform(0.5, 5.0, K - 1))
            profile = AttenuationProfile(tuple(t_star))
            shape = (int(rng.integers(1, 3)), 4 * 2 ** (K - 1), 4 * 2 ** (K - 1))
            atoms = rng.uniform(-1, 1, (int(rng.integers(2, 6)), *shape))
            oracle = DatasetOracle(atoms, profile)
            steps = int(rng.integers(4, 20))
            smax = float(rng.uniform(5, 80))
            rho = float(rng.uniform(1, 8))
            cfg = SamplerConfig(
                (Stage(K, smax, 0.0, steps, oracle),), shape, integrator, profile, rho=rho
            )
            chains = np.arange(6)
            traj = sample_cascade(cfg, seed + k, chains=chains)
            sigmas = time_grid(SigmaSchedule(0.002, smax, rho), steps)
            ref = reference_edm_sample(oracle, cfg.level_shape(K), sigmas, seed + k, chains, integrator, level=K)
            mismatches += int(not np.array_equal(traj.final, ref))
    return [Result("edm_reduction.mismatched_configs", mismatches, hi=0)]


def exact_log_density(x, atoms, sigma, profile=None, f=2, level=1) -> float:
    """log p_t(x) for uniformly weighted atoms under the forward process, via logsumexp."""
    t = global_time(sigma, level, f)
    mus = np.stack([forward_mean(a, t, profile, f, level) for a in atoms]).reshape(len(atoms), -1)
    xv = np.asarray(x).reshape(-1)
    d = xv.size
    logk = -np.sum((xv - mus) ** 2, axis=1) / (2 * sigma**2) - 0.5 * d * math.log(2 * math.pi * sigma**2)
    return float(logsumexp(logk) - math.log(len(atoms)))


def fd_gradient(fn, x, h):
    """Fourth-order central differences of a scalar function, coordinate by coordinate."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    flat = g.reshape(-1)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        e = e.reshape(x.shape)
        flat[i] = (-fn(x + 2 * e) + 8 * fn(x + e) - 8 * fn(x - e) + fn(x - 2 * e)) / (12 * h)
    return g


def check_score(seed: int = 0) -> list:
    """Tweedie score from the dataset oracle vs finite differences of log p_t."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for probe in range(50):
        laplacian = probe % 2 == 1
        if laplacian:
            profile, f = AttenuationProfile((float(rng.uniform(0.5, 3.0)),)), 2
            shape = (1, 4, 4)
        else:
            profile, f = None, 2
            side = int(rng.integers(1, 5))
            shape = (1, side, side)
        atoms = rng.uniform(-1, 1, (int(rng.integers(1, 9)), *shape))
        sigma = float(np.exp(rng.uniform(np.log(0.2), np.log(3.0))))
        oracle = DatasetOracle(atoms, profile, f)
        x = atoms[rng.integers(len(atoms))] + sigma * rng.standard_normal(shape)
        state = DiffusionState(x, sigma, 1)
        alphas = None if profile is None else band_alphas(profile, 1, sigma)
        score = score_from_denoiser(oracle(x, sigma), state, alphas, f)
        fd = fd_gradient(lambda z: exact_log_density(z, atoms, sigma, profile, f), x, 1e-3 * sigma)
        worst = max(worst, _rel(score, fd))
    return [Result("score.fd_rel_err", worst, hi=1e-5)]


def check_mmse(seed: int = 0) -> list:
    """MMSE loss is no worse than linear / mean / identity, within 2 paired SE."""
    rng = np.random.default_rng(seed)
    worst = -math.inf
    for k in range(20):
        n = int(rng.integers(2, 17))
        shape = (1, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        data = rng.uniform(-1, 1, (n, *shape)) * rng.uniform(0.5, 2)
        rivals = {
            "linear": train_linear(data, 20000, np.random.default_rng(seed + 1000 + k), buckets=8),
            "mean": MeanDenoiser(data),
            "identity": IdentityDenoiser(),
        }
        mmse = DatasetOracle(data)
        for sigma in (0.1, 0.5, 1.0, 5.0):
            draw_seed = seed + 7919 * (k + 1) + int(sigma * 100)
            base = loss_samples(mmse, data, sigma, 4000, np.random.default_rng(draw_seed))
            for rival in rivals.values():
                other = loss_samples(rival, data, sigma, 4000, np.random.default_rng(draw_seed))
                diff = base - other
                se = np.std(diff, ddof=1) / math.sqrt(len(diff))
                z = np.mean(diff) / se if se > 0 else (0.0 if np.mean(diff) <= 0 else math.inf)
                worst = max(worst, float(z))
    return [Result("mmse.max_excess_over_se", worst, hi=2.0)]


def _gaussian_endpoint_error(integrator, steps, chains=64, seed=0):
    v = 1.0
    oracle = GmmOracle([1.0], np.zeros((1, 1, 1, 1)), [v])
    smax = 80.0
    cfg = SamplerConfig((Stage(1, smax, 0.0, steps, oracle),), (1, 1, 1), integrator)
    traj = sample_cascade(cfg, seed, chains)
    start = np.stack([chain_rng(seed, c, 1).standard_normal((1, 1, 1)) for c in range(chains)]) * smax
    exact = start * math.sqrt(v / (v + smax**2))
    return float(np.sqrt(np.mean((traj.final - exact) ** 2)))


def check_convergence(seed: int = 0) -> list:
    """Error ratio when doubling steps on N(0, I) data (exact ODE solution known)."""
    rows = []
    for integ, lo, hi in (("heun", 3.0, 5.0), ("euler", 1.7, 2.4)):
        e1 = _gaussian_endpoint_error(integ, 16, seed=seed)
        e2 = _gaussian_endpoint_error(integ, 32, seed=seed)
        rows.append(Result(f"convergence.{integ}_ratio", e1 / e2, lo, hi))
    return rows


def check_mode_recovery(seed: int = 0) -> list:
    """Two-point data, 36 Heun steps, 10^4 chains."""
    start = time.perf_counter()
    oracle = DatasetOracle(np.array([-1.0, 1.0]).reshape(2, 1, 1, 1))
    cfg = SamplerConfig((Stage(1, 80.0, 0.0, 36, oracle),), (1, 1, 1), "heun")
    x = sample_cascade(cfg, seed, 10_000).final.reshape(-1)
    elapsed = time.perf_counter() - start
    near = np.minimum(np.abs(x - 1), np.abs(x + 1)) <= 1e-3
    return [
        Result("mode_recovery.mass_imbalance", abs(float(np.mean(x > 0)) - 0.5), hi=0.015),
        Result("mode_recovery.fraction_near_atom", float(np.mean(near)), lo=0.99),
        Result("mode_recovery.runtime_s", elapsed, hi=30.0),
    ]


def synthetic_images(n: int = 4, size: int = 32) -> np.ndarray:
    """Four structured test images in [-1, 1] with distinct coarse content."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    imgs = [
        0.8 * np.sign(np.sin(4 * np.pi * xx) * np.sin(4 * np.pi * yy)),
        2.0 * np.exp(-((xx - 0.3) ** 2 + (yy - 0.6) ** 2) / 0.05) - 1.0,
        1.6 * xx - 0.8,
        (1.6 * yy - 0.8) * np.cos(6 * xx),
    ]
    return np.stack(imgs[:n])[:, None]


def _moment_z(a, b):
    n1, n2 = len(a), len(b)
    m_z = np.abs(a.mean(0) - b.mean(0)) / np.sqrt(a.var(0, ddof=1) / n1 + b.var(0, ddof=1) / n2)

    def var_se2(x):
        c = x - x.mean(0)
        return (np.mean(c**4, 0) - np.mean(c**2, 0) ** 2) / len(x)

    v_z = np.abs(a.var(0, ddof=1) - b.var(0, ddof=1)) / np.sqrt(var_se2(a) + var_se2(b))
    return float(np.nanmax(m_z)), float(np.nanmax(v_z))


def check_cascade(seed: int = 0, chains: int = 2000) -> list:
    """Down^2 of 8->16->32 cascade samples vs coarsest-only samples."""
    profile = AttenuationProfile((1.0, 4.0))
    oracle = DatasetOracle(synthetic_images(), profile)
    router = ExpertRouter.staged({1: oracle, 2: oracle, 3: oracle}, profile)
    cfg = SamplerConfig(default_stage_plan(profile, 80.0, [32, 24, 24]), (1, 32, 32), profile=profile, router=router)
    full = sample_cascade(cfg, seed, chains).final
    coarse_cfg = replace(cfg, stages=(Stage(3, 80.0, 0.0, 32),))
    coarse = sample_cascade(coarse_cfg, seed + 1, chains).final
    low = grid.downsample(grid.downsample(full))
    with np.errstate(invalid="ignore", divide="ignore"):
        mz, vz = _moment_z(low.reshape(chains, -1), coarse.reshape(chains, -1))
    return [Result("cascade.mean_max_z", mz, hi=3.0), Result("cascade.var_max_z", vz, hi=3.0)]


def check_wiener(seed: int = 0) -> list:
    """Linear fit on N(0, 0.25 I) recovers v / (v + sigma^2)."""
    rng = np.random.default_rng(seed)
    v = 0.25
    data = math.sqrt(v) * rng.standard_normal((100_000, 1, 2, 2))
    model = train_linear(data, 100_000, rng, buckets=1)
    worst = 0.0
    for sigma in (0.25, 0.5, 1.0):
        M, c = model.effective_map(sigma)
        target = v / (v + sigma**2)
        worst = max(worst, float(np.max(np.abs(np.diag(M) - target)) / target))
    return [Result("wiener.coef_rel_err", worst, hi=0.02)]


CHECKS = {
    "pyramid": check_pyramid,
    "haar": check_haar,
    "pooled_noise": check_pooled_noise,
    "switch": check_switch_identity,
    "edm_reduction": check_edm_reduction,
    "score": check_score,
    "mmse": check_mmse,
    "convergence": check_convergence,
    "mode_recovery": check_mode_recovery,
    "cascade": check_cascade,
    "wiener": check_wiener,
}


def parse_override(text: str):
    """``name=hi`` or ``name=lo:hi`` -> (name, lo, hi); empty bounds stay open."""
    name, _, tol = text.partition("=")
    if not name or not tol:
        raise ValueError(f"bad tolerance override {text!r}; expected NAME=HI or NAME=LO:HI")
    if ":" in tol:
        lo, hi = tol.split(":", 1)
        return name, float(lo) if lo else None, float(hi) if hi else None
    return name, None, float(tol)


def run(selectors=None, overrides=(), seed: int = 0, emit=None) -> list:
    """Run the selected checks (all when empty); ``emit`` receives each row as it completes."""
    names = list(CHECKS) if not selectors else list(selectors)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown checks {unknown}; available: {list(CHECKS)}")
    table = {}
    for text in overrides:
        name, lo, hi = parse_override(text)
        table[name] = (lo, hi)
    rows = []
    for name in names:
        for row in CHECKS[name](seed):
            if row.name in table:
                lo, hi = table[row.name]
                row = replace(row, lo=row.lo if lo is None else lo, hi=row.hi if hi is None else hi)
            rows.append(row)
            if emit is not None:
                emit(row)
    return rows
