"""x0-predicting denoisers and the tools around them.

Every denoiser is a callable ``D(x, sigma, level=1) -> x0_hat`` where ``x`` has
shape (..., C, H, W) at the given level and ``sigma`` is in that level's units.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg, special, stats

from lapdiff import grid
from lapdiff.errors import ConfigError, DimensionError, FormatError, RoutingError
from lapdiff.process import DiffusionState, band_alphas, global_time, level_scale, weighted_bands
from lapdiff.schedule import (
    AttenuationProfile,
    Precondition,
    TrainSigmaDist,
    precondition_coeffs,
)

Denoiser = Callable[..., np.ndarray]

# max elements of the (batch, atoms, pixels) difference tensor held at once
_CHUNK_ELEMS = 1 << 22


def _flatten(x, shape):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3:] != tuple(shape):
        raise DimensionError(f"input shape {x.shape[-3:]} does not match denoiser shape {tuple(shape)}")
    lead = x.shape[:-3]
    return x.reshape(-1, math.prod(shape)), lead


def _posterior_mean(xb, centers, logw, values, var):
    """Softmax-weighted average of ``values`` with logits ``logw - |x - c|^2 / (2 var)``.

    ``var`` may be a scalar or one value per center.
    """
    n = centers.shape[0]
    step = max(1, _CHUNK_ELEMS // max(1, n * xb.shape[1]))
    out = np.empty((xb.shape[0], values.shape[-1]))
    for s in range(0, xb.shape[0], step):
        xc = xb[s : s + step]
        d2 = np.sum((xc[:, None, :] - centers[None]) ** 2, axis=-1)
        logits = logw - d2 / (2.0 * var)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        v = values if values.ndim == 2 else values[s : s + step]
        # explicit reduction over atoms: per-row result independent of batch size
        out[s : s + step] = np.sum(w[:, :, None] * v, axis=1)
    return out


class DatasetOracle:
    """Exact posterior mean for a finite dataset under the (Laplacian) forward process.

    Args:
        points: array (n, C, H, W) of data atoms, uniformly weighted.
        profile: attenuation profile; ``None`` means the standard process.
        f: per-level resampling factor.
    """

    def __init__(self, points, profile: AttenuationProfile | None = None, f: int = 2):
        points = grid.as_field(points)
        if points.ndim != 4 or points.shape[0] < 1:
            raise DimensionError(f"dataset must have shape (n, C, H, W), got {points.shape}")
        self.profile = profile if profile is not None else AttenuationProfile.constant(1)
        self.f = f
        self.K = self.profile.K
        self.points = points
        pyr = grid.laplacian_decompose(points, self.K, f)
        self._atoms = {}
        self._bands = {}
        low = points
        for level in range(1, self.K + 1):
            self._atoms[level] = low.reshape(low.shape[0], -1)
            stack = []
            for i in range(level, self.K + 1):
                b = pyr.bands[i - 1]
                for _ in range(i - level):
                    b = grid.upsample(b, f)
                stack.append(b.reshape(b.shape[0], -1))
            self._bands[level] = np.stack(stack)
            if level < self.K:
                low = grid.downsample(low, f)
        self._shapes = {lv: (points.shape[1], points.shape[2] // f ** (lv - 1), points.shape[3] // f ** (lv - 1))
                        for lv in range(1, self.K + 1)}

    def __len__(self):
        return self.points.shape[0]

    def shape(self, level: int = 1):
        return self._shapes[level]

    def atoms(self, level: int = 1) -> np.ndarray:
        """Dataset points at ``level``'s resolution, shape (n, C, H_l, W_l)."""
        return self._atoms[level].reshape(-1, *self._shapes[level])

    def means(self, sigma: float, level: int = 1) -> np.ndarray:
        """Forward-process means mu(x_j, t) of every atom, flattened (n, dim)."""
        alphas = band_alphas(self.profile, level, global_time(sigma, level, self.f))
        if np.all(alphas == 1.0):
            return self._atoms[level]
        return np.tensordot(alphas, self._bands[level], axes=1)

    def __call__(self, x, sigma: float, level: int = 1) -> np.ndarray:
        if sigma <= 0:
            raise ValueError("posterior is a point mass at sigma=0; use x itself")
        if level not in self._shapes:
            raise DimensionError(f"level {level} outside 1..{self.K}")
        xb, lead = _flatten(x, self._shapes[level])
        out = _posterior_mean(xb, self.means(sigma, level), 0.0, self._atoms[level], sigma**2)
        return out.reshape(*lead, *self._shapes[level])


def mmse_denoise_empirical(o: DatasetOracle, state: DiffusionState) -> np.ndarray:
    return o(state.field, state.sigma, state.level)


class GmmOracle:
    """Posterior mean for an isotropic Gaussian mixture under the standard process.

    At level l the mixture is pushed through ``down^(l-1)``: means are pooled
    and variances shrink by ``f^(2(l-1))``.
    """

    def __init__(self, weights, means, variances, f: int = 2):
        weights = np.asarray(weights, dtype=np.float64)
        means = grid.as_field(means)
        variances = np.asarray(variances, dtype=np.float64)
        if means.ndim != 4 or weights.shape != (means.shape[0],) or variances.shape != weights.shape:
            raise DimensionError("GMM needs weights (k,), means (k, C, H, W), variances (k,)")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ConfigError("mixture weights must be positive and sum to 1", key="weights")
        if np.any(variances < 0):
            raise ConfigError("component variances must be non-negative", key="variances")
        self.weights, self.means, self.variances, self.f = weights, means, variances, f

    def shape(self, level: int = 1):
        c, h, w = self.means.shape[1:]
        s = level_scale(self.f, level)
        return (c, h // s, w // s)

    def _at_level(self, level):
        m = self.means
        for _ in range(level - 1):
            m = grid.downsample(m, self.f)
        return m.reshape(m.shape[0], -1), self.variances / level_scale(self.f, level) ** 2

    def __call__(self, x, sigma: float, level: int = 1) -> np.ndarray:
        if sigma <= 0:
            raise ValueError("posterior is a point mass at sigma=0; use x itself")
        shape = self.shape(level)
        xb, lead = _flatten(x, shape)
        m, v = self._at_level(level)
        s2 = sigma**2
        tot = v + s2
        logw = np.log(self.weights) - 0.5 * xb.shape[1] * np.log(tot)
        if np.all(v == 0):
            out = _posterior_mean(xb, m, logw, m, tot)
        else:
            # per-component posterior means depend on x, so blend them explicitly
            comp = (v[None, :, None] * xb[:, None, :] + s2 * m[None]) / tot[None, :, None]
            out = _posterior_mean(xb, m, logw, comp, tot)
        return out.reshape(*lead, *shape)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.weights), size=n, p=self.weights)
        noise = rng.standard_normal((n, *self.means.shape[1:]))
        return self.means[idx] + np.sqrt(self.variances[idx])[:, None, None, None] * noise


def mmse_denoise_gmm(o: GmmOracle, state: DiffusionState) -> np.ndarray:
    return o(state.field, state.sigma, state.level)


def score_from_denoiser(D_out, state: DiffusionState, alphas=None, f: int = 2) -> np.ndarray:
    """Score of the noisy marginal from an x0 prediction.

    Standard process: ``(D - x) / sigma^2``. With per-band ``alphas`` (bands
    ``level..K``) the prediction is attenuated band by band before the
    difference, i.e. ``(mu(D) - x) / sigma^2``.
    """
    if state.sigma <= 0:
        raise ValueError("score is undefined at sigma=0")
    D_out = np.asarray(D_out, dtype=np.float64)
    x = np.asarray(state.field, dtype=np.float64)
    if alphas is None or np.all(np.asarray(alphas) == 1.0):
        return (D_out - x) / state.sigma**2
    mean = weighted_bands(D_out, alphas, f)
    return (mean - x) / state.sigma**2


class MeanDenoiser:
    """Predicts the dataset mean regardless of input."""

    def __init__(self, points):
        self.mean = np.asarray(points, dtype=np.float64).mean(axis=0)

    def __call__(self, x, sigma, level=1):
        return np.broadcast_to(self.mean, np.shape(x)).copy()


class IdentityDenoiser:
    def __call__(self, x, sigma, level=1):
        return np.array(x, dtype=np.float64)


@dataclass
class LinearDenoiser:
    """Preconditioned affine denoiser, one map per sigma bucket.

    ``D(x) = c_skip x + c_out (W (c_in x) + b)`` with (W, b) chosen by the
    bucket containing sigma. Bucket j covers ``[edges[j], edges[j+1])``;
    queries outside all buckets use the nearest one.
    """

    edges: np.ndarray
    weights: np.ndarray
    offsets: np.ndarray
    shape: tuple
    sigma_data: float = 0.5
    ridge: np.ndarray = field(default=None)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.shape = tuple(int(s) for s in self.shape)
        d = math.prod(self.shape)
        nb = len(self.edges) - 1
        if self.weights.shape != (nb, d, d) or self.offsets.shape != (nb, d):
            raise DimensionError(f"expected {nb} maps of size {d}, got {self.weights.shape}, {self.offsets.shape}")
        if self.ridge is None:
            self.ridge = np.zeros(nb, dtype=bool)

    @property
    def n_buckets(self) -> int:
        return len(self.edges) - 1

    def bucket(self, sigma: float) -> int:
        j = int(np.searchsorted(self.edges, sigma, side="right")) - 1
        return min(max(j, 0), self.n_buckets - 1)

    def effective_map(self, sigma: float):
        """Return (M, c) with ``D(x) = M x + c`` at this sigma (flattened)."""
        j = self.bucket(sigma)
        c_skip, c_out, c_in, _ = precondition_coeffs(Precondition(self.sigma_data), sigma)
        M = c_skip * np.eye(self.weights.shape[1]) + c_out * c_in * self.weights[j]
        return M, c_out * self.offsets[j]

    def __call__(self, x, sigma: float, level: int = 1) -> np.ndarray:
        if level != 1:
            raise DimensionError("linear denoiser operates at level 1 only")
        xb, lead = _flatten(x, self.shape)
        j = self.bucket(sigma)
        c_skip, c_out, c_in, _ = precondition_coeffs(Precondition(self.sigma_data), sigma)
        f_x = (c_in * xb) @ self.weights[j].T + self.offsets[j]
        return (c_skip * xb + c_out * f_x).reshape(*lead, *self.shape)

    # Binary layout, little-endian:
    #   b"LDLIN1\0\0", int64 n_buckets, int64 C, int64 H, int64 W, float64 sigma_data,
    #   float64 edges[n_buckets + 1], uint8 ridge[n_buckets] (padded to 8 bytes),
    #   float64 W[n_buckets][d][d] row-major, float64 b[n_buckets][d]
    _MAGIC = b"LDLIN1\0\0"

    def to_bytes(self) -> bytes:
        nb = self.n_buckets
        ridge = np.zeros(-(-nb // 8) * 8, dtype=np.uint8)
        ridge[:nb] = self.ridge
        parts = [
            self._MAGIC,
            struct.pack("<4q", nb, *self.shape),
            struct.pack("<d", self.sigma_data),
            self.edges.astype("<f8").tobytes(),
            ridge.tobytes(),
            self.weights.astype("<f8").tobytes(),
            self.offsets.astype("<f8").tobytes(),
        ]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "LinearDenoiser":
        if data[:8] != cls._MAGIC:
            raise FormatError("not a linear denoiser dump")
        nb, c, h, w = struct.unpack_from("<4q", data, 8)
        (sd,) = struct.unpack_from("<d", data, 40)
        d = c * h * w
        off = 48
        edges = np.frombuffer(data, "<f8", nb + 1, off)
        off += 8 * (nb + 1)
        npad = -(-nb // 8) * 8
        ridge = np.frombuffer(data, np.uint8, nb, off).astype(bool)
        off += npad
        W = np.frombuffer(data, "<f8", nb * d * d, off).reshape(nb, d, d)
        off += 8 * nb * d * d
        b = np.frombuffer(data, "<f8", nb * d, off).reshape(nb, d)
        return cls(edges.copy(), W.copy(), b.copy(), (c, h, w), sd, ridge)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "LinearDenoiser":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def to_csv(self, path):
        """Human-readable dump: one row per (bucket, output pixel): lo, hi, offset, W row."""
        d = self.weights.shape[1]
        with open(path, "w") as fh:
            fh.write("bucket,sigma_lo,sigma_hi,row,offset," + ",".join(f"w{k}" for k in range(d)) + "\n")
            for j in range(self.n_buckets):
                for r in range(d):
                    vals = ",".join(repr(float(v)) for v in self.weights[j, r])
                    fh.write(f"{j},{self.edges[j]!r},{self.edges[j + 1]!r},{r},{float(self.offsets[j, r])!r},{vals}\n")


def default_buckets(n: int, dist: TrainSigmaDist = TrainSigmaDist()) -> np.ndarray:
    """Edges splitting the training sigma law into ``n`` equal-probability buckets."""
    if n < 1:
        raise ConfigError("need at least one bucket", key="buckets")
    q = special.ndtri(np.arange(1, n) / n)
    return np.concatenate([[0.0], np.exp(dist.p_mean + dist.p_std * q), [np.inf]])


def _bucket_sigmas(lo, hi, n, dist, rng):
    if dist.p_std <= 0:
        raise ConfigError("training needs p_std > 0", key="p_std")
    a = -np.inf if lo <= 0 else (math.log(lo) - dist.p_mean) / dist.p_std
    b = np.inf if math.isinf(hi) else (math.log(hi) - dist.p_mean) / dist.p_std
    z = stats.truncnorm.rvs(a, b, size=n, random_state=rng)
    return np.exp(dist.p_mean + dist.p_std * z)


RIDGE_SCALE = 1e-8


def _solve_normal(X, Y):
    A = X.T @ X
    rhs = X.T @ Y
    ridge = False
    try:
        if np.linalg.cond(A) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        sol = linalg.cho_solve(linalg.cho_factor(A), rhs)
    except (np.linalg.LinAlgError, linalg.LinAlgError):
        lam = RIDGE_SCALE * np.trace(A) / A.shape[0]
        sol = linalg.solve(A + lam * np.eye(A.shape[0]), rhs, assume_a="pos")
        ridge = True
    return sol, ridge


def train_linear(
    dataset,
    n_pairs: int,
    rng: np.random.Generator,
    buckets=1,
    dist: TrainSigmaDist = TrainSigmaDist(),
    precondition: Precondition = Precondition(),
) -> LinearDenoiser:
    """Least-squares fit of the preconditioned affine denoiser.

    Each bucket gets ``n_pairs // n_buckets`` pairs ``(x0 + sigma eps, x0)``
    with sigma drawn from the training law truncated to the bucket. Within a
    bucket the fit minimises the preconditioned loss
    ``|F(c_in x_t) - (x0 - c_skip x_t) / c_out|^2``.

    Args:
        dataset: array (n, C, H, W).
        buckets: number of equal-probability buckets, or explicit edges.
    """
    data = grid.as_field(dataset)
    if data.ndim != 4 or data.shape[0] < 1:
        raise DimensionError("dataset must have shape (n, C, H, W)")
    edges = default_buckets(buckets, dist) if np.ndim(buckets) == 0 else np.asarray(buckets, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ConfigError("bucket edges must be strictly increasing", key="buckets")
    nb = len(edges) - 1
    per = n_pairs // nb
    if per < 1:
        raise ConfigError(f"{n_pairs} pairs cannot fill {nb} buckets", key="pairs")
    flat = data.reshape(data.shape[0], -1)
    d = flat.shape[1]
    Ws, bs, ridges = [], [], []
    for j in range(nb):
        sig = _bucket_sigmas(edges[j], edges[j + 1], per, dist, rng)
        x0 = flat[rng.integers(0, flat.shape[0], size=per)]
        xt = x0 + sig[:, None] * rng.standard_normal((per, d))
        c_skip, c_out, c_in, _ = precondition_coeffs(precondition, sig)
        X = np.hstack([c_in[:, None] * xt, np.ones((per, 1))])
        Y = (x0 - c_skip[:, None] * xt) / c_out[:, None]
        sol, ridge = _solve_normal(X, Y)
        Ws.append(sol[:d].T)
        bs.append(sol[d])
        ridges.append(ridge)
    return LinearDenoiser(edges, np.stack(Ws), np.stack(bs), data.shape[1:], precondition.sigma_data, np.array(ridges))


def loss_samples(
    denoiser: Denoiser,
    dataset,
    sigma: float,
    n: int,
    rng: np.random.Generator,
    profile: AttenuationProfile | None = None,
    f: int = 2,
) -> np.ndarray:
    """Per-draw squared errors ``|D(x_t) - x0|^2`` at fixed sigma (finest level, t = sigma)."""
    if n < 1:
        raise ValueError("need at least one draw")
    data = grid.as_field(dataset)
    idx = rng.integers(0, data.shape[0], size=n)
    x0 = data[idx]
    eps = rng.standard_normal(x0.shape)
    mu = x0 if profile is None else weighted_bands(x0, band_alphas(profile, 1, sigma), f)
    xt = mu + sigma * eps
    err = denoiser(xt, sigma, 1) - x0
    return np.sum(err.reshape(n, -1) ** 2, axis=1)


def eval_loss(denoiser, dataset, sigma, n, rng, profile=None, f=2) -> float:
    """Monte-Carlo estimate of the denoising loss at a fixed noise level."""
    return float(np.mean(loss_samples(denoiser, dataset, sigma, n, rng, profile, f)))


@dataclass(frozen=True)
class Expert:
    """A denoiser valid at one level for sigma in ``(sigma_lo, sigma_hi]`` (level units).

    An expert starting at 0 also covers sigma = 0.
    """

    denoiser: Denoiser
    level: int
    sigma_lo: float = 0.0
    sigma_hi: float = math.inf

    def covers(self, level: int, sigma: float) -> bool:
        if level != self.level:
            return False
        if sigma == 0 and self.sigma_lo == 0:
            return True
        return self.sigma_lo < sigma <= self.sigma_hi


class ExpertRouter:
    """Dispatch to the unique expert responsible for a (level, sigma) query.

    Ranges are half-open at the bottom, so a query sitting exactly on the
    boundary between two experts of one level goes to the lower-noise one.
    """

    def __init__(self, experts: Sequence[Expert]):
        self.experts = list(experts)
        if not self.experts:
            raise ConfigError("router needs at least one expert", key="experts")
        for i, a in enumerate(self.experts):
            if not a.sigma_lo < a.sigma_hi:
                raise ConfigError(f"expert {i} has an empty sigma range", key="experts")
            for b in self.experts[i + 1 :]:
                if a.level == b.level and a.sigma_lo < b.sigma_hi and b.sigma_lo < a.sigma_hi:
                    raise ConfigError(f"experts overlap at level {a.level}", key="experts")

    def route(self, level: int, sigma: float) -> Denoiser:
        hits = [e for e in self.experts if e.covers(level, sigma)]
        if not hits:
            raise RoutingError(f"no expert covers level {level} at sigma {sigma}")
        return hits[0].denoiser

    def covers_span(self, level: int, sigma_hi: float, sigma_lo: float) -> Denoiser:
        """Expert for a whole stage ``[sigma_lo, sigma_hi]``; raises if none covers both ends."""
        d = self.route(level, sigma_hi)
        if self.route(level, sigma_lo) is not d:
            raise RoutingError(f"stage at level {level} spans more than one expert")
        return d

    def __call__(self, x, sigma, level=1):
        return self.route(level, sigma)(x, sigma, level)

    @classmethod
    def staged(cls, denoisers: dict, profile: AttenuationProfile, f: int = 2) -> "ExpertRouter":
        """One expert per level: level l is valid up to band l's extinction time (level units)."""
        experts = []
        for level, den in sorted(denoisers.items()):
            hi = profile.extinction(level) / level_scale(f, level)
            experts.append(Expert(den, level, 0.0, hi))
        return cls(experts)
