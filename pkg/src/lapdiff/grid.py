"""Resolution-changing operators and the Laplacian pyramid.

Fields are float64 arrays whose last three axes are (channels, height, width).
Any leading axes are treated as batch axes and carried through unchanged, so a
stack of independent chains can be resampled in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lapdiff.errors import DimensionError

__all__ = [
    "Pyramid",
    "as_field",
    "downsample",
    "upsample",
    "laplacian_decompose",
    "laplacian_reconstruct",
    "haar_forward",
    "haar_inverse",
    "haar_forward_2level",
    "haar_inverse_2level",
]


def as_field(x, *, copy: bool = False) -> np.ndarray:
    """Validate and convert ``x`` to a float64 field of shape (..., C, H, W)."""
    arr = np.array(x, dtype=np.float64, copy=copy) if copy else np.asarray(x, dtype=np.float64)
    if arr.ndim < 3:
        raise DimensionError(f"field must have at least 3 axes (C, H, W), got shape {arr.shape}")
    if min(arr.shape[-3:]) < 1:
        raise DimensionError(f"field axes must be positive, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("field contains non-finite values")
    return arr


def _check_factor(f: int) -> int:
    if int(f) != f or f < 2:
        raise DimensionError(f"resampling factor must be an integer >= 2, got {f}")
    return int(f)


def _spatial(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 3:
        raise DimensionError(f"field must have at least 3 axes (C, H, W), got shape {x.shape}")
    return x


def downsample(x, f: int = 2) -> np.ndarray:
    """Average-pool each f x f block, per channel.

    Offsets from each block's first pixel are averaged, so a constant block
    comes back bit-exact for any f.
    """
    f = _check_factor(f)
    x = _spatial(x)
    h, w = x.shape[-2:]
    if h % f or w % f:
        raise DimensionError(f"spatial size {(h, w)} not divisible by {f}")
    ref = x[..., 0::f, 0::f]
    acc = np.zeros_like(ref)
    for i in range(f):
        for j in range(f):
            if i or j:
                acc += x[..., i::f, j::f] - ref
    return ref + acc / (f * f)


def upsample(x, f: int = 2) -> np.ndarray:
    """Nearest-neighbour replication of every pixel into an f x f block."""
    f = _check_factor(f)
    x = _spatial(x)
    h, w = x.shape[-2:]
    out = np.empty((*x.shape[:-2], h * f, w * f))
    for i in range(f):
        for j in range(f):
            out[..., i::f, j::f] = x
    return out


def _resample(x, f: int, times: int, op) -> np.ndarray:
    for _ in range(times):
        x = op(x, f)
    return x


@dataclass(frozen=True)
class Pyramid:
    """Laplacian bands ordered finest first; ``bands[-1]`` is the low-pass residual."""

    bands: tuple
    factor: int = 2

    def __post_init__(self):
        if len(self.bands) < 1:
            raise DimensionError("a pyramid needs at least one band")
        f = _check_factor(self.factor)
        object.__setattr__(self, "bands", tuple(np.asarray(b, dtype=np.float64) for b in self.bands))
        base = self.bands[0].shape
        for i, band in enumerate(self.bands):
            expect = (*base[:-2], base[-2] // f**i, base[-1] // f**i)
            if band.shape != expect or base[-2] % f**i or base[-1] % f**i:
                raise DimensionError(f"band {i + 1} has shape {band.shape}, expected {expect}")

    @property
    def depth(self) -> int:
        return len(self.bands)

    def __len__(self):
        return len(self.bands)

    def __getitem__(self, i):
        return self.bands[i]

    def map(self, fn) -> "Pyramid":
        """Apply ``fn(index, band)`` to every band (0-based index)."""
        return Pyramid(tuple(fn(i, b) for i, b in enumerate(self.bands)), self.factor)


def laplacian_decompose(x, K: int, f: int = 2) -> Pyramid:
    """Split ``x`` into K bands.

    Band K is ``down^(K-1)(x)``; band i < K is ``down^(i-1)(x) - up(down^i(x))``.
    """
    f = _check_factor(f)
    if int(K) != K or K < 1:
        raise DimensionError(f"pyramid depth must be a positive integer, got {K}")
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    scale = f ** (K - 1)
    if h % scale or w % scale:
        raise DimensionError(f"spatial size {(h, w)} not divisible by {f}^{K - 1} for K={K}")
    lows = [x]
    for _ in range(K - 1):
        lows.append(downsample(lows[-1], f))
    bands = [lows[i] - upsample(lows[i + 1], f) for i in range(K - 1)]
    bands.append(lows[-1])
    return Pyramid(tuple(bands), f)


def laplacian_reconstruct(p: Pyramid) -> np.ndarray:
    """Sum the upsampled bands; exact inverse of :func:`laplacian_decompose`."""
    acc = p.bands[-1]
    for band in reversed(p.bands[:-1]):
        acc = band + upsample(acc, p.factor)
    return acc


def haar_forward(x) -> np.ndarray:
    """One orthonormal 2-D Haar step: (..., C, H, W) -> (..., 4C, H/2, W/2).

    Output channels are subband-major: ``[LL, LH, HL, HH]`` each holding C channels.
    """
    x = np.asarray(x, dtype=np.float64)
    *lead, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"Haar step needs even spatial size, got {(h, w)}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    cc = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + cc + d) * 0.5
    lh = (a - b + cc - d) * 0.5
    hl = (a + b - cc - d) * 0.5
    hh = (a - b - cc + d) * 0.5
    return np.concatenate([ll, lh, hl, hh], axis=-3)


def haar_inverse(y) -> np.ndarray:
    """Inverse of :func:`haar_forward`."""
    y = np.asarray(y, dtype=np.float64)
    *lead, c4, h, w = y.shape
    if c4 % 4:
        raise DimensionError(f"Haar inverse needs a multiple of 4 channels, got {c4}")
    ll, lh, hl, hh = np.split(y, 4, axis=-3)
    out = np.empty((*lead, c4 // 4, 2 * h, 2 * w))
    out[..., 0::2, 0::2] = (ll + lh + hl + hh) * 0.5
    out[..., 0::2, 1::2] = (ll - lh + hl - hh) * 0.5
    out[..., 1::2, 0::2] = (ll + lh - hl - hh) * 0.5
    out[..., 1::2, 1::2] = (ll - lh - hl + hh) * 0.5
    return out


def haar_forward_2level(x) -> np.ndarray:
    """Two nested Haar steps: (C, H, W) -> (16C, H/4, W/4)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2] % 4 or x.shape[-1] % 4:
        raise DimensionError(f"2-level Haar needs spatial size divisible by 4, got {x.shape[-2:]}")
    return haar_forward(haar_forward(x))


def haar_inverse_2level(y) -> np.ndarray:
    return haar_inverse(haar_inverse(y))
