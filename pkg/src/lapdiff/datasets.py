"""Dataset ingestion and synthetic generators for toy experiments."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from lapdiff import grid
from lapdiff.errors import ConfigError, DimensionError
from lapdiff.imageio import read_image

GENERATORS = ("checkerboard", "blob", "gradient")


def checkerboard(rng, shape):
    c, h, w = shape
    period = int(rng.choice([p for p in (2, 4, 8, 16) if p <= max(h, w)] or [1]))
    phase = rng.integers(0, 2, size=2)
    yy, xx = np.mgrid[0:h, 0:w]
    board = (((yy // period) + (xx // period) + phase.sum()) % 2) * 2.0 - 1.0
    amp = rng.uniform(0.4, 1.0, size=(c, 1, 1))
    return amp * board[None]


def blob(rng, shape):
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    r = rng.uniform(0.1, 0.35) * max(h, w)
    g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r**2))
    sign = rng.choice([-1.0, 1.0], size=(c, 1, 1))
    return sign * (2.0 * g[None] - 1.0)


def gradient(rng, shape):
    c, h, w = shape
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = np.cos(theta) * xx / max(w - 1, 1) + np.sin(theta) * yy / max(h - 1, 1)
    ramp = ramp - ramp.min()
    ramp = ramp / ramp.max() if ramp.max() > 0 else ramp
    return np.broadcast_to(2.0 * ramp - 1.0, (c, h, w)).copy()


_GEN = {"checkerboard": checkerboard, "blob": blob, "gradient": gradient}


def synthetic_shapes(count: int, shape, rng: np.random.Generator, generators=GENERATORS) -> np.ndarray:
    """``count`` images cycling through the named generators, values in [-1, 1]."""
    bad = [g for g in generators if g not in _GEN]
    if bad:
        raise ConfigError(f"unknown generators {bad}; choose from {GENERATORS}", key="generators")
    return np.stack([_GEN[generators[i % len(generators)]](rng, tuple(shape)) for i in range(count)])


def synthetic_gmm(count: int, gmm, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` fields from a :class:`~lapdiff.denoiser.GmmOracle`'s mixture."""
    return gmm.sample(count, rng)


def load_directory(path, shape=None, count=None) -> np.ndarray:
    """Read every .pgm/.ppm/.raw in ``path`` (sorted) into one (n, C, H, W) array.

    Images larger than ``shape`` by an integer factor are average-pooled down to it;
    anything else that disagrees with the common shape is an error.
    """
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".pgm", ".ppm", ".raw"))
    if count is not None:
        files = files[:count]
    if not files:
        raise FileNotFoundError(f"no .pgm/.ppm/.raw images in {path}")
    out = []
    for p in files:
        x = read_image(p)
        target = tuple(shape) if shape is not None else (out[0].shape if out else x.shape)
        if x.shape != target:
            f = x.shape[1] // target[1] if target[1] else 0
            if (
                x.shape[0] != target[0]
                or f < 2
                or x.shape[1] != f * target[1]
                or x.shape[2] != f * target[2]
            ):
                raise DimensionError(f"{p.name}: shape {x.shape} incompatible with {target}")
            x = grid.downsample(x, f)
        out.append(x)
    return np.stack(out)
