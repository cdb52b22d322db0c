"""Run configuration: strict JSON schema, defaults, and builders.

Every block is a dataclass. Parsing rejects unknown keys and wrong types and
reports the dotted path of the offending key. Infinite extinction times are
written as ``null``.
"""

from __future__ import annotations

import hashlib
import json
import math
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass

from lapdiff.errors import ConfigError
from lapdiff.schedule import (
    AttenuationProfile,
    Precondition,
    ScheduleSet,
    SigmaSchedule,
    TrainSigmaDist,
)


@dataclass
class ScheduleBlock:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_data: float = 0.5
    t_star: typing.Optional[list] = None
    ramp_start: typing.Optional[list] = None
    shape: str = "linear"


@dataclass
class ProcessBlock:
    K: int = 1
    f: int = 2


@dataclass
class DatasetBlock:
    source: str = "synthetic-shapes"
    path: typing.Optional[str] = None
    resolution: list = field(default_factory=lambda: [1, 16, 16])
    count: int = 4
    generators: list = field(default_factory=lambda: ["checkerboard", "blob", "gradient"])


@dataclass
class GmmComponent:
    weight: float = 1.0
    mean: typing.Any = 0.0
    variance: float = 0.0


@dataclass
class GmmBlock:
    components: list = field(default_factory=list)


@dataclass
class LinearBlock:
    pairs: int = 20000
    buckets: int = 8
    eval_draws: int = 4000
    eval_sigmas: list = field(default_factory=lambda: [0.1, 0.5, 1.0, 5.0])


@dataclass
class DenoiserBlock:
    type: str = "empirical"
    staging: str = "experts"
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    gmm: GmmBlock = field(default_factory=GmmBlock)
    linear: LinearBlock = field(default_factory=LinearBlock)


@dataclass
class StageBlock:
    level: int = 1
    sigma_entry: float = 80.0
    sigma_exit: float = 0.0
    steps: int = 32


@dataclass
class SamplerBlock:
    integrator: str = "heun"
    steps: typing.Any = 32
    chains: int = 16
    churn: float = 0.0
    finest_level: int = 1
    stages: typing.Optional[list] = None


@dataclass
class OutputBlock:
    dir: str = "out"
    format: str = "pgm"
    bits: int = 8
    save_images: int = 16
    trajectory_chains: int = 2
    value_range: list = field(default_factory=lambda: [-1.0, 1.0])


@dataclass
class RunConfig:
    seed: int = 0
    schedule: ScheduleBlock = field(default_factory=ScheduleBlock)
    process: ProcessBlock = field(default_factory=ProcessBlock)
    denoiser: DenoiserBlock = field(default_factory=DenoiserBlock)
    sampler: SamplerBlock = field(default_factory=SamplerBlock)
    output: OutputBlock = field(default_factory=OutputBlock)


# element types of list-valued fields that hold blocks
_LIST_ITEMS = {(GmmBlock, "components"): GmmComponent, (SamplerBlock, "stages"): StageBlock}

_CHOICES = {
    "schedule.shape": ("linear", "cosine", "step"),
    "denoiser.type": ("empirical", "gmm", "linear"),
    "denoiser.staging": ("experts", "single"),
    "denoiser.dataset.source": ("image-directory", "synthetic-shapes", "synthetic-gmm"),
    "sampler.integrator": ("euler", "heun"),
    "output.format": ("pgm", "raw", "both"),
    "output.bits": (8, 16),
}


def _check_scalar(value, hint, path):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _check_scalar(value, args[0], path)
    if hint is typing.Any:
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key=path)
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key=path)
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key=path)
        return value
    if hint is list:
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}", key=path)
        return value
    raise TypeError(f"unsupported schema type {hint}")


def _parse_block(cls, data, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object, got {type(data).__name__}", key=path or "<root>")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError("unknown key", key=f"{path}.{key}" if path else key)
    kwargs = {}
    for f in fields(cls):
        where = f"{path}.{f.name}" if path else f.name
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints[f.name]
        if is_dataclass(hint):
            kwargs[f.name] = _parse_block(hint, value, where)
            continue
        value = _check_scalar(value, hint, where)
        item = _LIST_ITEMS.get((cls, f.name))
        if item is not None and value is not None:
            value = [_parse_block(item, v, f"{where}[{i}]") for i, v in enumerate(value)]
        if where in _CHOICES and value not in _CHOICES[where]:
            raise ConfigError(f"{value!r} is not one of {_CHOICES[where]}", key=where)
        kwargs[f.name] = value
    return cls(**kwargs)


def parse_config(data: dict) -> RunConfig:
    """Validate a decoded JSON object into a RunConfig (raises ConfigError)."""
    cfg = _parse_block(RunConfig, data)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", key=str(path)) from exc
    return parse_config(data)


def to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    """sha256 of the canonical JSON, leaving out the output directory (where, not what)."""
    d = to_dict(cfg)
    d["output"].pop("dir")
    canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def validate(cfg: RunConfig):
    """Cross-field checks; builds every derived object once so errors surface early."""
    p = cfg.process
    if p.K < 1:
        raise ConfigError("must be >= 1", key="process.K")
    if p.f < 2:
        raise ConfigError("must be >= 2", key="process.f")
    s = cfg.schedule
    if s.t_star is not None and len(s.t_star) != p.K - 1:
        raise ConfigError(f"expected {p.K - 1} extinction times for K={p.K}", key="schedule.t_star")
    if s.ramp_start is not None and len(s.ramp_start) != p.K - 1:
        raise ConfigError(f"expected {p.K - 1} ramp starts for K={p.K}", key="schedule.ramp_start")
    for name in ("t_star", "ramp_start"):
        for i, v in enumerate(getattr(s, name) or []):
            if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))):
                raise ConfigError(f"expected a number or null, got {v!r}", key=f"schedule.{name}[{i}]")
    try:
        schedule_set(cfg)
    except ConfigError as exc:
        if exc.key is None or "." not in exc.key:
            raise ConfigError(str(exc), key=f"schedule.{exc.key}" if exc.key else "schedule") from exc
        raise
    res = cfg.denoiser.dataset.resolution
    if len(res) != 3 or any(isinstance(r, bool) or not isinstance(r, int) or r < 1 for r in res):
        raise ConfigError("expected [C, H, W] positive integers", key="denoiser.dataset.resolution")
    scale = p.f ** (p.K - 1)
    if res[1] % scale or res[2] % scale:
        raise ConfigError(f"H, W must be divisible by f^(K-1) = {scale}", key="denoiser.dataset.resolution")
    if cfg.denoiser.dataset.count < 1:
        raise ConfigError("must be >= 1", key="denoiser.dataset.count")
    if cfg.denoiser.dataset.source == "image-directory" and not cfg.denoiser.dataset.path:
        raise ConfigError("image-directory source needs a path", key="denoiser.dataset.path")
    if cfg.denoiser.type == "gmm" or cfg.denoiser.dataset.source == "synthetic-gmm":
        comps = cfg.denoiser.gmm.components
        if not comps:
            raise ConfigError("needs at least one component", key="denoiser.gmm.components")
        if abs(sum(c.weight for c in comps) - 1.0) > 1e-9:
            raise ConfigError("weights must sum to 1", key="denoiser.gmm.components")
    if cfg.denoiser.type == "linear" and p.K != 1:
        raise ConfigError("the linear denoiser only supports K = 1", key="denoiser.type")
    sm = cfg.sampler
    if sm.chains < 1:
        raise ConfigError("must be >= 1", key="sampler.chains")
    if sm.churn < 0:
        raise ConfigError("must be >= 0", key="sampler.churn")
    if not 1 <= sm.finest_level <= p.K:
        raise ConfigError(f"must lie in 1..{p.K}", key="sampler.finest_level")
    steps = sm.steps if isinstance(sm.steps, list) else [sm.steps]
    if any(isinstance(n, bool) or not isinstance(n, int) or n < 1 for n in steps):
        raise ConfigError("expected a positive integer or a list of them", key="sampler.steps")
    o = cfg.output
    if len(o.value_range) != 2 or not o.value_range[0] < o.value_range[1]:
        raise ConfigError("expected [lo, hi] with lo < hi", key="output.value_range")
    if o.save_images < 0 or o.trajectory_chains < 0:
        raise ConfigError("counts must be non-negative", key="output")


def profile(cfg: RunConfig) -> AttenuationProfile:
    s, K, f = cfg.schedule, cfg.process.K, cfg.process.f
    if s.t_star is None:
        t_star = tuple(float(f ** (2 * i)) for i in range(K - 1))
    else:
        t_star = tuple(math.inf if t is None else float(t) for t in s.t_star)
    ramp = None if s.ramp_start is None else tuple(float(r) for r in s.ramp_start)
    return AttenuationProfile(t_star, ramp, s.shape)


def schedule_set(cfg: RunConfig) -> ScheduleSet:
    s = cfg.schedule
    return ScheduleSet(
        SigmaSchedule(s.sigma_min, s.sigma_max, s.rho),
        profile(cfg),
        Precondition(s.sigma_data),
        TrainSigmaDist(s.p_mean, s.p_std),
    )
