"""Command-line interface: ``lapdiff <command> [options]``.

Exit codes: 0 success, 1 verification failure, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

import lapdiff
from lapdiff import config as cfgmod
from lapdiff import datasets, grid, imageio, verify
from lapdiff.denoiser import (
    DatasetOracle,
    Expert,
    ExpertRouter,
    GmmOracle,
    MeanDenoiser,
    loss_samples,
    train_linear,
)
from lapdiff.errors import ConfigError, DimensionError, RoutingError
from lapdiff.process import forward_noise
from lapdiff.sampler import SamplerConfig, Stage, default_stage_plan, sample_cascade

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


def _load(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.parse_config({})
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output.dir = args.out
    return cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_field(stem: Path, x, cfg):
    """Write ``stem``.pgm/.ppm and/or ``stem``.raw according to output.format."""
    fmt = cfg.output.format
    lo, hi = cfg.output.value_range
    written = []
    if fmt in ("pgm", "both") and x.shape[0] in (1, 3):
        path = stem.parent / (stem.name + (".pgm" if x.shape[0] == 1 else ".ppm"))
        imageio.write_image(path, x, cfg.output.bits, lo, hi)
        written.append(path)
    if fmt in ("raw", "both") or x.shape[0] not in (1, 3):
        path = stem.parent / (stem.name + ".raw")
        imageio.write_raw(path, x)
        written.append(path)
    return written


def _gmm(cfg) -> GmmOracle:
    res = tuple(cfg.denoiser.dataset.resolution)
    comps = cfg.denoiser.gmm.components
    means = []
    for i, c in enumerate(comps):
        m = np.asarray(c.mean, dtype=np.float64)
        if m.ndim == 0:
            m = np.full(res, float(m))
        elif m.size == math.prod(res):
            m = m.reshape(res)
        else:
            raise ConfigError(f"mean must be a number or {math.prod(res)} values", key=f"denoiser.gmm.components[{i}].mean")
        means.append(m)
    return GmmOracle([c.weight for c in comps], np.stack(means), [c.variance for c in comps], cfg.process.f)


def build_dataset(cfg) -> np.ndarray:
    ds = cfg.denoiser.dataset
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0xDA7A,)))
    if ds.source == "synthetic-shapes":
        return datasets.synthetic_shapes(ds.count, ds.resolution, rng, ds.generators)
    if ds.source == "synthetic-gmm":
        return datasets.synthetic_gmm(ds.count, _gmm(cfg), rng)
    return datasets.load_directory(ds.path, ds.resolution, ds.count)


def build_sampler(cfg, data):
    """SamplerConfig plus the dataset oracle (None for GMM / linear runs)."""
    prof = cfgmod.profile(cfg)
    K, f = cfg.process.K, cfg.process.f
    shape = tuple(cfg.denoiser.dataset.resolution)
    kind = cfg.denoiser.type
    oracle = None
    if kind == "empirical":
        oracle = DatasetOracle(data, prof, f)
        den = oracle
    elif kind == "gmm":
        if any(not math.isinf(t) for t in prof.t_star):
            raise ConfigError("the GMM oracle needs the standard process (all t_star null)", key="denoiser.type")
        den = _gmm(cfg)
    else:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0x11E,)))
        lin = cfg.denoiser.linear
        s = cfgmod.schedule_set(cfg)
        den = train_linear(data, lin.pairs, rng, lin.buckets, s.train, s.precondition)
    sm = cfg.sampler
    if sm.stages:
        stages = tuple(Stage(b.level, b.sigma_entry, b.sigma_exit, b.steps) for b in sm.stages)
    else:
        stages = default_stage_plan(prof, cfg.schedule.sigma_max, sm.steps, f, sm.finest_level)
    levels = sorted({st.level for st in stages})
    if cfg.denoiser.staging == "experts":
        router = ExpertRouter.staged({lv: den for lv in levels}, prof, f)
    else:
        router = ExpertRouter([_whole(den, lv) for lv in levels])
    scfg = SamplerConfig(
        stages, shape, sm.integrator, prof if K > 1 else None, f, sm.churn,
        cfg.schedule.rho, cfg.schedule.sigma_min, router,
    )
    return scfg, oracle


def _whole(den, level):
    return Expert(den, level, 0.0, math.inf)


def cmd_decompose(args) -> int:
    cfg = _load(args)
    x = imageio.read_image(args.input, *cfg.output.value_range)
    K = args.levels if args.levels is not None else cfg.process.K
    f = args.factor if args.factor is not None else cfg.process.f
    pyr = grid.laplacian_decompose(x, K, f)
    out = _out_dir(cfg)
    scales = {}
    for i, band in enumerate(pyr.bands, start=1):
        imageio.write_raw(out / f"band_{i}.raw", band)
        if band.shape[0] in (1, 3):
            ext = ".pgm" if band.shape[0] == 1 else ".ppm"
            if i < K:
                pix, scale = imageio.residual_view(band, cfg.output.bits)
                imageio.write_pnm(out / f"band_{i}{ext}", pix, (1 << cfg.output.bits) - 1)
                scales[f"band_{i}"] = scale
            else:
                imageio.write_image(out / f"band_{i}{ext}", band, cfg.output.bits, *cfg.output.value_range)
    err = float(np.max(np.abs(grid.laplacian_reconstruct(pyr) - x)))
    with open(out / "bands.json", "w") as fh:
        json.dump({"K": K, "f": f, "residual_scales": scales, "max_reconstruction_error": err}, fh, indent=2)
    for name, s in scales.items():
        print(f"{name}\tresidual_scale\t{s:.6g}")
    print(f"max_reconstruction_error\t{err:.3e}")
    return EXIT_OK


def cmd_forward(args) -> int:
    cfg = _load(args)
    x = imageio.read_image(args.input, *cfg.output.value_range)
    prof = cfgmod.profile(cfg)
    f = cfg.process.f
    out = _out_dir(cfg)
    rng = np.random.default_rng(cfg.seed)
    if args.resolution_view is not None:
        sigma = args.resolution_view
        noisy = x + sigma * rng.standard_normal(x.shape)
        for k in range(args.view_levels):
            _write_field(out / f"view_level{k + 1}", noisy, cfg)
            print(f"view_level{k + 1}\t{noisy.shape[1]}x{noisy.shape[2]}\tnoise_std\t{sigma / f**k:.6g}")
            if k + 1 < args.view_levels:
                noisy = grid.downsample(noisy, f)
        return EXIT_OK
    # one noise draw shared by all times so the panel shows attenuation, not resampling
    eps_seed = rng.integers(2**63)
    for t in args.t:
        state = forward_noise(x, t, np.random.default_rng(eps_seed), prof if cfg.process.K > 1 else None, f)
        _write_field(out / f"forward_t{t:g}", state.field, cfg)
        print(f"t={t:g}\tsigma={state.sigma:.6g}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _load(args)
    data = build_dataset(cfg)
    scfg, oracle = build_sampler(cfg, data)
    out = _out_dir(cfg)
    n = cfg.sampler.chains
    t0 = time.perf_counter()
    traj = sample_cascade(scfg, cfg.seed, n, threads=args.threads)
    elapsed = time.perf_counter() - t0
    (out / "samples").mkdir(exist_ok=True)
    np.save(out / "samples.npy", traj.final)
    for c in range(min(cfg.output.save_images, n)):
        _write_field(out / "samples" / f"sample_{c:05d}", traj.final[c], cfg)
    tc = min(cfg.output.trajectory_chains, n)
    if tc:
        (out / "trajectories").mkdir(exist_ok=True)
        small = sample_cascade(scfg, cfg.seed, chains=np.arange(tc), keep_fields=True)
        atoms = None if oracle is None else {lv: oracle.atoms(lv) for lv in range(1, oracle.K + 1)}
        for c in range(tc):
            small.to_csv(out / "trajectories" / f"chain_{c:05d}.csv", c, atoms)
    summary = {}
    if oracle is not None:
        lvl = scfg.stages[-1].level
        a = oracle.atoms(lvl).reshape(len(oracle), -1)
        fin = traj.final.reshape(n, -1)
        d = np.sqrt(np.min(np.sum((fin[:, None, :] - a[None]) ** 2, axis=-1), axis=1))
        summary = {"median_dist_to_atom": float(np.median(d)), "max_dist_to_atom": float(np.max(d))}
    manifest = {
        "config_hash": cfgmod.config_hash(cfg),
        "seed": cfg.seed,
        "chains": n,
        "stages": [
            {"level": s.level, "sigma_entry": s.sigma_entry, "sigma_exit": s.sigma_exit, "steps": s.steps}
            for s in scfg.stages
        ],
        "summary": summary,
        "versions": {
            "lapdiff": lapdiff.__version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "config": cfgmod.to_dict(cfg),
        "nondeterministic": {
            "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "elapsed_s": elapsed,
        },
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"sampled {n} chains in {elapsed:.2f}s -> {out}")
    for k, v in summary.items():
        print(f"{k}\t{v:.6g}")
    return EXIT_OK


def cmd_train_linear(args) -> int:
    cfg = _load(args)
    if cfg.process.K != 1:
        raise ConfigError("train-linear works on the standard process (K = 1)", key="process.K")
    data = build_dataset(cfg)
    lin = cfg.denoiser.linear
    s = cfgmod.schedule_set(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0x11E,)))
    model = train_linear(data, lin.pairs, rng, lin.buckets, s.train, s.precondition)
    out = _out_dir(cfg)
    model.save(out / "linear.bin")
    model.to_csv(out / "linear.csv")
    rivals = {"mmse": DatasetOracle(data), "linear": model, "mean": MeanDenoiser(data)}
    ok = True
    rows = []
    for j, sigma in enumerate(lin.eval_sigmas):
        seed = np.random.SeedSequence(cfg.seed, spawn_key=(0xE7A1, j))
        losses = {k: loss_samples(d, data, sigma, lin.eval_draws, np.random.default_rng(seed)) for k, d in rivals.items()}

        def excess(a, b):
            diff = losses[a] - losses[b]
            se = np.std(diff, ddof=1) / math.sqrt(len(diff))
            return float(np.mean(diff) - 2 * se)

        holds = excess("mmse", "linear") <= 0 and excess("linear", "mean") <= 0
        ok &= holds
        rows.append(
            [sigma]
            + [float(np.mean(losses[k])) for k in rivals]
            + [float(np.std(losses[k], ddof=1) / math.sqrt(len(losses[k]))) for k in rivals]
            + [int(holds)]
        )
    with open(out / "loss_table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma", "loss_mmse", "loss_linear", "loss_mean", "se_mmse", "se_linear", "se_mean", "sandwich_holds"])
        w.writerows(rows)
    for r in rows:
        print(f"sigma={r[0]:g}\tmmse={r[1]:.6g}\tlinear={r[2]:.6g}\tmean={r[3]:.6g}\t{'OK' if r[-1] else 'VIOLATED'}")
    for j in np.flatnonzero(model.ridge):
        print(f"note: bucket {j} used the ridge fallback (lambda = 1e-8 * trace scale)")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_verify(args) -> int:
    if args.list:
        for name, fn in verify.CHECKS.items():
            print(f"{name}\t{(fn.__doc__ or '').strip().splitlines()[0]}")
        return EXIT_OK
    seed = 0 if args.seed is None else args.seed
    unknown = [c for c in args.checks if c not in verify.CHECKS]
    if unknown:
        raise ConfigError(f"unknown checks {unknown}; available: {list(verify.CHECKS)}", key="checks")
    try:
        for o in args.tol:
            verify.parse_override(o)
    except ValueError as exc:
        raise ConfigError(str(exc), key="--tol") from exc
    print("name\tmeasured\ttolerance\tstatus")
    t0 = time.perf_counter()
    rows = verify.run(args.checks, args.tol, seed=seed, emit=lambda r: print(r.line(), flush=True))
    failed = [r for r in rows if not r.passed]
    stray = {verify.parse_override(o)[0] for o in args.tol} - {r.name for r in rows}
    if stray:
        raise ConfigError(f"no measured row named {sorted(stray)}", key="--tol")
    print(f"# {len(rows) - len(failed)} passed, {len(failed)} failed in {time.perf_counter() - t0:.1f}s")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_dataset_gen(args) -> int:
    cfg = _load(args)
    data = build_dataset(cfg)
    out = _out_dir(cfg)
    for i, x in enumerate(data):
        _write_field(out / f"image_{i:04d}", x, cfg)
    print(f"wrote {len(data)} images of shape {data.shape[1:]} to {out}")
    return EXIT_OK


def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run-config JSON file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for sampling chains")

    parser = argparse.ArgumentParser(prog="lapdiff", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", parents=[common], help="Laplacian bands of an image")
    p.add_argument("input")
    p.add_argument("-K", "--levels", type=int)
    p.add_argument("-f", "--factor", type=int)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("forward", parents=[common], help="forward-noised image sequence")
    p.add_argument("input")
    p.add_argument("--t", type=_float_list, default="0,0.25,0.5,1,2,4", help="comma-separated times")
    p.add_argument("--resolution-view", type=float, metavar="SIGMA",
                   help="instead write down^k(x + SIGMA eps) for k = 0..view-levels-1")
    p.add_argument("--view-levels", type=int, default=4)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("sample", parents=[common], help="run the sampling cascade")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train-linear", parents=[common], help="fit and evaluate the linear denoiser")
    p.set_defaults(func=cmd_train_linear)

    p = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    p.add_argument("checks", nargs="*", help=f"subset of {', '.join(verify.CHECKS)}")
    p.add_argument("--tol", action="append", default=[], metavar="NAME=HI|NAME=LO:HI")
    p.add_argument("--list", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("dataset-gen", parents=[common], help="write the configured dataset as images")
    p.set_defaults(func=cmd_dataset_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DimensionError, RoutingError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
