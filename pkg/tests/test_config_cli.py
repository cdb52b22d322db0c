import json
import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lapdiff import config, imageio
from lapdiff.cli import main
from lapdiff.denoiser import LinearDenoiser
from lapdiff.errors import ConfigError

# --- config -------------------------------------------------------------------------


def test_defaults_parse():
    cfg = config.parse_config({})
    assert cfg.seed == 0 and cfg.process.K == 1 and cfg.sampler.integrator == "heun"


def test_unknown_key_names_the_path():
    with pytest.raises(ConfigError) as e:
        config.parse_config({"schedule": {"sigma_mx": 80}})
    assert e.value.key == "schedule.sigma_mx"
    with pytest.raises(ConfigError) as e:
        config.parse_config({"sampler": {"stages": [{"level": 1, "sigma_entry": 1.0, "sigma_exit": 0.0, "step": 2}]}})
    assert e.value.key == "sampler.stages[0].step"


@pytest.mark.parametrize(
    "data, key",
    [
        ({"seed": "1"}, "seed"),
        ({"seed": True}, "seed"),
        ({"schedule": {"rho": [7]}}, "schedule.rho"),
        ({"sampler": {"integrator": "rk4"}}, "sampler.integrator"),
        ({"output": {"bits": 12}}, "output.bits"),
        ({"process": {"K": 0}}, "process.K"),
        ({"process": {"K": 3}, "schedule": {"t_star": [1.0]}}, "schedule.t_star"),
        ({"process": {"K": 2}, "schedule": {"t_star": ["x"]}}, "schedule.t_star[0]"),
        ({"process": {"K": 3}, "denoiser": {"dataset": {"resolution": [1, 6, 6]}}}, "denoiser.dataset.resolution"),
        ({"denoiser": {"type": "gmm"}}, "denoiser.gmm.components"),
        ({"process": {"K": 2}, "denoiser": {"type": "linear"}}, "denoiser.type"),
        ({"denoiser": {"dataset": {"source": "image-directory"}}}, "denoiser.dataset.path"),
        ({"sampler": {"steps": [4, 0]}}, "sampler.steps"),
        ({"output": {"value_range": [1, -1]}}, "output.value_range"),
        ([], "<root>"),
    ],
)
def test_invalid_values_report_key(data, key):
    with pytest.raises(ConfigError) as e:
        config.parse_config(data)
    assert e.value.key == key


def test_schedule_errors_get_a_dotted_key():
    with pytest.raises(ConfigError) as e:
        config.parse_config({"process": {"K": 2}, "schedule": {"t_star": [1.0], "ramp_start": [2.0]}})
    assert e.value.key.startswith("schedule")


def test_profile_builder():
    cfg = config.parse_config({"process": {"K": 3}})
    assert config.profile(cfg).t_star == (1.0, 4.0)
    cfg = config.parse_config({"process": {"K": 3}, "schedule": {"t_star": [2.0, None]}})
    assert config.profile(cfg).t_star == (2.0, math.inf)


_blocks = st.fixed_dictionaries(
    {},
    optional={
        "seed": st.integers(0, 2**31),
        "schedule": st.fixed_dictionaries({}, optional={"rho": st.floats(1, 10), "sigma_max": st.floats(10, 100)}),
        "sampler": st.fixed_dictionaries(
            {}, optional={"integrator": st.sampled_from(["euler", "heun"]), "chains": st.integers(1, 64)}
        ),
        "output": st.fixed_dictionaries({}, optional={"format": st.sampled_from(["pgm", "raw", "both"])}),
        "process": st.just({"K": 2, "f": 2}),
    },
)


@settings(max_examples=40, deadline=None)
@given(_blocks)
def test_roundtrip_fixed_point(data):
    cfg = config.parse_config(data)
    text = config.dumps(cfg)
    again = config.parse_config(json.loads(text))
    assert config.dumps(again) == text
    assert config.config_hash(again) == config.config_hash(cfg)


def test_hash_changes_with_content():
    a = config.config_hash(config.parse_config({"seed": 1}))
    assert a == config.config_hash(config.parse_config({"seed": 1, "output": {"dir": "elsewhere"}}))
    assert a != config.config_hash(config.parse_config({"seed": 2}))


def test_load_config_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        config.load_config(tmp_path / "bad.json")
    with pytest.raises(OSError):
        config.load_config(tmp_path / "absent.json")


# --- CLI ------------------------------------------------------------------------------------


def write_cfg(path, data):
    path.write_text(json.dumps(data))
    return str(path)


def test_decompose_constant_image(tmp_path, capsys):
    imageio.write_raw(tmp_path / "c.raw", np.full((1, 16, 16), 0.3))
    assert main(["decompose", str(tmp_path / "c.raw"), "-K", "3", "--out", str(tmp_path / "o")]) == 0
    for i in (1, 2):
        assert np.all(imageio.read_raw(tmp_path / "o" / f"band_{i}.raw") == 0)
        assert (tmp_path / "o" / f"band_{i}.pgm").exists()
    np.testing.assert_array_equal(imageio.read_raw(tmp_path / "o" / "band_3.raw"), np.full((1, 4, 4), 0.3))
    assert "max_reconstruction_error\t0.000e+00" in capsys.readouterr().out


def test_decompose_reports_small_error(tmp_path, capsys):
    x = np.random.default_rng(0).standard_normal((3, 16, 16))
    imageio.write_raw(tmp_path / "x.raw", x)
    assert main(["decompose", str(tmp_path / "x.raw"), "-K", "3", "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "bands.json").read_text())
    assert report["max_reconstruction_error"] <= 1e-12
    assert set(report["residual_scales"]) == {"band_1", "band_2"}
    assert (tmp_path / "o" / "band_1.ppm").exists()


def test_decompose_single_band_is_copy(tmp_path):
    x = np.random.default_rng(1).standard_normal((1, 8, 8))
    imageio.write_raw(tmp_path / "x.raw", x)
    assert main(["decompose", str(tmp_path / "x.raw"), "-K", "1", "--out", str(tmp_path / "o")]) == 0
    np.testing.assert_array_equal(imageio.read_raw(tmp_path / "o" / "band_1.raw"), x)


def test_decompose_errors(tmp_path):
    assert main(["decompose", str(tmp_path / "missing.pgm"), "--out", str(tmp_path)]) == 3
    imageio.write_raw(tmp_path / "odd.raw", np.zeros((1, 6, 6)))
    assert main(["decompose", str(tmp_path / "odd.raw"), "-K", "3", "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.pgm").write_bytes(b"P5\n9 9\n255\n")
    assert main(["decompose", str(tmp_path / "bad.pgm"), "--out", str(tmp_path)]) == 3


def test_forward_outputs(tmp_path):
    x = np.random.default_rng(2).uniform(-1, 1, (1, 8, 8))
    imageio.write_raw(tmp_path / "x.raw", x)
    cfg = write_cfg(tmp_path / "c.json", {"process": {"K": 2}, "output": {"format": "raw"}})
    args = ["forward", str(tmp_path / "x.raw"), "--config", cfg, "--t", "0,0.5,2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    np.testing.assert_array_equal(imageio.read_raw(tmp_path / "a" / "forward_t0.raw"), x)
    for t in ("0.5", "2"):
        assert (tmp_path / "a" / f"forward_t{t}.raw").read_bytes() == (tmp_path / "b" / f"forward_t{t}.raw").read_bytes()
    assert main(args + ["--out", str(tmp_path / "c"), "--seed", "5"]) == 0
    assert (tmp_path / "a" / "forward_t2.raw").read_bytes() != (tmp_path / "c" / "forward_t2.raw").read_bytes()


def test_forward_resolution_view(tmp_path):
    imageio.write_image(tmp_path / "x.pgm", np.zeros((1, 32, 32)))
    out = tmp_path / "v"
    assert main(["forward", str(tmp_path / "x.pgm"), "--resolution-view", "0.02", "--out", str(out)]) == 0
    sizes = [imageio.read_pnm(out / f"view_level{k}.pgm")[0].shape[1] for k in (1, 2, 3, 4)]
    assert sizes == [32, 16, 8, 4]


def _atoms_dir(tmp_path):
    d = tmp_path / "atoms"
    d.mkdir()
    rng = np.random.default_rng(3)
    atoms = np.sign(rng.standard_normal((2, 1, 8, 8))) * 0.5
    for i, a in enumerate(atoms):
        imageio.write_raw(d / f"a{i}.raw", a)
    return d, atoms


def test_sample_two_atoms_and_manifest(tmp_path):
    d, atoms = _atoms_dir(tmp_path)
    data = {
        "denoiser": {"dataset": {"source": "image-directory", "path": str(d), "resolution": [1, 8, 8], "count": 2}},
        "sampler": {"chains": 6, "steps": 32},
        "output": {"format": "raw", "save_images": 6, "trajectory_chains": 1},
    }
    cfg = write_cfg(tmp_path / "c.json", data)
    assert main(["sample", "--config", cfg, "--out", str(tmp_path / "r1"), "--seed", "4"]) == 0
    assert main(["sample", "--config", cfg, "--out", str(tmp_path / "r2"), "--seed", "4", "--threads", "3"]) == 0
    for c in range(6):
        x = imageio.read_raw(tmp_path / "r1" / "samples" / f"sample_{c:05d}.raw")
        assert min(np.abs(x - a).max() for a in atoms) < 1e-3
    m1 = json.loads((tmp_path / "r1" / "manifest.json").read_text())
    m2 = json.loads((tmp_path / "r2" / "manifest.json").read_text())
    assert m1["config_hash"] == m2["config_hash"] and m1["seed"] == 4
    assert {"lapdiff", "numpy", "scipy", "python"} <= set(m1["versions"])
    for m in (m1, m2):
        m.pop("nondeterministic")
        m["config"]["output"].pop("dir")
    assert m1 == m2
    assert (tmp_path / "r1" / "samples.npy").read_bytes() == (tmp_path / "r2" / "samples.npy").read_bytes()
    t1 = (tmp_path / "r1" / "trajectories" / "chain_00000.csv").read_text()
    assert t1 == (tmp_path / "r2" / "trajectories" / "chain_00000.csv").read_text()


def test_sample_multistage(tmp_path, capsys):
    data = {
        "process": {"K": 3},
        "denoiser": {"dataset": {"resolution": [1, 16, 16], "count": 3}},
        "sampler": {"chains": 4, "steps": [8, 8, 8]},
        "output": {"save_images": 1, "trajectory_chains": 0},
    }
    cfg = write_cfg(tmp_path / "c.json", data)
    assert main(["sample", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert [s["level"] for s in m["stages"]] == [3, 2, 1]
    assert np.load(tmp_path / "o" / "samples.npy").shape == (4, 1, 16, 16)


def test_sample_config_errors(tmp_path):
    bad = write_cfg(tmp_path / "bad.json", {"sampler": {"chain": 3}})
    assert main(["sample", "--config", bad, "--out", str(tmp_path)]) == 2
    assert main(["sample", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 3
    # a stage plan the router cannot serve is rejected before any sampling
    plan = {
        "process": {"K": 2},
        "denoiser": {"dataset": {"resolution": [1, 4, 4]}},
        "sampler": {"stages": [{"level": 2, "sigma_entry": 80.0, "sigma_exit": 4.0, "steps": 4},
                               {"level": 1, "sigma_entry": 8.0, "sigma_exit": 0.0, "steps": 4}]},
    }
    assert main(["sample", "--config", write_cfg(tmp_path / "p.json", plan), "--out", str(tmp_path / "p")]) == 2
    assert not (tmp_path / "p" / "manifest.json").exists()


def test_train_linear_one_point(tmp_path, capsys):
    data = {
        "denoiser": {
            "type": "linear",
            "dataset": {"resolution": [1, 2, 2], "count": 1},
            "linear": {"pairs": 4000, "buckets": 8, "eval_draws": 500, "eval_sigmas": [0.5, 1.0]},
        }
    }
    cfg = write_cfg(tmp_path / "c.json", data)
    # the mean predictor is exact here and the bucketed fit is not, so the sandwich is reported violated
    assert main(["train-linear", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    model = LinearDenoiser.load(tmp_path / "o" / "linear.bin")
    assert model.n_buckets == 8
    rows = (tmp_path / "o" / "loss_table.csv").read_text().strip().splitlines()
    assert rows[0].startswith("sigma,loss_mmse,loss_linear,loss_mean")
    for r in rows[1:]:
        sigma, mmse, lin, mean = map(float, r.split(",")[:4])
        assert mmse == 0.0 and mean == 0.0 and lin < 0.02 * sigma**2 * 4
    assert "VIOLATED" in capsys.readouterr().out


def test_train_linear_sandwich_random_dataset(tmp_path):
    data = {
        "seed": 9,
        "denoiser": {
            "type": "linear",
            "dataset": {"source": "synthetic-gmm", "resolution": [1, 1, 2], "count": 10},
            "gmm": {"components": [{"weight": 1.0, "mean": 0.0, "variance": 1.0}]},
            "linear": {"pairs": 20000, "buckets": 8, "eval_draws": 4000},
        },
    }
    assert main(["train-linear", "--config", write_cfg(tmp_path / "c.json", data), "--out", str(tmp_path / "o")]) == 0
    rows = (tmp_path / "o" / "loss_table.csv").read_text().strip().splitlines()[1:]
    assert all(r.endswith(",1") for r in rows)


def test_dataset_gen(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"denoiser": {"dataset": {"count": 5, "resolution": [3, 8, 8]}}})
    assert main(["dataset-gen", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    files = sorted(p.name for p in (tmp_path / "d").iterdir())
    assert files == [f"image_{i:04d}.ppm" for i in range(5)]


def test_verify_listing_and_selection(capsys):
    assert main(["verify", "--list"]) == 0
    listed = [line.split("\t")[0] for line in capsys.readouterr().out.strip().splitlines()]
    assert "pyramid" in listed and "wiener" in listed
    assert main(["verify", "haar"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    rows = [line for line in lines[1:] if not line.startswith("#")]
    assert rows and all(r.startswith("haar.") and r.endswith("\tPASS") for r in rows)


def test_verify_failure_and_errors(capsys):
    assert main(["verify", "haar", "--tol", "haar.norm_rel_err=1e-300"]) == 1
    assert "FAIL" in capsys.readouterr().out
    assert main(["verify", "nonexistent"]) == 2
    assert main(["verify", "haar", "--tol", "haar.norm_rel_err"]) == 2
    assert main(["verify", "haar", "--tol", "haar.typo=1"]) == 2


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "lapdiff", "verify", "pyramid"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "pyramid.roundtrip_rel_err" in proc.stdout
