import json
import math
from pathlib import Path

import numpy as np
import pytest

from speckle_sim.cli import main, wiener_snr_power
from speckle_sim.config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config
from speckle_sim.io import find_images, read_image, read_kv, read_stack, sha256_file, write_image, write_stack

SMALL = """\
grid.n1 = 16
grid.n2 = 16
grid.pitch = 0.05
target.arms = 8
speckle.m = 20
solver.max_iters = 60
"""


def write_cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def run(*args):
    return main([str(a) for a in args])


def float_bytes(directory: Path) -> dict:
    return {str(p.relative_to(directory)): p.read_bytes() for p in find_images(directory)}


# ---------------------------------------------------------------- config


def test_config_defaults():
    cfg = parse_config("")
    assert (cfg.grid.n1, cfg.grid.n2, cfg.grid.pitch) == (128, 128, 0.05)
    assert cfg.psf.na == 1.49 and cfg.speckle.m == 100 and cfg.noise.snr_db == 40.0
    assert (cfg.solver.tau, cfg.solver.sigma, cfg.solver.theta) == (0.35, 1.0, 1.0)
    assert cfg.solver.max_iters == 2000 and cfg.solver.rel_tol == 1e-6 and cfg.solver.xi == "auto"


def test_config_parses_values_and_comments():
    cfg = parse_config("# header\nsolver.q = 1/2  # nonconvex\nsolver.xi_sweep = 0.2, 1, 5\n"
                       "noise.photons = 100\nnoise.snr_db = none\nmarginal.enabled = yes\n")
    assert cfg.solver.q == "1/2"
    assert cfg.solver.xi_sweep == (0.2, 1.0, 5.0)
    assert cfg.noise.photons == 100.0 and cfg.noise.snr_db is None
    assert cfg.marginal.enabled is True


@pytest.mark.parametrize("text,line,key", [
    ("grid.n1 = 16\nsolver.bogus = 1\n", 2, "solver.bogus"),
    ("grid.n1 = sixteen\n", 1, "grid.n1"),
    ("\n\nestimator = median\n", 3, "estimator"),
    ("grid.n1 = 8\ngrid.n1 = 9\n", 2, "grid.n1"),
    ("solver.tau = -0.1\n", 1, "solver.tau"),
    ("background.kind = file\nbackground.file = nope.f32\n", 2, "background.file"),
    ("speckle.m = 0\n", 1, "speckle.m"),
])
def test_config_errors_name_line_and_key(text, line, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text, Path("/nonexistent"))
    assert info.value.line == line and info.value.key == key
    assert f"line {line}" in str(info.value)


def test_config_missing_equals():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("grid.n1 16\n")


def test_config_roundtrip():
    cfg = parse_config(SMALL + "solver.xi_sweep = 0.2,1,5\nnoise.photons = 100\nsolver.q = 2/3\n")
    again = parse_config(dump_config(cfg))
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)


def test_config_relative_files(tmp_path):
    write_image(tmp_path / "bg", np.ones((16, 16)), 0.05, "background")
    path = write_cfg(tmp_path, SMALL + "background.kind = file\nbackground.file = bg.f32\n")
    cfg = load_config(path)
    assert Path(cfg.background.file) == tmp_path / "bg.f32"
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_override_seed():
    cfg = ExperimentConfig()
    cfg.override_seed(10)
    assert (cfg.speckle.seed, cfg.noise.seed, cfg.background.seed) == (10, 11, 12)


# ---------------------------------------------------------------- io


def test_image_roundtrip(tmp_path):
    img = np.random.default_rng(0).standard_normal((5, 7))
    write_image(tmp_path / "a", img, 0.05, "test")
    back, meta = read_image(tmp_path / "a")
    np.testing.assert_array_equal(back, img.astype(np.float32))
    assert meta["role"] == "test" and float(meta["pitch"]) == 0.05
    assert (tmp_path / "a.f32").stat().st_size == 35 * 4
    head = (tmp_path / "a.pgm").read_bytes()
    assert head.startswith(b"P5\n7 5\n65535\n") and len(head) == len(b"P5\n7 5\n65535\n") + 70


def test_image_size_mismatch(tmp_path):
    write_image(tmp_path / "a", np.zeros((4, 4)), 0.1, "x", preview=False)
    (tmp_path / "a.f32").write_bytes(b"\0" * 12)
    with pytest.raises(ValueError):
        read_image(tmp_path / "a")
    with pytest.raises(ValueError):
        write_image(tmp_path / "b", np.zeros(3), 0.1, "x")


def test_stack_roundtrip(tmp_path):
    stack = np.random.default_rng(1).random((3, 4, 5)).astype(np.float32)
    write_stack(tmp_path / "s", stack, 0.1, "raw")
    back, meta = read_stack(tmp_path / "s")
    np.testing.assert_array_equal(back, stack)
    assert meta["frames"].split(",") == ["frame_0000", "frame_0001", "frame_0002"]
    assert read_kv(tmp_path / "s" / "stack.txt")["m"] == "3"


def test_wiener_snr_power():
    assert wiener_snr_power({"snr_db": "40.0"}, 100) == pytest.approx(1e6)
    assert wiener_snr_power({"snr_db": "none"}, 100) == 1e3
    assert wiener_snr_power({}, 5) == 1e3


# ---------------------------------------------------------------- cli


def test_simulate_default_config(tmp_path):
    out = tmp_path / "sim"
    assert run("simulate", "--out", out) == 0
    frames = find_images(out / "Y")
    assert len(frames) == 100
    assert len(find_images(out)) == 101
    meta = read_kv(out / "metadata.txt")
    assert (meta["m"], meta["n1"], meta["n2"]) == ("100", "128", "128")
    assert meta["seed_speckle"] == "0" and meta["nu_source"] == "gaussian"
    Y, smeta = read_stack(out / "Y")
    assert Y.shape == (100, 128, 128) and float(smeta["pitch"]) == 0.05


def test_manifest_hashes_and_seeds(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    out = tmp_path / "sim"
    assert run("simulate", "--config", cfg, "--out", out, "--seed", 5) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == {"speckle": 5, "noise": 6, "background": 7}
    assert manifest["command"] == "simulate"
    for rel, digest in manifest["files"].items():
        assert sha256_file(out / rel) == digest
    assert "Y/frame_0000.f32" in manifest["files"]
    # the echoed config reproduces the run
    echo = write_cfg(tmp_path, manifest["config_text"], "echo.cfg")
    out2 = tmp_path / "sim2"
    assert run("simulate", "--config", echo, "--out", out2) == 0
    assert float_bytes(out) == float_bytes(out2)


def test_simulate_rerun_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, SMALL + "background.kind = synthetic\n")
    assert run("simulate", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("simulate", "--config", cfg, "--out", tmp_path / "b") == 0
    a, b = float_bytes(tmp_path / "a"), float_bytes(tmp_path / "b")
    assert a and a == b
    assert run("simulate", "--config", cfg, "--out", tmp_path / "c", "--seed", 99) == 0
    assert float_bytes(tmp_path / "c")["Y/frame_0000.f32"] != a["Y/frame_0000.f32"]


def test_refuses_non_empty_output(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    out = tmp_path / "sim"
    assert run("simulate", "--config", cfg, "--out", out) == 0
    assert run("simulate", "--config", cfg, "--out", out) == 1
    assert run("simulate", "--config", cfg, "--out", out, "--overwrite") == 0


def test_exit_codes_for_config_and_usage(tmp_path, capsys):
    bad = write_cfg(tmp_path, "grid.n1 = 16\nsolver.theta = 3\n", "bad.cfg")
    assert run("simulate", "--config", bad, "--out", tmp_path / "x") == 1
    assert "solver.theta" in capsys.readouterr().err
    assert run("simulate", "--config", tmp_path / "none.cfg", "--out", tmp_path / "y") == 1
    assert run("frobnicate") == 1
    assert run("reconstruct", "--out", tmp_path / "z") == 1  # --input is required


def test_reconstruct_xi_auto_and_log(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    assert run("simulate", "--config", cfg, "--out", tmp_path / "sim") == 0
    assert run("reconstruct", "--config", cfg, "--input", tmp_path / "sim", "--out", tmp_path / "rec") == 0
    nu = float(read_kv(tmp_path / "sim" / "metadata.txt")["nu"])
    lines = (tmp_path / "rec" / "solver_log.csv").read_text().splitlines()
    assert lines[0].startswith("# xi=")
    xi = float(lines[0].split()[1].split("=")[1])
    assert xi == pytest.approx(math.sqrt(20 * 256) * nu, rel=1e-12)
    assert lines[1] == "iter,sparsity_term,tv_term,feasibility_gap"
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[2:]])
    assert rows[0, 0] == 10 and rows[-1, 0] == 60
    assert np.all(rows[:, 2] == 0)
    for name in ("rho_mean", "rho_std", "rho_std_norm", "rho_wiener"):
        assert (tmp_path / "rec" / f"{name}.f32").exists()
    assert read_image(tmp_path / "rec" / "rho_std_norm")[0].max() == 1.0


def test_reconstruct_tv_column_positive(tmp_path):
    cfg = write_cfg(tmp_path, SMALL + "solver.mu_tv = 0.3\nsolver.tau = 0.3\nestimator = mean\n")
    assert run("simulate", "--config", cfg, "--out", tmp_path / "sim") == 0
    assert run("reconstruct", "--config", cfg, "--input", tmp_path / "sim", "--out", tmp_path / "rec") == 0
    lines = (tmp_path / "rec" / "solver_log.csv").read_text().splitlines()[2:]
    assert all(float(line.split(",")[2]) > 0 for line in lines)
    assert not (tmp_path / "rec" / "rho_std.f32").exists()


def test_reconstruct_sweep(tmp_path):
    cfg = write_cfg(tmp_path, SMALL + "solver.xi_sweep = 0.2,1,5\n")
    assert run("simulate", "--config", cfg, "--out", tmp_path / "sim") == 0
    assert run("reconstruct", "--config", cfg, "--input", tmp_path / "sim", "--out", tmp_path / "rec") == 0
    xis = {}
    for f in ("0.2", "1", "5"):
        head = (tmp_path / "rec" / f"xi_{f}x" / "solver_log.csv").read_text().splitlines()[0]
        xis[f] = float(head.split()[1].split("=")[1])
        assert (tmp_path / "rec" / f"xi_{f}x" / "rho_mean.f32").exists()
    assert xis["0.2"] == pytest.approx(0.2 * xis["1"]) and xis["5"] == pytest.approx(5 * xis["1"])


def test_reconstruct_missing_metadata_is_runtime_error(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    stack = np.random.default_rng(0).random((20, 16, 16))
    write_stack(tmp_path / "ext", stack, 0.05, "raw")
    assert run("reconstruct", "--config", cfg, "--input", tmp_path / "ext", "--out", tmp_path / "rec") == 2
    # an explicit xi needs no metadata
    cfg2 = write_cfg(tmp_path, SMALL + "solver.xi = 0.5\n", "explicit.cfg")
    assert run("reconstruct", "--config", cfg2, "--input", tmp_path / "ext", "--out", tmp_path / "rec2") == 0


def test_evaluate_identical_and_zero(tmp_path, capsys):
    rho = np.random.default_rng(0).random((16, 16))
    write_image(tmp_path / "truth", rho, 0.05, "ground_truth")
    write_image(tmp_path / "zero", np.zeros_like(rho), 0.05, "estimate")
    assert run("evaluate", "--estimate", tmp_path / "truth", "--truth", tmp_path / "truth",
               "--out", tmp_path / "e1") == 0
    summary = read_kv(tmp_path / "e1" / "eval_summary.txt")
    assert float(summary["pearson"]) == pytest.approx(1.0, abs=1e-6)
    f = np.loadtxt(tmp_path / "e1" / "eval_raps.csv", delimiter=",", skiprows=1)[:, 1]
    assert np.all(f == 0)
    assert run("evaluate", "--estimate", tmp_path / "zero", "--truth", tmp_path / "truth",
               "--out", tmp_path / "e2") == 0
    f = np.loadtxt(tmp_path / "e2" / "eval_raps.csv", delimiter=",", skiprows=1)[:, 1]
    np.testing.assert_allclose(f, 1.0)
    assert (tmp_path / "e2" / "manifest.json").exists()


def test_evaluate_grid_mismatch(tmp_path):
    write_image(tmp_path / "a", np.ones((8, 8)), 0.05, "x")
    write_image(tmp_path / "b", np.ones((4, 4)), 0.05, "x")
    assert run("evaluate", "--estimate", tmp_path / "a", "--truth", tmp_path / "b", "--out", tmp_path / "e") == 2


def test_mixed_noise_tv_setup(tmp_path):
    cfg = write_cfg(tmp_path, SMALL + "noise.photons = 100\nnoise.snr_db = 15\n"
                    "solver.mu_tv = 0.3\nsolver.tau = 0.3\n")
    assert run("simulate", "--config", cfg, "--out", tmp_path / "sim") == 0
    meta = read_kv(tmp_path / "sim" / "metadata.txt")
    assert meta["photons"] == "100.0" and meta["snr_db"] == "15.0"
    assert meta["nu_source"] == "out_of_band_estimate" and float(meta["nu"]) > 0
    assert run("reconstruct", "--config", cfg, "--input", tmp_path / "sim", "--out", tmp_path / "rec") == 0


def test_marginal_command_and_cap(tmp_path):
    cfg = write_cfg(tmp_path, "grid.n1 = 8\ngrid.n2 = 8\ngrid.pitch = 0.2\ntarget.arms = 4\n"
                    "speckle.m = 200\nnoise.snr_db = 30\nmarginal.max_iter = 30\n")
    assert run("simulate", "--config", cfg, "--out", tmp_path / "sim") == 0
    assert run("marginal", "--config", cfg, "--input", tmp_path / "sim", "--out", tmp_path / "mg") == 0
    assert read_image(tmp_path / "mg" / "rho_marginal")[0].min() >= 0
    capped = write_cfg(tmp_path, "grid.n1 = 8\ngrid.n2 = 8\ngrid.pitch = 0.2\nmarginal.cap = 32\n", "cap.cfg")
    assert run("marginal", "--config", capped, "--input", tmp_path / "sim", "--out", tmp_path / "mg2") == 2


def test_pipeline_background_std_beats_mean(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "grid.n1 = 32\ngrid.n2 = 32\nspeckle.m = 100\nsolver.max_iters = 200\n"
                    "background.kind = synthetic\n")
    assert run("pipeline", "--config", cfg, "--out", tmp_path / "p") == 0
    ev = tmp_path / "p" / "evaluate"
    mean_bg = float(read_kv(ev / "mean_summary.txt")["background_pearson"])
    std_bg = float(read_kv(ev / "std_summary.txt")["background_pearson"])
    assert std_bg < mean_bg
    assert "wiener" in capsys.readouterr().out
    manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
    assert "sim/Y/frame_0000.f32" in manifest["files"] and "reconstruct/rho_mean.f32" in manifest["files"]
