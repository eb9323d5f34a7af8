"""Command-line front end: simulate, reconstruct, evaluate, marginal, pipeline.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime or numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, as_dict, dump_config, load_config
from .datagen import NoiseSpec, SpeckleSpec, gen_speckle, make_background, make_psf, make_star, simulate
from .estimate import max_normalize, pearson, raps_error, rho_from_mean, rho_from_std, wiener_deconvolve
from .grid_ops import Grid
from .io import read_image, read_kv, read_stack, sha256_file, write_image, write_kv, write_stack
from .marginal import CovModel, fit_marginal
from .solver import SolverConfig, estimate_nu, pd_solve

logger = logging.getLogger("speckle_sim")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

LOG_HEADER = ("iter", "sparsity_term", "tv_term", "feasibility_gap")


class UsageError(Exception):
    """Bad command-line usage; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _prepare_out(out: Path, overwrite: bool) -> Path:
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise UsageError(f"output directory {out} is not empty (use --overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seeds(cfg: ExperimentConfig) -> dict:
    return {"speckle": cfg.speckle.seed, "noise": cfg.noise.seed, "background": cfg.background.seed}


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, extra: Optional[dict] = None):
    """manifest.json: config echo, seeds and sha256 of every file below ``out``."""
    out = Path(out)
    files = {
        str(p.relative_to(out)): sha256_file(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "command": command,
        "version": __version__,
        "config": as_dict(cfg),
        "config_text": dump_config(cfg),
        "seeds": _seeds(cfg),
        "files": files,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _grid(cfg: ExperimentConfig) -> Grid:
    return Grid(cfg.grid.n1, cfg.grid.n2, cfg.grid.pitch)


def _load_on_grid(path, grid: Grid, what: str) -> np.ndarray:
    img, _ = read_image(Path(path))
    if img.shape != grid.shape:
        raise ValueError(f"{what} image is {img.shape}, config grid is {grid.shape}")
    return img


# ---------------------------------------------------------------- simulate


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> dict:
    """Write the raw stack (Y/), the ground truth, optional background and metadata."""
    grid = _grid(cfg)
    if cfg.target.kind == "star":
        rho = make_star(grid, cfg.target.arms)
    else:
        rho = _load_on_grid(cfg.target.file, grid, "target")
    psf = make_psf(grid, cfg.psf.na)
    speckles = gen_speckle(
        SpeckleSpec(cfg.speckle.m, cfg.speckle.na_ill, cfg.speckle.i0, cfg.speckle.kind, cfg.speckle.seed), grid
    )
    background = None
    if cfg.background.kind == "synthetic":
        background = make_background(grid, cfg.background.seed)
    elif cfg.background.kind == "file":
        background = _load_on_grid(cfg.background.file, grid, "background")
    noise = NoiseSpec(cfg.noise.snr_db, cfg.noise.photons, cfg.noise.seed)
    res = simulate(rho, speckles, psf, noise, background,
                   cfg.background.amplitude if background is not None else None)

    # with shot noise the Gaussian std alone understates the residual; use the
    # out-of-band estimate as the Gaussian-equivalent nu for xi = auto
    nu, nu_source = res.nu, "gaussian"
    if cfg.noise.photons is not None:
        nu, nu_source = estimate_nu(res.Y, psf), "out_of_band_estimate"

    write_stack(out / "Y", res.Y, grid.pitch, "raw")
    write_image(out / "truth", rho, grid.pitch, "ground_truth")
    if res.background is not None:
        write_image(out / "background", res.background, grid.pitch, "background")
    meta = {
        "m": cfg.speckle.m,
        "n1": grid.n1,
        "n2": grid.n2,
        "pitch": repr(grid.pitch),
        "na": repr(cfg.psf.na),
        "na_ill": repr(cfg.speckle.na_ill),
        "i0": repr(cfg.speckle.i0),
        "speckle_kind": cfg.speckle.kind,
        "nu": repr(nu),
        "nu_source": nu_source,
        "nu_gaussian": repr(res.nu),
        "snr_db": cfg.noise.snr_db if cfg.noise.snr_db is not None else "none",
        "photons": cfg.noise.photons if cfg.noise.photons is not None else "none",
        "background": "background" if res.background is not None else "none",
        "seed_speckle": cfg.speckle.seed,
        "seed_noise": cfg.noise.seed,
        "seed_background": cfg.background.seed,
    }
    write_kv(out / "metadata.txt", meta)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    logger.info("simulate: wrote %d frames to %s (nu=%.4g)", cfg.speckle.m, out, nu)
    return meta


# ---------------------------------------------------------------- reconstruct


def _solver_config(cfg: ExperimentConfig, xi) -> SolverConfig:
    s = cfg.solver
    return SolverConfig(p=s.p, q=s.q, mu_tv=s.mu_tv, xi=xi, tau=s.tau, sigma=s.sigma,
                        theta=s.theta, max_iters=s.max_iters, rel_tol=s.rel_tol, i0=cfg.speckle.i0)


def _read_metadata(y_dir: Path) -> dict:
    path = Path(y_dir) / "metadata.txt"
    if not path.exists():
        return {}
    return read_kv(path)


def _solve_one(Y, psf, scfg: SolverConfig, nu, out: Path, log_every: int):
    out.mkdir(parents=True, exist_ok=True)
    rows = []

    def cb(k, sparsity, tv, gap):
        rows.append((k, sparsity, tv, gap))

    state = pd_solve(Y, psf, scfg, nu=nu, callback=cb, log_every=log_every)
    with open(out / "solver_log.csv", "w", encoding="utf-8") as fh:
        fh.write(f"# xi={state.xi!r} stop={state.stop_reason}\n")
        fh.write(",".join(LOG_HEADER) + "\n")
        for k, sparsity, tv, gap in rows:
            fh.write(f"{k},{sparsity!r},{tv!r},{gap!r}\n")
    return state


def _write_estimates(Q, cfg: ExperimentConfig, grid: Grid, out: Path):
    if cfg.estimator in ("mean", "both"):
        write_image(out / "rho_mean", rho_from_mean(Q, cfg.speckle.i0), grid.pitch, "estimate_mean")
    if cfg.estimator in ("std", "both"):
        if Q.shape[0] < 2:
            raise ValueError("the std estimator needs at least two frames")
        std = rho_from_std(Q)
        write_image(out / "rho_std", std, grid.pitch, "estimate_std_raw")
        write_image(out / "rho_std_norm", max_normalize(std), grid.pitch, "estimate_std_normalized")


def wiener_snr_power(meta: dict, m: int) -> float:
    """Per-pixel SNR of the frame mean when the SNR is known, else 1e3."""
    snr_db = meta.get("snr_db", "none")
    if snr_db in ("none", ""):
        return 1e3
    return 10.0 ** (float(snr_db) / 10.0) * m


def cmd_reconstruct(cfg: ExperimentConfig, y_dir: Path, out: Path) -> dict:
    y_dir = Path(y_dir)
    stack_dir = y_dir / "Y" if (y_dir / "Y" / "stack.txt").exists() else y_dir
    Y, smeta = read_stack(stack_dir)
    meta = _read_metadata(y_dir)
    grid = Grid(Y.shape[1], Y.shape[2], float(smeta["pitch"]))
    if (grid.n1, grid.n2) != (cfg.grid.n1, cfg.grid.n2) or grid.pitch != cfg.grid.pitch:
        logger.info("reconstruct: using the stack grid %s, pitch %g", grid.shape, grid.pitch)
    psf = make_psf(grid, cfg.psf.na)
    nu = float(meta["nu"]) if "nu" in meta else None

    needs_nu = cfg.solver.xi == "auto" or cfg.solver.xi_sweep is not None
    if needs_nu and nu is None:
        raise RuntimeError(f"{y_dir}: metadata with the noise std nu is required for xi = auto")
    if needs_nu and not nu > 0:
        raise RuntimeError("xi = auto needs a positive noise std; set solver.xi explicitly")

    wiener = wiener_deconvolve(Y.mean(axis=0) / cfg.speckle.i0, psf, wiener_snr_power(meta, Y.shape[0]))
    write_image(out / "rho_wiener", wiener, grid.pitch, "wiener_baseline")

    summary = {}
    if cfg.solver.xi_sweep is None:
        state = _solve_one(Y, psf, _solver_config(cfg, cfg.solver.xi), nu, out, cfg.solver.log_every)
        _write_estimates(state.Q, cfg, grid, out)
        summary.update(xi=state.xi, iterations=state.iter, stop=state.stop_reason,
                       feasibility_gap=state.feasibility_gap)
    else:
        xi_real = math.sqrt(Y.shape[0] * grid.N) * nu
        for factor in cfg.solver.xi_sweep:
            sub = out / f"xi_{factor:g}x"
            state = _solve_one(Y, psf, _solver_config(cfg, factor * xi_real), nu, sub, cfg.solver.log_every)
            _write_estimates(state.Q, cfg, grid, sub)
            summary[f"xi_{factor:g}x"] = {"xi": state.xi, "iterations": state.iter,
                                          "stop": state.stop_reason,
                                          "feasibility_gap": state.feasibility_gap}
    write_kv(out / "reconstruct.txt", {k: v for k, v in summary.items() if not isinstance(v, dict)}
             or {"sweep": ",".join(summary)})
    return summary


# ---------------------------------------------------------------- evaluate


def evaluate_images(rho_hat: np.ndarray, rho_star: np.ndarray, pitch: float,
                    background: Optional[np.ndarray] = None, normalize: bool = False):
    if rho_hat.shape != rho_star.shape:
        raise ValueError(f"grid mismatch: estimate {rho_hat.shape} vs truth {rho_star.shape}")
    if normalize:
        rho_hat, rho_star = max_normalize(rho_hat), max_normalize(rho_star)
    curve = raps_error(rho_hat, rho_star, pitch)
    summary = {
        "pearson": pearson(rho_hat, rho_star),
        "raps_mean": float(np.mean(curve.values)),
        "bins": int(curve.values.size),
        "normalized": str(normalize).lower(),
    }
    if background is not None:
        if background.shape != rho_hat.shape:
            raise ValueError("background grid mismatch")
        summary["background_pearson"] = pearson(rho_hat, background)
    return curve, summary


def cmd_evaluate(estimate: Path, truth: Path, out: Path, background: Optional[Path] = None,
                 normalize: bool = False, name: str = "eval") -> dict:
    rho_hat, meta = read_image(estimate)
    rho_star, _ = read_image(truth)
    bg = read_image(background)[0] if background is not None else None
    curve, summary = evaluate_images(rho_hat, rho_star, float(meta["pitch"]), bg, normalize)
    (out / f"{name}_raps.csv").write_text(curve.to_csv(), encoding="utf-8")
    write_kv(out / f"{name}_summary.txt", {k: repr(v) if isinstance(v, float) else v
                                           for k, v in summary.items()})
    return summary


# ---------------------------------------------------------------- marginal


def cmd_marginal(cfg: ExperimentConfig, y_dir: Path, out: Path) -> dict:
    y_dir = Path(y_dir)
    stack_dir = y_dir / "Y" if (y_dir / "Y" / "stack.txt").exists() else y_dir
    Y, smeta = read_stack(stack_dir)
    meta = _read_metadata(y_dir)
    if "nu" not in meta:
        raise RuntimeError(f"{y_dir}: metadata with the noise std nu is required")
    grid = Grid(Y.shape[1], Y.shape[2], float(smeta["pitch"]))
    psf = make_psf(grid, cfg.psf.na)
    nu = float(meta["nu"])
    cov = CovModel.build(psf, cfg.speckle.na_ill, nu**2, cfg.speckle.i0, cfg.marginal.cap)
    res = fit_marginal(Y, cov, max_iter=cfg.marginal.max_iter)
    write_image(out / "rho_marginal", res.x, grid.pitch, "estimate_marginal")
    summary = {"objective": res.fun, "iterations": res.n_iter, "converged": str(res.converged).lower(),
               "message": res.message}
    write_kv(out / "marginal.txt", {k: repr(v) if isinstance(v, float) else v for k, v in summary.items()})
    return summary


# ---------------------------------------------------------------- pipeline


def cmd_pipeline(cfg: ExperimentConfig, out: Path) -> dict:
    sim_dir, rec_dir, eval_dir = out / "sim", out / "reconstruct", out / "evaluate"
    for d in (sim_dir, rec_dir, eval_dir):
        d.mkdir(parents=True, exist_ok=True)
    meta = cmd_simulate(cfg, sim_dir)
    bg = sim_dir / "background" if meta["background"] != "none" else None
    cmd_reconstruct(cfg, sim_dir, rec_dir)
    truth = sim_dir / "truth"

    rec_dirs = [rec_dir]
    if cfg.solver.xi_sweep is not None:
        rec_dirs = [rec_dir / f"xi_{f:g}x" for f in cfg.solver.xi_sweep]
    results = {"wiener": cmd_evaluate(rec_dir / "rho_wiener", truth, eval_dir, bg, name="wiener")}
    for d in rec_dirs:
        prefix = "" if d == rec_dir else d.name + "_"
        if (d / "rho_mean.f32").exists():
            results[prefix + "mean"] = cmd_evaluate(d / "rho_mean", truth, eval_dir, bg, name=prefix + "mean")
        if (d / "rho_std.f32").exists():
            results[prefix + "std"] = cmd_evaluate(d / "rho_std", truth, eval_dir, bg, normalize=True,
                                                   name=prefix + "std")
    if cfg.marginal.enabled:
        mdir = out / "marginal"
        mdir.mkdir(exist_ok=True)
        cmd_marginal(cfg, sim_dir, mdir)
        results["marginal"] = cmd_evaluate(mdir / "rho_marginal", truth, eval_dir, bg, normalize=True,
                                           name="marginal")
    return results


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="speckle-sim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", type=Path, help="key = value experiment file (defaults if omitted)")
            p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--out", type=Path, help="output directory (default: config output_dir)")
        p.add_argument("--overwrite", action="store_true", help="allow a non-empty output directory")

    common(sub.add_parser("simulate", help="generate a raw speckle stack and ground truth"))
    p = sub.add_parser("reconstruct", help="joint reconstruction from a simulated or external stack")
    common(p)
    p.add_argument("--input", type=Path, required=True, help="simulate output or stack directory")
    p = sub.add_parser("evaluate", help="RAPS curve and correlation summary")
    common(p, needs_config=False)
    p.add_argument("--estimate", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--background", type=Path)
    p.add_argument("--normalize", action="store_true", help="max-normalize both images first")
    p = sub.add_parser("marginal", help="covariance-matching estimate (small grids only)")
    common(p)
    p.add_argument("--input", type=Path, required=True)
    common(sub.add_parser("pipeline", help="simulate, reconstruct, evaluate and optionally marginal"))
    return parser


def _run(args) -> int:
    if args.command == "evaluate":
        out = _prepare_out(args.out or Path("out"), args.overwrite)
        summary = cmd_evaluate(args.estimate, args.truth, out, args.background, args.normalize)
        cfg = ExperimentConfig()
        write_manifest(out, "evaluate", cfg, {"inputs": {
            "estimate": str(args.estimate), "truth": str(args.truth),
            "background": str(args.background) if args.background else None}})
        for k, v in summary.items():
            print(f"{k}={v}")
        return EXIT_OK

    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg.override_seed(args.seed)
    out = _prepare_out(args.out or Path(cfg.output_dir), args.overwrite)
    if args.out is not None:
        cfg.output_dir = str(args.out)

    if args.command == "simulate":
        cmd_simulate(cfg, out)
        extra = None
    elif args.command == "reconstruct":
        cmd_reconstruct(cfg, args.input, out)
        extra = {"inputs": {"stack": str(args.input)}}
    elif args.command == "marginal":
        cmd_marginal(cfg, args.input, out)
        extra = {"inputs": {"stack": str(args.input)}}
    else:
        results = cmd_pipeline(cfg, out)
        for name, summary in results.items():
            print(name + " " + " ".join(f"{k}={v}" for k, v in summary.items()))
        extra = None
    write_manifest(out, args.command, cfg, extra)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, RuntimeError, OSError, KeyError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
