"""Experiment configuration: flat ``section.key = value`` text files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "load_config", "dump_config"]


class ConfigError(ValueError):
    """Invalid configuration; carries the offending line and key when known."""

    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.key = key


def _opt_float(s: str) -> Optional[float]:
    s = s.strip()
    return None if s.lower() in ("", "none") else float(s)


def _opt_str(s: str) -> Optional[str]:
    s = s.strip()
    return None if s.lower() in ("", "none") else s


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _xi(s: str):
    s = s.strip()
    return "auto" if s == "auto" else float(s)


def _float_list(s: str) -> Optional[tuple]:
    s = s.strip()
    if not s or s.lower() == "none":
        return None
    return tuple(float(v) for v in s.split(","))


@dataclass
class GridSection:
    n1: int = 128
    n2: int = 128
    pitch: float = 0.05


@dataclass
class TargetSection:
    kind: str = "star"
    arms: int = 40
    file: Optional[str] = None


@dataclass
class PsfSection:
    na: float = 1.49


@dataclass
class SpeckleSection:
    m: int = 100
    na_ill: float = 1.49
    kind: str = "standard"
    i0: float = 1.0
    seed: int = 0


@dataclass
class NoiseSection:
    snr_db: Optional[float] = 40.0
    photons: Optional[float] = None
    seed: int = 1


@dataclass
class BackgroundSection:
    kind: str = "none"
    file: Optional[str] = None
    amplitude: float = 0.5
    seed: int = 7


@dataclass
class SolverSection:
    p: int = 2
    q: str = "1"
    mu_tv: float = 0.0
    xi: object = "auto"
    xi_sweep: Optional[tuple] = None
    tau: float = 0.35
    sigma: float = 1.0
    theta: float = 1.0
    max_iters: int = 2000
    rel_tol: float = 1e-6
    log_every: int = 10


@dataclass
class MarginalSection:
    enabled: bool = False
    cap: int = 1024
    max_iter: int = 200


@dataclass
class ExperimentConfig:
    grid: GridSection = field(default_factory=GridSection)
    target: TargetSection = field(default_factory=TargetSection)
    psf: PsfSection = field(default_factory=PsfSection)
    speckle: SpeckleSection = field(default_factory=SpeckleSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    background: BackgroundSection = field(default_factory=BackgroundSection)
    solver: SolverSection = field(default_factory=SolverSection)
    marginal: MarginalSection = field(default_factory=MarginalSection)
    estimator: str = "both"
    output_dir: str = "out"

    def override_seed(self, seed: int):
        self.speckle.seed = seed
        self.noise.seed = seed + 1
        self.background.seed = seed + 2


_CONVERTERS = {
    "grid.n1": int, "grid.n2": int, "grid.pitch": float,
    "target.kind": str, "target.arms": int, "target.file": _opt_str,
    "psf.na": float,
    "speckle.m": int, "speckle.na_ill": float, "speckle.kind": str,
    "speckle.i0": float, "speckle.seed": int,
    "noise.snr_db": _opt_float, "noise.photons": _opt_float, "noise.seed": int,
    "background.kind": str, "background.file": _opt_str,
    "background.amplitude": float, "background.seed": int,
    "solver.p": int, "solver.q": str, "solver.mu_tv": float, "solver.xi": _xi,
    "solver.xi_sweep": _float_list, "solver.tau": float, "solver.sigma": float,
    "solver.theta": float, "solver.max_iters": int, "solver.rel_tol": float,
    "solver.log_every": int,
    "marginal.enabled": _bool, "marginal.cap": int, "marginal.max_iter": int,
    "estimator": str, "output_dir": str,
}

_CHOICES = {
    "target.kind": ("star", "file"),
    "speckle.kind": ("standard", "squared"),
    "background.kind": ("none", "synthetic", "file"),
    "estimator": ("mean", "std", "both"),
}


def _set(cfg: ExperimentConfig, key: str, value):
    if "." in key:
        section, name = key.split(".", 1)
        setattr(getattr(cfg, section), name, value)
    else:
        setattr(cfg, key, value)


def _validate(cfg: ExperimentConfig, lines: dict[str, int], base: Optional[Path]):
    def fail(key, msg):
        raise ConfigError(msg, lines.get(key), key)

    if cfg.grid.n1 < 2 or cfg.grid.n2 < 2:
        fail("grid.n1", "grid needs at least 2x2 pixels")
    if cfg.grid.pitch <= 0:
        fail("grid.pitch", "pitch must be positive")
    if cfg.psf.na <= 0:
        fail("psf.na", "na must be positive")
    if cfg.speckle.m < 1:
        fail("speckle.m", "need at least one speckle pattern")
    if cfg.speckle.na_ill <= 0:
        fail("speckle.na_ill", "na_ill must be positive")
    if cfg.speckle.i0 <= 0:
        fail("speckle.i0", "i0 must be positive")
    if cfg.noise.photons is not None and cfg.noise.photons < 1:
        fail("noise.photons", "photons per pixel must be >= 1")
    if cfg.target.kind == "file":
        if not cfg.target.file:
            fail("target.file", "target.kind = file needs target.file")
        if not _resolve(cfg.target.file, base).exists():
            fail("target.file", f"file not found: {cfg.target.file}")
    if cfg.background.kind == "file":
        if not cfg.background.file:
            fail("background.file", "background.kind = file needs background.file")
        if not _resolve(cfg.background.file, base).exists():
            fail("background.file", f"file not found: {cfg.background.file}")
    if cfg.background.amplitude < 0:
        fail("background.amplitude", "amplitude must be non-negative")
    if cfg.solver.log_every < 1:
        fail("solver.log_every", "log_every must be >= 1")
    from .solver import SolverConfig  # local import keeps config importable on its own

    try:
        SolverConfig(
            p=cfg.solver.p, q=cfg.solver.q, mu_tv=cfg.solver.mu_tv, xi=cfg.solver.xi,
            tau=cfg.solver.tau, sigma=cfg.solver.sigma, theta=cfg.solver.theta,
            max_iters=cfg.solver.max_iters, rel_tol=cfg.solver.rel_tol, i0=cfg.speckle.i0,
        )
    except ValueError as exc:
        key = next((k for k in lines if k.startswith("solver.")), None)
        raise ConfigError(f"invalid solver settings: {exc}", lines.get(key), key) from exc


def _resolve(path: str, base: Optional[Path]) -> Path:
    p = Path(path)
    if not p.is_absolute() and base is not None:
        p = base / p
    return p


def parse_config(text: str, base_dir: Optional[Path] = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    cfg = ExperimentConfig()
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError("expected 'key = value'", lineno)
        if key not in _CONVERTERS:
            raise ConfigError("unknown key", lineno, key)
        if key in lines:
            raise ConfigError(f"duplicate key (first set on line {lines[key]})", lineno, key)
        try:
            converted = _CONVERTERS[key](value.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value {value.strip()!r}: {exc}", lineno, key) from exc
        if key in _CHOICES and converted not in _CHOICES[key]:
            raise ConfigError(f"must be one of {', '.join(_CHOICES[key])}", lineno, key)
        _set(cfg, key, converted)
        lines[key] = lineno
    _validate(cfg, lines, base_dir)
    if base_dir is not None:
        if cfg.target.file:
            cfg.target.file = str(_resolve(cfg.target.file, base_dir))
        if cfg.background.file:
            cfg.background.file = str(_resolve(cfg.background.file, base_dir))
    return cfg


def load_config(path: Optional[Path]) -> ExperimentConfig:
    if path is None:
        return parse_config("")
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base_dir=path.parent)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; ``parse_config(dump_config(c))`` reproduces ``c``."""
    out = []
    for key in _CONVERTERS:
        if "." in key:
            section, name = key.split(".", 1)
            value = getattr(getattr(cfg, section), name)
        else:
            value = getattr(cfg, key)
        out.append(f"{key} = {_fmt(value)}")
    return "\n".join(out) + "\n"


def as_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
