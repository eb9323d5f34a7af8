"""Synthetic blind-speckle SIM data: star target, Airy PSF, speckle stacks, noise."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from scipy.special import j1

from .grid_ops import Grid, PsfModel, stack_convolve

__all__ = [
    "SpeckleSpec",
    "NoiseSpec",
    "SimulationResult",
    "make_star",
    "make_psf",
    "airy_intensity",
    "pupil_mask",
    "gen_speckle",
    "make_background",
    "simulate",
    "noise_std_for_snr",
]


@dataclass(frozen=True)
class SpeckleSpec:
    m: int
    na_ill: float
    i0: float = 1.0
    kind: Literal["standard", "squared"] = "standard"
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("speckle count must be >= 1")
        if not self.na_ill > 0:
            raise ValueError("na_ill must be positive")
        if not self.i0 > 0:
            raise ValueError("i0 must be positive")
        if self.kind not in ("standard", "squared"):
            raise ValueError(f"unknown speckle kind {self.kind!r}")


@dataclass(frozen=True)
class NoiseSpec:
    gaussian_snr_db: Optional[float] = None
    photons_per_pixel: Optional[float] = None
    seed: int = 1

    def __post_init__(self):
        if self.photons_per_pixel is not None and self.photons_per_pixel < 1:
            raise ValueError("photons_per_pixel must be >= 1")


@dataclass
class SimulationResult:
    """Measurements plus the clean stack and the Gaussian noise std used."""

    Y: np.ndarray
    clean: np.ndarray
    nu: float
    background: Optional[np.ndarray] = None


def make_star(grid: Grid, arms: int = 40) -> np.ndarray:
    """Star target (1 + cos(arms * theta)) / 2 centered on the grid, values in [0, 1]."""
    if arms < 2 or arms % 2:
        raise ValueError("arms must be even and >= 2")
    y, x = grid.centered_coords()
    theta = np.arctan2(y, x)
    return 0.5 * (1.0 + np.cos(arms * theta))


def airy_intensity(r: np.ndarray, na: float, k0: float = 2.0 * np.pi) -> np.ndarray:
    """(J1(NA k0 r) / (k0 r))^2 k0^2 / pi, with the r = 0 limit (NA/2)^2 k0^2 / pi."""
    r = np.asarray(r, dtype=float)
    z = na * k0 * r
    out = np.empty_like(z)
    small = z < 1e-8
    out[small] = (na / 2.0) ** 2 * k0**2 / np.pi
    zz = z[~small]
    rr = r[~small]
    out[~small] = (j1(zz) / (k0 * rr)) ** 2 * k0**2 / np.pi
    return out


def make_psf(grid: Grid, na: float = 1.49) -> PsfModel:
    """Airy PSF sampled with its peak at index (0, 0) (wrap-around layout)."""
    if not na > 0:
        raise ValueError("na must be positive")
    y, x = grid.wrapped_coords()
    psf = airy_intensity(np.hypot(y, x), na)
    return PsfModel.from_psf(grid, psf, na)


def pupil_mask(grid: Grid, na_ill: float) -> np.ndarray:
    """Boolean disk of radius na_ill (cycles per wavelength) on the DFT grid.

    A field pupil of radius na_ill * k0 in angular frequency is na_ill cycles
    per wavelength, so the intensity spectrum reaches 2 * na_ill, matching the
    incoherent OTF cutoff when na_ill equals the objective NA.
    """
    return grid.radial_frequency() <= na_ill


def _standard_speckle(rng: np.random.Generator, mask: np.ndarray, m: int) -> np.ndarray:
    shape = (m,) + mask.shape
    n = mask.size
    white = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    white *= np.sqrt(0.5)
    field = np.fft.ifft2(np.fft.fft2(white) * mask)
    # E|field|^2 = count(mask) / N for unit-variance white noise
    return np.abs(field) ** 2 * (n / mask.sum())


def gen_speckle(spec: SpeckleSpec, grid: Grid) -> np.ndarray:
    """Fully developed speckle intensity stack of shape (m, n1, n2), ensemble mean i0."""
    mask = pupil_mask(grid, spec.na_ill)
    if not mask.any():
        raise ValueError("pupil disk contains no DFT samples")
    rng = np.random.default_rng(spec.seed)
    intensity = _standard_speckle(rng, mask, spec.m)
    if spec.kind == "squared":
        # E[I^2] = 2 <I>^2 for exponential statistics
        intensity = intensity**2 / 2.0
    return spec.i0 * intensity


def make_background(grid: Grid, seed: int = 7, cutoff: float = 0.4) -> np.ndarray:
    """Smooth positive out-of-focus-like background, mean 1.

    Low-pass filtered white noise (Gaussian spectral window of width ``cutoff``
    cycles per wavelength) shifted to be positive.
    """
    rng = np.random.default_rng(seed)
    f = grid.radial_frequency()
    noise = rng.standard_normal(grid.shape)
    smooth = np.real(np.fft.ifft2(np.fft.fft2(noise) * np.exp(-0.5 * (f / cutoff) ** 2)))
    smooth -= smooth.min()
    smooth += 0.1 * (smooth.max() + 1e-12)
    return smooth / smooth.mean()


def noise_std_for_snr(clean: np.ndarray, snr_db: float) -> float:
    """Per-pixel std nu with 10 log10(mean(clean^2) / nu^2) = snr_db."""
    power = float(np.mean(np.square(clean)))
    return float(np.sqrt(power / 10.0 ** (snr_db / 10.0)))


def simulate(
    rho: np.ndarray,
    speckles: np.ndarray,
    psf: PsfModel,
    noise: NoiseSpec,
    background: Optional[np.ndarray] = None,
    background_fraction: Optional[float] = None,
) -> SimulationResult:
    """Raw images y_m = H(rho * I_m) [+ b] + noise.

    If ``background_fraction`` is given the background image is rescaled so
    its mean is that fraction of the mean noiseless signal H(rho * I_m).
    Poisson sampling (when requested) happens before Gaussian read noise.
    """
    rho = np.asarray(rho, dtype=float)
    speckles = np.asarray(speckles, dtype=float)
    if speckles.ndim != 3 or speckles.shape[0] == 0:
        raise ValueError("speckle stack must be non-empty with shape (m, n1, n2)")
    if rho.shape != psf.grid.shape or speckles.shape[1:] != psf.grid.shape:
        raise ValueError("rho, speckles and psf must share one grid")
    if np.any(rho < 0):
        raise ValueError("rho must be non-negative")

    clean = stack_convolve(psf, rho[None] * speckles)
    b = None
    if background is not None:
        b = np.asarray(background, dtype=float)
        if b.shape != psf.grid.shape:
            raise ValueError("background grid mismatch")
        if background_fraction is not None:
            b = b * (background_fraction * clean.mean() / b.mean())
        clean = clean + b[None]

    rng = np.random.default_rng(noise.seed)
    Y = clean.copy()
    if noise.photons_per_pixel is not None:
        scale = noise.photons_per_pixel / clean.mean()
        Y = rng.poisson(np.clip(clean, 0, None) * scale).astype(float) / scale
    nu = 0.0
    if noise.gaussian_snr_db is not None:
        nu = noise_std_for_snr(clean, noise.gaussian_snr_db)
        Y = Y + nu * rng.standard_normal(Y.shape)
    return SimulationResult(Y=Y, clean=clean, nu=nu, background=b)
