"""Discretization and linear operators on periodic 2D grids.

Images are 2D float arrays of shape ``(n1, n2)``; stacks are 3D arrays of
shape ``(m, n1, n2)`` with the frame index first. Gradient fields carry the
two finite-difference components on the leading axis, ``(2, n1, n2)``.

All operators assume periodic boundaries, so the convolution is BCCB and is
applied by spectral multiplication.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

__all__ = [
    "Grid",
    "PsfModel",
    "fft_workers",
    "convolve",
    "adjoint_convolve",
    "stack_convolve",
    "stack_adjoint_convolve",
    "op_A",
    "op_A_adjoint",
    "op_C",
    "op_C_adjoint",
    "op_D",
    "op_D_adjoint",
    "step_size_bound",
    "power_iteration",
    "rfft2",
    "irfft2",
    "parseval_weights",
]


def fft_workers() -> int:
    """Thread cap for spectral transforms, read from ``SPECKLE_SIM_THREADS``."""
    raw = os.environ.get("SPECKLE_SIM_THREADS")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class Grid:
    """Sampling grid. ``pitch`` is the pixel spacing in units of wavelength."""

    n1: int
    n2: int
    pitch: float

    def __post_init__(self):
        if self.n1 < 2 or self.n2 < 2:
            raise ValueError(f"grid needs at least 2x2 pixels, got {self.n1}x{self.n2}")
        if not self.pitch > 0:
            raise ValueError(f"pitch must be positive, got {self.pitch}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n1, self.n2)

    @property
    def N(self) -> int:
        return self.n1 * self.n2

    def supports_super_resolution(self, na: float) -> bool:
        """True when sampling is finer than lambda / (8 NA)."""
        return self.pitch <= 1.0 / (8.0 * na)

    def wrapped_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Signed periodic pixel offsets from index (0, 0), in wavelengths."""
        y = np.fft.fftfreq(self.n1) * self.n1 * self.pitch
        x = np.fft.fftfreq(self.n2) * self.n2 * self.pitch
        return np.meshgrid(y, x, indexing="ij")

    def centered_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinates relative to the grid center ``(n1 // 2, n2 // 2)``."""
        y = (np.arange(self.n1) - self.n1 // 2) * self.pitch
        x = (np.arange(self.n2) - self.n2 // 2) * self.pitch
        return np.meshgrid(y, x, indexing="ij")

    def frequencies(self) -> tuple[np.ndarray, np.ndarray]:
        """DFT sample frequencies in cycles per wavelength, full layout."""
        fy = np.fft.fftfreq(self.n1, d=self.pitch)
        fx = np.fft.fftfreq(self.n2, d=self.pitch)
        return np.meshgrid(fy, fx, indexing="ij")

    def radial_frequency(self) -> np.ndarray:
        fy, fx = self.frequencies()
        return np.hypot(fy, fx)


@dataclass(frozen=True, eq=False)
class PsfModel:
    """Point spread function sampled on a grid together with its transfer function.

    ``psf`` holds the raw samples (physical density, integrates to ~1 against
    ``pitch**2``). ``otf`` is the spectrum of the unit-sum kernel
    ``psf / psf.sum()``, so ``otf[0, 0] == 1`` and ``max|otf| == 1``. The
    operator H applies that unit-sum kernel.
    """

    grid: Grid
    na: float
    psf: np.ndarray
    otf: np.ndarray
    k0: float = 2.0 * np.pi
    _rotf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.psf.shape != self.grid.shape or self.otf.shape != self.grid.shape:
            raise ValueError("psf/otf shape does not match grid")
        n2 = self.grid.n2
        object.__setattr__(self, "_rotf", np.ascontiguousarray(self.otf[:, : n2 // 2 + 1]))

    @classmethod
    def from_psf(cls, grid: Grid, psf: np.ndarray, na: float) -> "PsfModel":
        psf = np.asarray(psf, dtype=float)
        total = psf.sum()
        if not total > 0:
            raise ValueError("psf must have positive sum")
        otf = np.fft.fft2(psf / total)
        return cls(grid=grid, na=na, psf=psf, otf=otf)

    @classmethod
    def identity(cls, grid: Grid) -> "PsfModel":
        """Flat transfer function: H is the identity."""
        psf = np.zeros(grid.shape)
        psf[0, 0] = 1.0
        return cls.from_psf(grid, psf, na=np.inf)

    @property
    def kernel(self) -> np.ndarray:
        """The unit-sum kernel that H convolves with."""
        return self.psf / self.psf.sum()

    @property
    def cutoff(self) -> float:
        """Incoherent cutoff frequency 2 NA, in cycles per wavelength."""
        return 2.0 * self.na

    @property
    def rotf(self) -> np.ndarray:
        return self._rotf


def _check_grid(psf: PsfModel, x: np.ndarray):
    if x.shape[-2:] != psf.grid.shape:
        raise ValueError(f"array shape {x.shape} does not match grid {psf.grid.shape}")


def rfft2(x: np.ndarray) -> np.ndarray:
    return sfft.rfft2(x, workers=fft_workers())


def irfft2(X: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    return sfft.irfft2(X, s=shape, workers=fft_workers())


def parseval_weights(shape: tuple[int, int]) -> np.ndarray:
    """Weights w on the half spectrum with sum(x**2) == sum(w * |rfft2(x)|**2)."""
    n1, n2 = shape
    w = np.full(n2 // 2 + 1, 2.0)
    w[0] = 1.0
    if n2 % 2 == 0:
        w[-1] = 1.0
    return np.broadcast_to(w / (n1 * n2), (n1, n2 // 2 + 1))


def _spectral_apply(x: np.ndarray, rotf: np.ndarray) -> np.ndarray:
    s = x.shape[-2:]
    w = fft_workers()
    return sfft.irfft2(sfft.rfft2(x, workers=w) * rotf, s=s, workers=w)


def convolve(psf: PsfModel, x: np.ndarray) -> np.ndarray:
    """Apply H to a single image."""
    x = np.asarray(x, dtype=float)
    _check_grid(psf, x)
    if x.ndim != 2:
        raise ValueError("convolve expects a 2D image; use stack_convolve for stacks")
    return _spectral_apply(x, psf.rotf)


def adjoint_convolve(psf: PsfModel, x: np.ndarray) -> np.ndarray:
    """Apply H* (conjugate spectrum) to a single image."""
    x = np.asarray(x, dtype=float)
    _check_grid(psf, x)
    if x.ndim != 2:
        raise ValueError("adjoint_convolve expects a 2D image")
    return _spectral_apply(x, np.conj(psf.rotf))


def stack_convolve(psf: PsfModel, Q: np.ndarray) -> np.ndarray:
    """Frame-wise H on an ``(m, n1, n2)`` stack."""
    Q = np.asarray(Q, dtype=float)
    _check_grid(psf, Q)
    if Q.ndim != 3:
        raise ValueError("stack_convolve expects an (m, n1, n2) stack")
    return _spectral_apply(Q, psf.rotf)


def stack_adjoint_convolve(psf: PsfModel, Q: np.ndarray) -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    _check_grid(psf, Q)
    if Q.ndim != 3:
        raise ValueError("stack_adjoint_convolve expects an (m, n1, n2) stack")
    return _spectral_apply(Q, np.conj(psf.rotf))


def op_A(Q: np.ndarray, i0: float) -> np.ndarray:
    """Average the frames and divide by the mean illumination: (1/(M i0)) sum_m q_m."""
    if not i0 > 0:
        raise ValueError(f"i0 must be positive, got {i0}")
    Q = np.asarray(Q, dtype=float)
    return Q.sum(axis=0) / (Q.shape[0] * i0)


def op_A_adjoint(x: np.ndarray, m: int, i0: float) -> np.ndarray:
    if not i0 > 0:
        raise ValueError(f"i0 must be positive, got {i0}")
    if m < 1:
        raise ValueError("m must be >= 1")
    x = np.asarray(x, dtype=float) / (m * i0)
    return np.broadcast_to(x, (m,) + x.shape).copy()


def op_C(x: np.ndarray) -> np.ndarray:
    """Periodic forward differences along both axes, stacked as (2, n1, n2)."""
    x = np.asarray(x, dtype=float)
    return np.stack([np.roll(x, -1, axis=0) - x, np.roll(x, -1, axis=1) - x])


def op_C_adjoint(g: np.ndarray) -> np.ndarray:
    """Negative discrete divergence, the exact transpose of :func:`op_C`."""
    g = np.asarray(g, dtype=float)
    if g.ndim != 3 or g.shape[0] != 2:
        raise ValueError("gradient field must have shape (2, n1, n2)")
    return (np.roll(g[0], 1, axis=0) - g[0]) + (np.roll(g[1], 1, axis=1) - g[1])


def op_D(Q: np.ndarray, i0: float) -> np.ndarray:
    """Gradient of the frame average, D = C A."""
    return op_C(op_A(Q, i0))


def op_D_adjoint(g: np.ndarray, m: int, i0: float) -> np.ndarray:
    return op_A_adjoint(op_C_adjoint(g), m, i0)


def step_size_bound(m: int, i0: float) -> float:
    """Upper bound 2 + 8/(m i0) on ||1 + D*D + H*H||_op."""
    if m < 1 or not i0 > 0:
        raise ValueError("need m >= 1 and i0 > 0")
    return 2.0 + 8.0 / (m * i0)


def power_iteration(apply, shape, n_iter: int = 200, seed: int = 0, tol: float = 1e-12) -> float:
    """Largest eigenvalue of a symmetric PSD operator given as a callable."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(n_iter):
        w = apply(v)
        new = float(np.vdot(v, w))
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
        if abs(new - lam) <= tol * max(abs(new), 1.0):
            lam = new
            break
        lam = new
    return lam
