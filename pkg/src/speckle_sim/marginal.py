"""Covariance-matching (marginal) estimator for small grids.

The object is fitted so that the model covariance of the centered raw images,

    Gamma_y(rho) = H diag(rho) Gamma_s diag(rho) H^T + nu^2 I,

matches the empirical one under the Gaussian KL criterion

    D(rho) = 1/2 log|Gamma_y| + 1/2 Tr(Gamma_y^{-1} Gamma_hat)   (constant dropped).

Everything is dense and O(N^3), so grids are capped (default N <= 1024).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .datagen import pupil_mask
from .grid_ops import Grid, PsfModel

__all__ = [
    "MAX_PIXELS",
    "CovModel",
    "speckle_covariance",
    "convolution_matrix",
    "empirical_covariance",
    "measurement_covariance",
    "marginal_objective",
    "marginal_gradient",
    "marginal_objective_and_gradient",
    "LbfgsResult",
    "lbfgs_minimize",
    "fit_marginal",
]

logger = logging.getLogger(__name__)

MAX_PIXELS = 1024


def _check_cap(grid: Grid, cap: int):
    if grid.N > cap:
        raise ValueError(f"grid has {grid.N} pixels; the dense marginal model is capped at {cap}")


def speckle_covariance(grid: Grid, na_ill: float, i0: float = 1.0, cap: int = MAX_PIXELS) -> np.ndarray:
    """Intensity covariance i0^2 |gamma(delta)|^2 of fully developed speckle.

    gamma is the normalized field autocorrelation of a disk pupil of radius
    na_ill (cycles per wavelength) on the periodic grid: the inverse DFT of
    the pupil mask, i.e. a sampled jinc.
    """
    _check_cap(grid, cap)
    mask = pupil_mask(grid, na_ill)
    gamma = np.fft.ifft2(mask) * (mask.size / mask.sum())
    acf = i0**2 * np.abs(gamma) ** 2
    r1, r2 = np.unravel_index(np.arange(grid.N), grid.shape)
    d1 = np.subtract.outer(r1, r1) % grid.n1
    d2 = np.subtract.outer(r2, r2) % grid.n2
    return acf[d1, d2]


def convolution_matrix(psf: PsfModel) -> np.ndarray:
    """Dense N x N matrix of H acting on row-major flattened images."""
    grid = psf.grid
    eye = np.eye(grid.N).reshape(grid.N, *grid.shape)
    cols = np.real(np.fft.ifft2(np.fft.fft2(eye) * psf.otf))
    return cols.reshape(grid.N, grid.N).T


def empirical_covariance(Y: np.ndarray) -> np.ndarray:
    """Population covariance of the frames after removing the frame mean."""
    Y = np.asarray(Y, dtype=float)
    X = Y.reshape(Y.shape[0], -1)
    X = X - X.mean(axis=0)
    return X.T @ X / X.shape[0]


@dataclass
class CovModel:
    gamma_s: np.ndarray
    noise_var: float
    psf: PsfModel
    cap: int = MAX_PIXELS

    def __post_init__(self):
        _check_cap(self.psf.grid, self.cap)
        n = self.psf.grid.N
        if self.gamma_s.shape != (n, n):
            raise ValueError("gamma_s must be N x N for the PSF grid")

    @classmethod
    def build(cls, psf: PsfModel, na_ill: float, noise_var: float, i0: float = 1.0,
              cap: int = MAX_PIXELS) -> "CovModel":
        return cls(speckle_covariance(psf.grid, na_ill, i0, cap), noise_var, psf, cap)

    @property
    def grid(self) -> Grid:
        return self.psf.grid

    @cached_property
    def H(self) -> np.ndarray:
        return convolution_matrix(self.psf)


def measurement_covariance(rho: np.ndarray, cov: CovModel) -> np.ndarray:
    r = np.asarray(rho, dtype=float).reshape(-1)
    HR = cov.H * r[None, :]
    G = HR @ cov.gamma_s @ HR.T
    G[np.diag_indices_from(G)] += cov.noise_var
    return G


def _factor(rho, cov):
    if not cov.noise_var > 0:
        raise ValueError("the marginal model needs a positive noise variance")
    G = measurement_covariance(rho, cov)
    try:
        return G, cho_factor(G, lower=True)
    except LinAlgError as exc:
        raise ValueError("measurement covariance is not positive definite") from exc


def marginal_objective_and_gradient(rho, cov: CovModel, gamma_hat) -> tuple[float, np.ndarray]:
    """KL criterion and its gradient, sharing one Cholesky factorization.

    The gradient is ((Omega^T (Gamma_y - Gamma_hat) Omega) o Gamma_s) rho with
    Omega = Gamma_y^{-1} H and o the Hadamard product.
    """
    rho = np.asarray(rho, dtype=float)
    G, cf = _factor(rho, cov)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    trace = np.trace(cho_solve(cf, gamma_hat))
    value = 0.5 * logdet + 0.5 * trace
    omega = cho_solve(cf, cov.H)
    inner = omega.T @ (G - gamma_hat) @ omega
    grad = (inner * cov.gamma_s) @ rho.reshape(-1)
    return float(value), grad.reshape(rho.shape)


def marginal_objective(rho, cov: CovModel, gamma_hat) -> float:
    rho = np.asarray(rho, dtype=float)
    _, cf = _factor(rho, cov)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return float(0.5 * logdet + 0.5 * np.trace(cho_solve(cf, gamma_hat)))


def marginal_gradient(rho, cov: CovModel, gamma_hat) -> np.ndarray:
    return marginal_objective_and_gradient(rho, cov, gamma_hat)[1]


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    n_iter: int
    converged: bool
    message: str
    history: list = field(default_factory=list)


def lbfgs_minimize(
    fun_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    max_iter: int = 200,
    memory: int = 10,
    c1: float = 1e-4,
    max_backtracks: int = 40,
    gtol: float = 1e-8,
    ftol: float = 1e-12,
    lower: Optional[float] = None,
) -> LbfgsResult:
    """Limited-memory BFGS with a backtracking (Armijo) line search.

    With ``lower`` set, trial points are clipped to ``x >= lower`` and the
    sufficient-decrease test uses the actual (projected) step.
    """
    shape = np.shape(x0)
    x = np.asarray(x0, dtype=float).reshape(-1).copy()
    if lower is not None:
        x = np.maximum(x, lower)
    f, g = fun_grad(x.reshape(shape))
    g = np.asarray(g, dtype=float).reshape(-1)
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    history = [f]
    message = "max_iter reached"
    converged = False

    def projected_grad_norm(x, g):
        if lower is None:
            return np.linalg.norm(g)
        pg = np.where((x <= lower) & (g > 0), 0.0, g)
        return np.linalg.norm(pg)

    k = 0
    for k in range(1, max_iter + 1):
        if projected_grad_norm(x, g) <= gtol:
            converged, message = True, "gradient tolerance reached"
            k -= 1
            break

        # two-loop recursion
        qv = g.copy()
        alphas = []
        for s, y in zip(reversed(s_hist), reversed(y_hist)):
            a = np.dot(s, qv) / np.dot(y, s)
            alphas.append(a)
            qv -= a * y
        if s_hist:
            qv *= np.dot(s_hist[-1], y_hist[-1]) / np.dot(y_hist[-1], y_hist[-1])
        for (s, y), a in zip(zip(s_hist, y_hist), reversed(alphas)):
            b = np.dot(y, qv) / np.dot(y, s)
            qv += (a - b) * s
        direction = -qv
        if lower is not None:
            # freeze coordinates pinned at the bound and pushed outward
            direction[(x <= lower) & (direction < 0)] = 0.0
        if np.dot(direction, g) >= 0:
            direction = -g
            s_hist.clear()
            y_hist.clear()
        if not s_hist:
            direction *= min(1.0, 1.0 / max(np.linalg.norm(direction), 1e-300))

        step = 1.0
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + step * direction
            if lower is not None:
                x_new = np.maximum(x_new, lower)
            try:
                f_new, g_new = fun_grad(x_new.reshape(shape))
            except ValueError:
                step *= 0.5
                continue
            if np.isfinite(f_new) and f_new <= f + c1 * np.dot(g, x_new - x):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            message = "line search failed"
            logger.warning("lbfgs: line search failed at iteration %d", k)
            break

        g_new = np.asarray(g_new, dtype=float).reshape(-1)
        s = x_new - x
        y = g_new - g
        if np.dot(s, y) > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        f_prev = f
        x, f, g = x_new, float(f_new), g_new
        history.append(f)
        if abs(f_prev - f) <= ftol * max(abs(f), abs(f_prev), 1.0):
            converged, message = True, "function tolerance reached"
            break

    return LbfgsResult(x.reshape(shape), float(f), k, converged, message, history)


def fit_marginal(
    Y: np.ndarray,
    cov: CovModel,
    rho0: Optional[np.ndarray] = None,
    max_iter: int = 200,
) -> LbfgsResult:
    """Minimize the KL criterion for rho >= 0 from the centered frames of Y."""
    Y = np.asarray(Y, dtype=float)
    if Y.shape[1:] != cov.grid.shape:
        raise ValueError("Y does not match the covariance model grid")
    gamma_hat = empirical_covariance(Y)
    if rho0 is None:
        rho0 = np.full(cov.grid.shape, 0.5)
    return lbfgs_minimize(
        lambda r: marginal_objective_and_gradient(r, cov, gamma_hat),
        rho0,
        max_iter=max_iter,
        lower=0.0,
    )
