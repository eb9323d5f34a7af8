"""Object estimates from a recovered stack, the Wiener baseline and the RAPS error metric."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .grid_ops import Grid, PsfModel

__all__ = [
    "RapsCurve",
    "rho_from_mean",
    "rho_from_std",
    "max_normalize",
    "wiener_deconvolve",
    "raps_error",
    "pearson",
]


@dataclass
class RapsCurve:
    radii: np.ndarray
    values: np.ndarray
    counts: np.ndarray

    CSV_HEADER = ("r_cycles_per_lambda", "f", "count")

    def band(self, lo: float, hi: float) -> "RapsCurve":
        """Bins with lo < radius <= hi."""
        sel = (self.radii > lo) & (self.radii <= hi)
        return RapsCurve(self.radii[sel], self.values[sel], self.counts[sel])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for r, f, c in zip(self.radii, self.values, self.counts):
            w.writerow([repr(float(r)), repr(float(f)), int(c)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RapsCurve":
        rows = list(csv.reader(io.StringIO(text)))
        if tuple(rows[0]) != cls.CSV_HEADER:
            raise ValueError(f"unexpected RAPS header {rows[0]}")
        data = rows[1:]
        return cls(
            np.array([float(r[0]) for r in data]),
            np.array([float(r[1]) for r in data]),
            np.array([int(r[2]) for r in data]),
        )


def rho_from_mean(Q: np.ndarray, i0: float = 1.0) -> np.ndarray:
    """Frame mean divided by the mean illumination."""
    if not i0 > 0:
        raise ValueError("i0 must be positive")
    return np.asarray(Q, dtype=float).mean(axis=0) / i0


def rho_from_std(Q: np.ndarray) -> np.ndarray:
    """Pixel-wise population std over frames; proportional to rho for stationary speckle."""
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 3 or Q.shape[0] < 2:
        raise ValueError("rho_from_std needs a stack with at least 2 frames")
    # referencing the first frame makes identical frames give exact zeros
    return (Q - Q[0]).std(axis=0)


def max_normalize(x: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(x))
    return x / peak if peak > 0 else np.array(x, dtype=float)


def wiener_deconvolve(y_bar: np.ndarray, psf: PsfModel, snr_power: float = 1e3) -> np.ndarray:
    """conj(OTF) Y / (|OTF|^2 + 1/snr_power), evaluated spectrally."""
    if not snr_power > 0:
        raise ValueError("snr_power must be positive")
    otf = psf.otf
    spec = np.fft.fft2(np.asarray(y_bar, dtype=float))
    out = np.conj(otf) * spec / (np.abs(otf) ** 2 + 1.0 / snr_power)
    return np.real(np.fft.ifft2(out))


def _radial_bins(grid: Grid) -> tuple[np.ndarray, float]:
    df = 1.0 / (min(grid.n1, grid.n2) * grid.pitch)
    idx = np.rint(grid.radial_frequency() / df).astype(int)
    return idx, df


def raps_error(rho_hat: np.ndarray, rho_star: np.ndarray, pitch: float = 1.0,
               eps: float = 1e-12) -> RapsCurve:
    """Ring-wise normalized spectral error power |F(rho_hat - rho_star)|^2 / |F rho_star|^2.

    Rings are one DFT sample wide (rounded radial index); the DC ring is
    excluded and rings whose reference power is below ``eps`` times the
    largest ring are dropped. Radii are reported in cycles per wavelength.
    """
    rho_hat = np.asarray(rho_hat, dtype=float)
    rho_star = np.asarray(rho_star, dtype=float)
    if rho_hat.shape != rho_star.shape:
        raise ValueError("estimate and reference must share a grid")
    if not np.any(rho_star):
        raise ValueError("reference image is identically zero")
    grid = Grid(*rho_star.shape, pitch)
    idx, df = _radial_bins(grid)
    err = np.abs(np.fft.fft2(rho_hat - rho_star)) ** 2
    ref = np.abs(np.fft.fft2(rho_star)) ** 2
    nbins = idx.max() + 1
    num = np.bincount(idx.ravel(), weights=err.ravel(), minlength=nbins)
    den = np.bincount(idx.ravel(), weights=ref.ravel(), minlength=nbins)
    cnt = np.bincount(idx.ravel(), minlength=nbins)
    keep = (cnt > 0) & (den > eps * den.max())
    keep[0] = False
    k = np.nonzero(keep)[0]
    return RapsCurve(radii=k * df, values=num[k] / den[k], counts=cnt[k])


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    # undefined for a constant image
    return float(np.dot(a, b) / denom) if denom > 0 else float("nan")
