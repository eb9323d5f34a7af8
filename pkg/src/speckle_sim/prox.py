"""Proximal operators for group l_{p,q} penalties and the l2-ball constraint.

Group functions take an array and an ``axis`` naming the within-group
coordinate; every other index enumerates disjoint groups. For a flat vector
with contiguous groups of size g use ``x.reshape(-1, g)`` with ``axis=-1``.
For a solver stack of shape (M, n1, n2) the groups are pixels and ``axis=0``.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Callable

import numpy as np

__all__ = [
    "SUPPORTED_PQ",
    "normalize_q",
    "group_norm_pq",
    "prox_l11",
    "prox_group_l21",
    "prox_group_l2q",
    "prox_group_pq",
    "moreau_conjugate_prox",
    "project_l2_ball",
]

SUPPORTED_PQ = ((1, Fraction(1)), (2, Fraction(1)), (2, Fraction(1, 2)), (2, Fraction(2, 3)))


def normalize_q(q) -> Fraction:
    """Map 1, 0.5, 2/3, "1/2", ... onto one of the supported exponents."""
    if isinstance(q, str):
        q = Fraction(q)
    qf = float(q)
    for cand in (Fraction(1), Fraction(1, 2), Fraction(2, 3)):
        if abs(qf - float(cand)) < 1e-9:
            return cand
    raise ValueError(f"unsupported q={q!r}; expected one of 1, 1/2, 2/3")


def _group_l2(x: np.ndarray, axis: int) -> np.ndarray:
    axis = axis % x.ndim
    sq = np.sum(np.square(x), axis=axis, keepdims=True)
    return np.sqrt(sq)


def _check_lambda(lam: float):
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")


def group_norm_pq(x: np.ndarray, p: int, q, axis: int = -1) -> float:
    """sum over groups of ||x_G||_p ** q."""
    norms = np.linalg.norm(x, ord=p, axis=axis)
    return float(np.sum(norms ** float(q)))


def prox_l11(x: np.ndarray, lam: float) -> np.ndarray:
    """Element-wise soft threshold."""
    _check_lambda(lam)
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


def prox_group_l21(x: np.ndarray, lam: float, axis: int = -1) -> np.ndarray:
    """Group shrinkage max(1 - lam/||x_G||, 0) x_G."""
    _check_lambda(lam)
    x = np.asarray(x, dtype=float)
    nrm = _group_l2(x, axis)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(nrm > lam, 1.0 - lam / nrm, 0.0)
    return factor * x


def _factor_half(nrm: np.ndarray, lam: float) -> np.ndarray:
    thresh = 1.5 * lam ** (2.0 / 3.0)
    keep = nrm > thresh
    out = np.zeros_like(nrm)
    r = nrm[keep]
    arg = np.clip(lam / 4.0 * (3.0 / r) ** 1.5, -1.0, 1.0)
    psi = np.arccos(arg)
    omega = np.cos(np.pi / 3.0 - psi / 3.0) ** 3
    num = 16.0 * r**1.5 * omega
    out[keep] = num / (3.0 * np.sqrt(3.0) * lam + num)
    return out


def _factor_two_thirds(nrm: np.ndarray, lam: float) -> np.ndarray:
    thresh = 2.0 * (2.0 * lam / 3.0) ** 0.75
    keep = nrm > thresh
    out = np.zeros_like(nrm)
    r = nrm[keep]
    phi = np.arccosh(np.maximum(27.0 * r**2 / (16.0 * (2.0 * lam) ** 1.5), 1.0))
    a = 2.0 / np.sqrt(3.0) * (2.0 * lam) ** 0.25 * np.sqrt(np.cosh(phi / 3.0))
    eta = 0.5 * (np.abs(a) + np.sqrt(np.maximum(2.0 * r / np.abs(a) - a**2, 0.0)))
    out[keep] = 3.0 * eta**4 / (2.0 * lam + 3.0 * eta**4)
    return out


def prox_group_l2q(x: np.ndarray, lam: float, q, axis: int = -1) -> np.ndarray:
    """Closed-form prox of lam * ||x_G||_2^q for q in {1/2, 2/3}.

    Groups below the threshold map to zero (also at equality); the rest are
    shrunk by a scalar factor, so direction is preserved.
    """
    _check_lambda(lam)
    q = normalize_q(q)
    x = np.asarray(x, dtype=float)
    if lam == 0:
        return x.copy()
    nrm = _group_l2(x, axis)
    if q == Fraction(1, 2):
        factor = _factor_half(nrm, lam)
    elif q == Fraction(2, 3):
        factor = _factor_two_thirds(nrm, lam)
    else:
        raise ValueError(f"prox_group_l2q supports q in {{1/2, 2/3}}, got {q}")
    return factor * x


def prox_group_pq(x: np.ndarray, lam: float, p: int, q, axis: int = -1) -> np.ndarray:
    """Dispatch to the closed form for one of the supported (p, q) pairs."""
    q = normalize_q(q)
    if (p, q) not in SUPPORTED_PQ:
        raise ValueError(f"unsupported (p, q) = ({p}, {q})")
    if p == 1:
        return prox_l11(x, lam)
    if q == 1:
        return prox_group_l21(x, lam, axis=axis)
    return prox_group_l2q(x, lam, q, axis=axis)


def moreau_conjugate_prox(
    prox_f: Callable[[np.ndarray, float], np.ndarray], x: np.ndarray, sigma: float
) -> np.ndarray:
    """prox of sigma f* via Moreau: x - sigma * prox_{f/sigma}(x / sigma).

    ``prox_f(v, lam)`` must evaluate prox_{lam f}(v).
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = np.asarray(x)
    if sigma == 1.0:
        return x - prox_f(x, 1.0)
    return x - sigma * prox_f(x / sigma, 1.0 / sigma)


def _norm(x: np.ndarray) -> float:
    flat = np.ascontiguousarray(x).reshape(-1)
    if np.iscomplexobj(flat):
        flat = flat.view(flat.real.dtype)
    return float(np.sqrt(np.dot(flat, flat)))


def project_l2_ball(x: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto {z : ||z - center|| <= radius}; real or complex input."""
    x = np.asarray(x)
    center = np.asarray(center)
    if x.shape != center.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {center.shape}")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    diff = x - center
    dist = _norm(diff)
    if dist <= radius:
        return x.copy()
    if radius == 0:
        return center.copy()
    return center + diff * (radius / dist)
