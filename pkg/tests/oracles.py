"""Independent reference computations shared by unit and acceptance tests."""

import numpy as np
from scipy.optimize import minimize_scalar


def prox_objective(d, x, lam, p, q):
    return np.linalg.norm(d, ord=p) ** q + np.sum((d - x) ** 2) / (2 * lam)


def _min_1d(phi, lo, hi, n=2001):
    ts = np.linspace(lo, hi, n)
    vals = np.asarray(phi(ts), dtype=float)
    k = int(np.argmin(vals))
    a, b = ts[max(k - 1, 0)], ts[min(k + 1, n - 1)]
    best_t, best = ts[k], vals[k]
    if b > a:
        res = minimize_scalar(phi, bounds=(a, b), method="bounded", options={"xatol": 1e-12})
        if res.fun < best:
            best_t, best = res.x, res.fun
    # the nonconvex objectives have a kink at 0
    if phi(0.0) <= best:
        best_t, best = 0.0, phi(0.0)
    return best_t, best


def brute_force_prox(x, lam, p, q):
    """Minimum of ||d||_p^q + ||d - x||^2 / (2 lam) by 1-D searches.

    p = 2: the minimizer is t x / ||x|| with t in [0, ||x||] (radial search).
    p = 1, q = 1: the objective separates over coordinates.
    """
    x = np.asarray(x, dtype=float)
    if p == 2:
        r = np.linalg.norm(x)
        if r == 0:
            return np.zeros_like(x), 0.0
        t, _ = _min_1d(lambda t: t**q + (t - r) ** 2 / (2 * lam), 0.0, r)
        d = t * x / r
        return d, prox_objective(d, x, lam, p, q)
    if p == 1 and q == 1:
        d = np.empty_like(x)
        for i, xi in enumerate(x):
            s = np.sign(xi)
            t, _ = _min_1d(lambda t: t + (t - abs(xi)) ** 2 / (2 * lam), 0.0, abs(xi))
            d[i] = s * t
        return d, prox_objective(d, x, lam, p, q)
    raise ValueError("unsupported pair")


def direct_ring_raps(rho_hat, rho_star, pitch):
    """Unbinned ring sums: loop over every DFT sample and accumulate by rounded radius."""
    n1, n2 = rho_star.shape
    E = np.fft.fft2(rho_hat - rho_star)
    S = np.fft.fft2(rho_star)
    df = 1.0 / (min(n1, n2) * pitch)
    num, den = {}, {}
    for i in range(n1):
        fi = (i if i <= n1 // 2 else i - n1) / (n1 * pitch)
        for j in range(n2):
            fj = (j if j <= n2 // 2 else j - n2) / (n2 * pitch)
            k = int(np.rint(np.hypot(fi, fj) / df))
            num[k] = num.get(k, 0.0) + abs(E[i, j]) ** 2
            den[k] = den.get(k, 0.0) + abs(S[i, j]) ** 2
    return num, den, df
