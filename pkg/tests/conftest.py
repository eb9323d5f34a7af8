import time

import numpy as np
import pytest

from speckle_sim.datagen import NoiseSpec, SpeckleSpec, gen_speckle, make_psf, make_star, simulate
from speckle_sim.grid_ops import Grid
from speckle_sim.solver import SolverConfig, pd_solve


class Scenario:
    """Star target observed under speckle with Gaussian noise."""

    def __init__(self, n, m, snr_db=40.0, pitch=0.05, seed=0):
        self.grid = Grid(n, n, pitch)
        self.rho = make_star(self.grid)
        self.psf = make_psf(self.grid, 1.49)
        self.speckles = gen_speckle(SpeckleSpec(m, 1.49, seed=seed), self.grid)
        self.sim = simulate(self.rho, self.speckles, self.psf, NoiseSpec(snr_db, None, seed + 1))
        self.Y = self.sim.Y
        self.nu = self.sim.nu
        self.m = m
        self.xi_real = float(np.sqrt(m * self.grid.N) * self.nu)


@pytest.fixture(scope="session")
def star64():
    return Scenario(64, 100)


@pytest.fixture(scope="session")
def star64_run(star64):
    """The reference (2,1) run: 2000 iterations with the objective logged every iteration.

    Returns (state, history rows (k, sparsity, tv, gap), wall time in seconds).
    """
    history = []
    t0 = time.perf_counter()
    cfg = SolverConfig(p=2, q=1, mu_tv=0.0, xi="auto", tau=0.35, sigma=1.0, theta=1.0,
                       max_iters=2000, rel_tol=1e-6)
    state = pd_solve(star64.Y, star64.psf, cfg, nu=star64.nu,
                     callback=lambda k, s, tv, gap: history.append((k, s, tv, gap)), log_every=1)
    return state, np.array(history), time.perf_counter() - t0


ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion."""

    def _report(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
