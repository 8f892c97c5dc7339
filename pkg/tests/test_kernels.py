import os
import subprocess
import sys

import numpy as np
import pytest

from ktie import _kernels
from ktie._kernels import _fallback
from ktie.coefficients import make_coefficients
from ktie.geometry import CONFORMAL, ConformalFactor, make_domain
from ktie.grid import PhaseGrid
from ktie.transport import TransportOperator

needs_compiled = pytest.mark.skipif(_kernels.compiled is None, reason="compiled core not built")


def use_fallback(monkeypatch):
    for name in ("sl_sweep", "ray_accumulate", "ray_exit_accumulate", "geodesic_march"):
        monkeypatch.setattr(_kernels, name, getattr(_fallback, name))


def solve_all(grid):
    c = make_coefficients(grid, lambda x, y, th: 0.5 + 0.2 * x + 0 * th, mu=0.2)
    f0 = lambda x, y, th: np.exp(-4 * (x * x + y * y)) * (1 + 0.3 * np.cos(th))
    return [TransportOperator(c, method=m).solve(f0=f0, tol=1e-12)[0].values for m in ("ray", "sweep")]


@needs_compiled
def test_backends_agree_on_linear_solves(monkeypatch):
    g = lambda: PhaseGrid(make_domain(), 0.125, 8, 0.0625, 4.0)
    fast = solve_all(g())
    use_fallback(monkeypatch)
    slow = solve_all(g())
    for a, b in zip(fast, slow):
        assert np.abs(a - b).max() <= 1e-12


@needs_compiled
def test_backends_agree_on_geodesics(monkeypatch):
    dom = lambda: make_domain(CONFORMAL, 1.0, ConformalFactor("gaussian", 0.1, 1.0))
    g1 = PhaseGrid(dom(), 0.25, 8, 0.125, 5.0)
    from ktie.transport import Characteristics

    a = Characteristics(g1).tau_minus.copy()
    use_fallback(monkeypatch)
    g2 = PhaseGrid(dom(), 0.25, 8, 0.125, 5.0)
    b = Characteristics(g2).tau_minus
    assert np.abs(a - b).max() <= 1e-12


def test_environment_selects_fallback():
    env = dict(os.environ, KTIE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import ktie._kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
