import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from ktie.coefficients import ProductN, TaylorN, make_coefficients
from ktie.errors import JetOrderError, SmallnessGateError
from ktie.linearization import (EpsJet, consistency_table, fd_linearize, jet_power, jet_product,
                                remainder, solve_hierarchy)
from ktie.transport import Characteristics, solve_linear

EPS = sp.Symbol("eps")


def series(values):
    return sum(EPS**j * sp.Rational(v) / sp.factorial(j) for j, v in enumerate(values, start=1))


def symbolic_derivative(expr, n):
    return sp.diff(expr, EPS, n).subs(EPS, 0)


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 6), k=st.integers(1, 4), data=st.data())
def test_jet_power_matches_symbolic_expansion(m, k, data):
    vals = data.draw(st.lists(st.integers(-5, 5), min_size=m, max_size=m))
    got = jet_power(EpsJet([float(v) for v in vals]), k)
    f = series(vals)
    for n in range(1, m + 1):
        assert got[n] == pytest.approx(float(symbolic_derivative(f**k, n)), abs=1e-9)


def test_jet_power_small_cases():
    g = np.array([1.5, -2.0])
    sq = jet_power(EpsJet([g, 0 * g]), 2)
    np.testing.assert_allclose(sq[2], 2 * g**2)
    assert jet_power(EpsJet([3.0, 4.0]), 1)[2] == 4.0
    a, b = 0.7, -1.3
    # (eps a + eps^2 b/2)^2 = eps^2 a^2 + eps^3 a b + ...  =>  third derivative 6 a b
    assert jet_power(EpsJet([a, b, 0.0]), 2)[3] == pytest.approx(6 * a * b)


def test_jet_product_is_commutative_and_truncated():
    a, b = EpsJet([1.0, 2.0, 3.0]), EpsJet([-1.0, 0.5, 4.0])
    ab, ba = jet_product(a, b, 3), jet_product(b, a, 3)
    assert [ab[i] for i in (1, 2, 3)] == [ba[i] for i in (1, 2, 3)]
    assert (a * b).order == 3


def test_remainder_oracles():
    F1, F2, F3 = 0.3, -0.8, 1.7
    q2 = 1.9
    assert remainder({2: q2}, EpsJet([F1]), 2) == 0
    assert remainder({2: q2}, EpsJet([F1, F2]), 3) == pytest.approx(3 * q2 * F1 * F2)
    # symbolic oracle for m = 4 with q2 and q3
    q3 = -0.6
    f = series([F1, 0, F3])
    expr = sp.Rational(q2) * f**2 / 2 + sp.Rational(q3) * f**3 / 6
    oracle = float(symbolic_derivative(expr, 4))
    got = remainder({2: q2, 3: q3}, EpsJet([F1, 0.0, F3]), 4)
    assert got == pytest.approx(oracle, rel=1e-12)
    assert oracle == pytest.approx(4 * q2 * F1 * F3)


@settings(max_examples=15, deadline=None)
@given(m=st.integers(3, 6), data=st.data())
def test_remainder_matches_symbolic(m, data):
    vals = data.draw(st.lists(st.integers(-3, 3), min_size=m - 1, max_size=m - 1))
    qs = data.draw(st.lists(st.integers(-2, 2), min_size=m - 2, max_size=m - 2))
    q = {k: float(v) for k, v in zip(range(2, m), qs)}
    f = series(vals)
    expr = sum(sp.Integer(int(q[k])) * f**k / sp.factorial(k) for k in range(2, m))
    assert remainder(q, EpsJet([float(v) for v in vals]), m) == pytest.approx(
        float(symbolic_derivative(expr, m)), abs=1e-9)


def test_remainder_never_reads_order_m():
    class Guard(EpsJet):
        def __getitem__(self, k):
            if k >= 4:
                raise AssertionError("read order >= m")
            return super().__getitem__(k)

    remainder({2: 1.0, 3: 1.0}, Guard([1.0, 2.0, 3.0, 99.0]), 4)
    with pytest.raises(JetOrderError):
        remainder({2: 1.0}, EpsJet([1.0]), 4)


def test_hierarchy_zero_nonlinearity(grid):
    c = make_coefficients(grid, 0.5, mu=0.2)
    sol = solve_hierarchy(c, 1.0, 3)
    assert not np.any(sol.jets[2]) and not np.any(sol.jets[3])


def _f2_error(grid, sigma0):
    c = make_coefficients(grid, sigma0, nonlinearity=TaylorN({2: np.ones(grid.M)}))
    F2 = solve_hierarchy(c, 1.0, 2, tol=1e-13).field(2).values
    t = grid.times[:, None, None]
    tau = Characteristics(grid).tau_minus.reshape(grid.n_nodes, grid.n_v)[None]
    if sigma0 == 0:
        exact = -t + 0 * tau
    else:
        exact = -np.exp(-sigma0 * t) * (1 - np.exp(-sigma0 * t)) / sigma0
    before = t < tau - 2 * grid.dt
    return np.abs(F2 - exact)[before].max()


def test_hierarchy_second_order_exact_without_absorption(grid):
    assert _f2_error(grid, 0.0) <= 1e-10


def test_hierarchy_second_order_converges_with_absorption(grid):
    from ktie.grid import PhaseGrid

    coarse = _f2_error(grid, 0.6)
    fine = _f2_error(PhaseGrid(grid.domain, grid.dx, grid.n_v, grid.dt / 2, grid.T), 0.6)
    assert coarse <= 1e-4
    assert 3.5 <= coarse / fine <= 4.5


def test_hierarchy_product_nonlinearity(grid):
    q = np.full(grid.M, 0.7)
    a = solve_hierarchy(make_coefficients(grid, 0.5, nonlinearity=ProductN(q, "square")), 1.0, 2)
    b = solve_hierarchy(make_coefficients(grid, 0.5, nonlinearity=TaylorN({2: 2 * q})), 1.0, 2)
    np.testing.assert_array_equal(a.jets[2], b.jets[2])


def test_sources_recorded_and_solved(grid):
    c = make_coefficients(grid, 0.5, mu=0.2, nonlinearity=TaylorN({2: np.ones(grid.M), 3: -np.ones(grid.M)}))
    sol = solve_hierarchy(c, 1.0, 3, tol=1e-12)
    from ktie.transport import TransportOperator

    op = TransportOperator(c)
    for k in (2, 3):
        redo, _ = solve_linear(op, sol.sources[k], tol=1e-12)
        assert np.abs(redo.flat - sol.jets[k]).max() <= 1e-10


def test_equal_lower_orders_give_equal_jets(grid):
    q2 = np.full(grid.M, 0.8)
    a = make_coefficients(grid, 0.5, mu=0.2, nonlinearity=TaylorN({2: q2, 3: np.ones(grid.M)}))
    b = make_coefficients(grid, 0.5, mu=0.2, nonlinearity=TaylorN({2: q2, 3: -np.ones(grid.M)}))
    sa, sb = solve_hierarchy(a, 1.0, 3), solve_hierarchy(b, 1.0, 3)
    np.testing.assert_array_equal(sa.jets[1], sb.jets[1])
    np.testing.assert_array_equal(sa.jets[2], sb.jets[2])
    assert np.abs(sa.jets[3] - sb.jets[3]).max() > 1e-3


def test_fd_first_order_linear_case(grid):
    c = make_coefficients(grid, 0.5, mu=0.2)
    fd = fd_linearize(c, 1.0, 1, 0.01)
    lin, _ = solve_linear(c, f0=1.0, tol=1e-13)
    assert np.abs(fd.values - lin.values).max() <= 1e-9


def test_fd_gate():
    from ktie.geometry import make_domain
    from ktie.grid import PhaseGrid

    g = PhaseGrid(make_domain(), 0.25, 8, 0.125, 4.0)
    c = make_coefficients(g, 0.5)
    with pytest.raises(SmallnessGateError):
        fd_linearize(c, 1.0, 3, 0.03)
    with pytest.raises(ValueError):
        fd_linearize(c, 1.0, 4, 0.001)


def test_consistency_richardson(grid):
    c = make_coefficients(grid, 0.5, nonlinearity=TaylorN({2: np.ones(grid.M), 3: np.ones(grid.M)}))
    rows = consistency_table(c, 1.0, (1, 2, 3), (0.016, 0.008, 0.004))
    for k in (1, 2, 3):
        errs = [e for kk, _, e in rows if kk == k]
        for a, b in zip(errs, errs[1:]):
            if b > 1e-9:
                assert 3.0 <= a / b <= 5.0
        assert errs[-1] <= 1e-3
