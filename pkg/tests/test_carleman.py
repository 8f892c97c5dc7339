import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from ktie.carleman import (ChordQuadrature, EuclideanCarleman, EuclideanWeight, LambdaClass,
                           RiemannianCarleman, RiemannianWeight, cut_off, default_s_values,
                           energy_ensemble, energy_functional, fitted_integral, inequality_report,
                           lambda_project, negative_control_coefficients, time_cutoff)
from ktie.coefficients import make_coefficients
from ktie.errors import CoefficientError, HypothesisError
from ktie.geometry import unit_direction
from ktie.transport import TransportOperator, solve_linear


def bump(grid, x0=0.2, radius=0.5):
    r2 = ((grid.phase_x - x0) ** 2 + grid.phase_y**2) / radius**2
    return (np.maximum(0.0, 1.0 - r2) ** 2).reshape(grid.n_nodes, grid.n_v)


# -- weights ---------------------------------------------------------------------------

def test_euclidean_identity_is_node_exact(grid):
    w = EuclideanWeight()
    assert w.identity_residual(grid) <= 1e-12
    assert w.identity_residual(grid, delta=0.37) <= 1e-12
    assert w.a == pytest.approx(0.15)


def test_euclidean_weight_validation():
    with pytest.raises(ValueError):
        EuclideanWeight(gamma=(1.0, 1.0))
    with pytest.raises(ValueError):
        EuclideanWeight(beta=0.3, gamma0=0.3)


def test_riemannian_identity(cgrid):
    w = RiemannianWeight(cgrid.domain)
    assert w.B == pytest.approx(0.85) and not w.degenerate
    rng = np.random.default_rng(5)
    samples = []
    for _ in range(40):
        r, a, th = 0.8 * math.sqrt(rng.uniform()), rng.uniform(0, 2 * np.pi), rng.uniform(0, 2 * np.pi)
        x = (r * math.cos(a), r * math.sin(a))
        samples.append((x, unit_direction(cgrid.domain, x, th)))
    assert w.identity_residual(samples) <= 1e-6
    with pytest.raises(ValueError):
        RiemannianWeight(cgrid.domain, beta=1.0)


# -- admissible class ------------------------------------------------------------------

def test_lambda_project_example(grid):
    cls = LambdaClass()
    th = grid.quad.angles
    vals = np.cos(th) + 2.0
    out = lambda_project(vals, cls, grid)
    expected = np.where(np.abs(np.cos(th)) > 0.3, 2.0, 0.0)
    np.testing.assert_allclose(out, expected, atol=1e-15)
    with pytest.raises(ValueError):
        lambda_project(np.ones(7), cls)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), g0=st.floats(0.0, 0.9))
def test_lambda_project_is_idempotent_projection(grid, seed, g0):
    cls = LambdaClass(gamma0=g0)
    vals = np.random.default_rng(seed).normal(size=(5, grid.n_v))
    p = lambda_project(vals, cls, grid)
    assert cls.contains(p, grid)
    np.testing.assert_array_equal(lambda_project(p, cls, grid), p)


# -- quadrature ------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(a=st.floats(-2, 2), b=st.floats(-2, 2), p0=st.floats(-30, 0), p1=st.floats(-30, 0))
def test_fitted_integral_exact_on_one_segment(a, b, p0, p1):
    got = fitted_integral(np.array([a, b]), np.array([p0, p1]), np.array([0.0, 0.3]))
    ref, _ = integrate.quad(lambda x: (a + (b - a) * x / 0.3) * math.exp(p0 + (p1 - p0) * x / 0.3),
                            0, 0.3, epsabs=1e-14, epsrel=1e-12)
    assert got == pytest.approx(ref, abs=1e-12, rel=1e-9)


def test_chord_quadrature_area_and_weighted_volume(grid):
    q = ChordQuadrature(grid)
    ones = np.ones((q.points.shape[0], 1))
    assert q.integrate(ones, np.zeros_like(ones))[0] == pytest.approx(math.pi, rel=2e-2)
    s = 20.0
    ref, _ = integrate.dblquad(lambda y, x: math.exp(2 * s * (x - 1)), -1, 1,
                               lambda x: -math.sqrt(1 - x * x), lambda x: math.sqrt(1 - x * x))
    ex = (2 * s * (q.points[:, 0] - 1))[:, None]
    assert q.integrate(ones, ex)[0] == pytest.approx(ref, rel=5e-2)


# -- reports ---------------------------------------------------------------------------

def test_inequality_report_calibration():
    r = inequality_report([2.0, 1.0, 3.0], [4.0, 1.0, 1.0], [1.0, 1.0, 1.0])
    assert r.s_values == [1.0, 2.0, 3.0]
    assert r.fitted_C == pytest.approx(1.1)
    assert not r.holds and r.violations() == [2.0]
    assert "violated at s = 2" in r.verdict()
    ok = inequality_report([1.0, 2.0], [1.0, 0.5], [1.0, 1.0])
    assert ok.holds and ok.verdict().startswith("holds")
    assert ok.to_csv().splitlines()[0] == "s,lhs,rhs,ratio"


def test_time_cutoff():
    c = time_cutoff(np.array([0.0, 2.9, 3.25, 4.0]), 4.0, 0.5)
    assert c[0] == 1.0 and c[-1] == 0.0 and 0 < c[2] < 1


# -- functionals -----------------------------------------------------------------------

def test_zero_field_gives_zero_sides(grid, cgrid):
    w = EuclideanWeight()
    c = make_coefficients(grid, 0.5, mu=0.1)
    lhs, rhs = EuclideanCarleman(grid.zeros(), w, c).evaluate(5.0)
    assert lhs == 0.0 and rhs == 0.0
    terms = RiemannianCarleman(cgrid.zeros(), RiemannianWeight(cgrid.domain),
                               make_coefficients(cgrid, 0.5)).terms(3.0)
    assert all(v == 0.0 for v in terms.values())


def test_hypotheses_are_checked(grid, cgrid):
    w = EuclideanWeight()
    c = make_coefficients(grid, 0.5)
    with pytest.raises(HypothesisError, match="f\\(T\\)"):
        EuclideanCarleman(np.ones((grid.n_t + 1, grid.n_nodes, grid.n_v)), w, c)
    with pytest.raises(CoefficientError, match="conformal"):
        make_coefficients(cgrid, 0.5, mu=0.1)


@pytest.fixture(scope="module")
def euclidean_setup(grid):
    w = EuclideanWeight()
    c = make_coefficients(grid, 0.5)
    f0 = bump(grid) * w.in_V(grid.quad.angles)[None, :]
    f, _ = solve_linear(c, f0=f0, tol=1e-13)
    true = cut_off(f, grid)
    manufactured = cut_off(f0[None] * np.exp(-grid.times)[:, None, None], grid)
    return w, c, true, manufactured


def resolved_s(grid):
    # the discrete inequality needs the weight resolved: s * dx <= 4
    return [s for s in default_s_values(grid.domain) if s * grid.dx <= 4.0]


def test_euclidean_inequality_holds_for_solution_and_manufactured(euclidean_setup, grid):
    w, c, true, manufactured = euclidean_setup
    s = resolved_s(grid)
    for vals in (true, manufactured):
        rep = EuclideanCarleman(vals, w, c).report(s)
        assert rep.holds, rep.verdict()


def test_negative_control_violates(euclidean_setup, grid):
    w, c, true, _ = euclidean_setup
    s = resolved_s(grid)
    C = EuclideanCarleman(true, w, c).report(s).fitted_C
    bad = negative_control_coefficients(c, w)
    f0 = true[0]
    op = TransportOperator(bad, check=False)
    f, _ = op.solve(f0=f0, tol=1e-12)
    rep = EuclideanCarleman(cut_off(f, grid), w, op, check=False).report(s, C=C)
    assert s[0] in rep.violations()


def test_riemannian_manufactured_bump(cgrid):
    c = make_coefficients(cgrid, 0.5)
    r2 = (cgrid.phase_x**2 + cgrid.phase_y**2) / 0.36
    prof = (np.maximum(0.0, 1.0 - r2) ** 2).reshape(cgrid.n_nodes, cgrid.n_v)
    u = prof[None] * np.exp(-cgrid.times)[:, None, None]
    rep = RiemannianCarleman(u, RiemannianWeight(cgrid.domain), c).report()
    assert rep.holds, rep.verdict()


# -- energy ----------------------------------------------------------------------------

def test_energy_free_streaming_closed_form(grid):
    # no absorption, no source: d_t f is -v . grad f0 carried along lines, so its
    # norm stays at ||v . grad f0|| while the support is inside
    c = make_coefficients(grid, 0.0)
    f0 = bump(grid, x0=0.0, radius=0.4)
    ev = energy_functional(c, f0=f0)
    ref, _ = integrate.dblquad(
        lambda r, a: r * (4 * r / 0.16 * (1 - r * r / 0.16)) ** 2, 0, 2 * np.pi, 0, 0.4)
    # direction weights are normalized; the mean of (v . e_r)^2 over directions is 1/2
    exact = math.sqrt(0.5 * ref)
    assert ev.parts["Xf0"] == pytest.approx(exact, rel=0.1)
    assert ev.lhs == pytest.approx(ev.parts["Xf0"], rel=0.1)
    assert ev.parts["S_tilde"] == 0.0


def test_small_energy_ensemble(grid):
    c = make_coefficients(grid, 0.5, mu=0.2)
    a = energy_ensemble(c, 4, 4, seed=1)
    b = energy_ensemble(c, 4, 4, seed=1)
    assert a.calibration == b.calibration and a.held_out == b.held_out
    assert a.fitted_C == pytest.approx(1.1 * max(a.calibration))
    assert all(np.isfinite(a.held_out))
