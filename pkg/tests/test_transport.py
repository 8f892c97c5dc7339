import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ktie.coefficients import TaylorN, make_coefficients
from ktie.errors import CoefficientError, NonConvergenceError, SmallnessGateError
from ktie.geometry import flow, unit_direction
from ktie.grid import BoundaryTrace, Field, IncomingData, time_derivative_trace
from ktie.transport import (Characteristics, TransportOperator, attenuation, free_streaming_term,
                            measure, scattering_apply, solve_linear, solve_nonlinear)


def tau_minus(grid):
    return Characteristics(grid).tau_minus.reshape(grid.n_nodes, grid.n_v)


def off_jump(grid, tau, band=2.0):
    """Mask (n_t+1, n_nodes, n_v) of nodes farther than band*dt from t = tau_-."""
    return np.abs(grid.times[:, None, None] - tau[None]) > band * grid.dt


# -- attenuation ---------------------------------------------------------------------

def test_attenuation_closed_forms(disk):
    v = np.array([1.0, 0.0])
    assert attenuation(lambda x, y, th: 0.0 * x, (0.2, 0.1), v, 0.7, disk) == 1.0
    val = attenuation(lambda x, y, th: 0.8 + 0 * x, (0.2, 0.1), v, 0.7, disk)
    assert val == pytest.approx(math.exp(-0.8 * 0.7), abs=1e-10)
    # |x|^2 along the back-traced ray from the centre integrates to 1/3
    val = attenuation(lambda x, y, th: x * x + y * y, (0.0, 0.0), v, 1.0, disk)
    assert val == pytest.approx(math.exp(-1 / 3), abs=1e-6)


def test_attenuation_beyond_exit(disk):
    with pytest.raises(ValueError):
        attenuation(lambda x, y, th: 1.0 + 0 * x, (0.5, 0.0), np.array([1.0, 0.0]), 1.6, disk)


# -- scattering -------------------------------------------------------------------------

def test_scattering_apply_examples():
    from ktie.geometry import direction_quadrature

    q = direction_quadrature(16)
    th = q.angles
    assert scattering_apply(np.full((16, 16), 0.7), np.ones(16), q.weights) == pytest.approx(0.7)
    assert np.all(scattering_apply(np.zeros((16, 16)), np.ones(16), q.weights) == 0)
    mu = 1 + 0.5 * np.cos(th[:, None] - th[None, :])
    out = scattering_apply(mu, np.cos(th), q.weights)
    np.testing.assert_allclose(out, np.cos(th) / 4, atol=1e-12)


# -- free streaming -----------------------------------------------------------------

@pytest.mark.parametrize("sigma0", [0.5, 1.0])
def test_free_streaming_absorption(grid, sigma0):
    c = make_coefficients(grid, sigma0)
    f = free_streaming_term(c, f0=1.0)
    tau = tau_minus(grid)
    t = grid.times[:, None, None]
    exact = np.exp(-sigma0 * t) * (t < tau[None])
    far = off_jump(grid, tau, 1e-6)
    assert np.abs(f.values - exact)[far].max() <= 1e-12


def test_free_streaming_incoming_only(grid):
    c = make_coefficients(grid, 0.0)
    f = free_streaming_term(c, f_minus=IncomingData.constant(grid, 1.0))
    tau = tau_minus(grid)
    t = grid.times[:, None, None]
    exact = (t > tau[None]).astype(float)
    far = off_jump(grid, tau, 1e-6)
    assert np.abs(f.values - exact)[far].max() <= 1e-12


def test_free_streaming_constant_source(grid):
    c = make_coefficients(grid, 0.0)
    f = free_streaming_term(c, S=1.0)
    exact = np.minimum(grid.times[:, None, None], tau_minus(grid)[None])
    assert np.abs(f.values - exact).max() <= 1e-10


# -- linear solve ---------------------------------------------------------------------

def test_zero_data_gives_zero(grid):
    c = make_coefficients(grid, 1.0, mu=0.5)
    f, rep = solve_linear(c)
    assert f.sup_norm() == 0.0


def test_contraction_ratio_bounded_by_kappa(grid):
    c = make_coefficients(grid, 1.0, mu=0.9)
    f, rep = solve_linear(c, f0=1.0, tol=1e-12)
    kappa = 1 - math.exp(-2.0)
    assert rep.kappa_bound == pytest.approx(kappa)
    assert max(rep.contraction_ratios()) <= kappa + 0.05
    assert rep.converged


def test_non_convergence_carries_history(grid):
    c = make_coefficients(grid, 1.0, mu=0.9)
    with pytest.raises(NonConvergenceError) as exc:
        solve_linear(c, f0=1.0, tol=1e-14, max_iter=3)
    assert len(exc.value.residual_history) == 3


def test_supercritical_rejected(grid):
    with pytest.raises(CoefficientError):
        make_coefficients(grid, 0.5, mu=0.8)


def test_scattering_rejected_on_conformal(cgrid):
    with pytest.raises(CoefficientError, match="conformal"):
        make_coefficients(cgrid, 1.0, mu=0.5)


def random_subcritical(grid, rng):
    a = rng.uniform(0.2, 1.0)
    b = rng.uniform(-0.3, 0.3)
    sigma = grid.sample_static(lambda x, y, th: a + b * x * y + 0.0 * th).values
    sigma = np.clip(sigma, 0.05, 1.0)
    frac = rng.uniform(0, 1)
    th = grid.quad.angles
    prof = 1 + rng.uniform(-0.9, 0.9) * np.cos(th[:, None] - th[None, :])
    mu = frac * sigma.min() * prof / prof.mean(axis=0).max()
    return make_coefficients(grid, sigma, mu=mu)


def test_maximum_principle_random_draws(grid):
    rng = np.random.default_rng(11)
    tol = 1e-10
    for _ in range(20):
        c = random_subcritical(grid, rng)
        f0 = 1 + rng.uniform(0, 1, (grid.n_nodes, grid.n_v))
        fm = IncomingData.constant(grid, 1 + rng.uniform(0, 1))
        S = rng.uniform(0, 0.2)
        f, _ = solve_linear(c, S, f0, fm, tol=tol)
        assert f.values.min() >= math.exp(-grid.T * c.sigma_max) - 2 * tol


def test_a_priori_bound_constant_reported(grid):
    c = make_coefficients(grid, 0.8, mu=0.4)
    f, rep = solve_linear(c, f0=0.5, f_minus=IncomingData.constant(grid, 0.25))
    assert f.sup_norm() <= rep.stability_constant * 0.75 + 1e-12


def test_ray_and_sweep_agree_on_constant_absorption(grid):
    c = make_coefficients(grid, 0.7)
    a, _ = TransportOperator(c, method="ray").solve(f0=1.0)
    b, _ = TransportOperator(c, method="sweep").solve(f0=1.0)
    far = off_jump(grid, tau_minus(grid), 1e-6)
    assert np.abs(a.values - b.values)[far].max() <= 1e-12


def test_conformal_no_scattering_matches_backtrace(cgrid):
    sig = lambda x, y, th: 0.5 + 0.3 * x + 0.0 * th
    f0 = lambda x, y, th: 1 + 0.5 * np.sin(2 * x) * np.cos(y) + 0.0 * th
    c = make_coefficients(cgrid, sig)
    f, _ = solve_linear(c, f0=f0)
    rng = np.random.default_rng(2)
    tau = tau_minus(cgrid)
    lattice = np.arange(cgrid.n_lattice)
    worst = 0.0
    for _ in range(25):
        n = rng.choice(lattice)
        j = rng.integers(cgrid.n_v)
        k = rng.integers(1, cgrid.n_t)
        t = cgrid.times[k]
        if t > tau[n, j] - 2 * cgrid.dt:
            continue
        x = cgrid.points[n]
        v = unit_direction(cgrid.domain, x, cgrid.quad.angles[j])
        p = flow(cgrid.domain, x, v, -t)
        exact = attenuation(sig, x, v, t, cgrid.domain, ds=1e-3) * f0(p.x[0], p.x[1], p.theta)
        worst = max(worst, abs(f.values[k, n, j] - exact))
    assert worst <= 5e-3


# -- nonlinear solve ------------------------------------------------------------------

def test_nonlinear_without_n_matches_linear(grid):
    c = make_coefficients(grid, 0.6, mu=0.3)
    a, _ = solve_nonlinear(c, f0=0.03, tol=1e-12)
    b, _ = solve_linear(c, f0=0.03, tol=1e-13)
    assert np.abs(a.values - b.values).max() <= 1e-12


def test_logistic_closed_form(grid):
    eps = 0.01
    c = make_coefficients(grid, 0.0, nonlinearity=TaylorN({2: np.ones(grid.M)}))
    f, _ = solve_nonlinear(c, f0=eps, tol=1e-14)
    tau = tau_minus(grid)
    t = grid.times[:, None, None]
    exact = eps / (1 + eps * t / 2) * (t < tau[None])
    # nodes within one step of the incoming jump carry interpolation error, not time-stepping error
    far = off_jump(grid, tau, 1.0)
    assert (np.abs(f.values - exact)[far] / eps).max() <= 1e-4


@settings(max_examples=8, deadline=None)
@given(eps=st.floats(0.001, 0.05), q2=st.floats(-1, 1), q3=st.floats(-1, 1))
@pytest.mark.slow
def test_nonlinear_bound_twice_linear(grid, eps, q2, q3):
    c = make_coefficients(grid, 0.5, mu=0.2,
                          nonlinearity=TaylorN({2: np.full(grid.M, q2), 3: np.full(grid.M, q3)}))
    f, _ = solve_nonlinear(c, f0=eps)
    fhat, _ = solve_linear(c, f0=eps)
    assert f.sup_norm() <= 2 * fhat.sup_norm()


def test_smallness_gate(grid):
    c = make_coefficients(grid, 0.5, nonlinearity=TaylorN({2: np.ones(grid.M)}))
    with pytest.raises(SmallnessGateError):
        solve_nonlinear(c, f0=0.2)


# -- measurement ------------------------------------------------------------------

def test_measure_zero_and_free(grid):
    assert np.all(measure(grid.zeros()).values == 0)
    c = make_coefficients(grid, 0.0)
    tr = measure(free_streaming_term(c, f0=1.0))
    tau = tau_minus(grid)[grid.ring_slice][tr.ring_index, tr.dir_index]
    t = grid.times[:, None]
    far = np.abs(t - tau[None]) > 1e-6
    exact = (t < tau[None]).astype(float)
    assert np.abs(tr.values - exact)[far].max() <= 1e-15
    assert np.all(tr.measure_factor > 0)


def test_trace_norm_matches_closed_form_quadrature(grid):
    s0 = 0.5
    c = make_coefficients(grid, s0)
    tr = measure(free_streaming_term(c, f0=1.0))
    tau = tau_minus(grid)[grid.ring_slice][tr.ring_index, tr.dir_index]
    # independent quadrature: integrate exp(-2 s0 t) on [0, tau) in closed form per boundary pair
    space = grid.ring_arc[tr.ring_index] * grid.quad.weights[tr.dir_index] * tr.measure_factor
    exact = math.sqrt((space * (1 - np.exp(-2 * s0 * tau)) / (2 * s0)).sum())
    assert tr.l2_norm() == pytest.approx(exact, rel=1e-3, abs=2e-2 * exact)


def test_time_derivative_trace(grid):
    n = grid.outgoing_pairs[0].size
    t = grid.times[:, None]
    const = BoundaryTrace(grid, np.full((grid.n_t + 1, n), 3.0))
    assert np.abs(time_derivative_trace(const).values).max() == 0.0
    lin = BoundaryTrace(grid, np.broadcast_to(2 * t - 1, (grid.n_t + 1, n)).copy())
    np.testing.assert_allclose(time_derivative_trace(lin).values, 2.0, atol=1e-12)
    s0 = 0.7
    exp = BoundaryTrace(grid, np.broadcast_to(np.exp(-s0 * t), (grid.n_t + 1, n)).copy())
    err = np.abs(time_derivative_trace(exp).values + s0 * np.exp(-s0 * t)).max()
    assert err <= s0**3 * grid.dt**2


def test_time_derivative_needs_three_levels(disk):
    from ktie.grid import PhaseGrid

    g = PhaseGrid(disk, 0.5, 8, 0.5, 0.5, enforce_horizon=False)
    tr = BoundaryTrace(g, np.zeros((2, g.outgoing_pairs[0].size)))
    with pytest.raises(ValueError):
        time_derivative_trace(tr)
