"""Forward solvers built on the integral formulation along characteristics.

The solution is assembled from three pieces, each evaluated per phase node
(x, v) by tracing the characteristic backwards:

* the initial term ``f0(phi_{-t}(x,v)) exp(-int sigma)`` for ``t < tau_-``,
* the boundary term ``f_-(t - tau_-, exit) exp(-int_0^{tau_-} sigma)`` for
  ``t >= tau_-`` (the tie goes to the boundary branch),
* the attenuated time convolution (Duhamel term) of a source ``g``.

The first two are evaluated directly at every time level.  The Duhamel term
has two implementations: ``"sweep"`` uses the semigroup property and costs
one interpolation per time step, ``"ray"`` applies the trapezoid rule along
the whole back-traced ray and interpolates each source sample once, which
keeps jumps sharp at the price of O(n_t^2) work.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .coefficients import CoefficientSet
from .errors import DivergenceError, NonConvergenceError, SmallnessGateError
from .geometry import _march, _trap_limit, euclidean_exit_time
from .grid import BoundaryTrace, Field, IncomingData, PhaseGrid, as_values

log = logging.getLogger(__name__)

TAU_FLOOR = 1e-12


@dataclass
class SolveReport:
    iterations: int
    residual_history: list[float]
    kappa_bound: float
    converged: bool
    stability_constant: float = float("nan")
    outer: bool = False
    notes: list[str] = field(default_factory=list)

    def contraction_ratios(self) -> np.ndarray:
        h = np.asarray(self.residual_history)
        h = h[h > 0]
        return h[1:] / h[:-1] if h.size > 1 else np.zeros(0)

    def to_text(self) -> str:
        lines = [
            f"iterations: {self.iterations}",
            f"converged: {self.converged}",
            f"kappa_bound: {self.kappa_bound:.12g}",
            f"stability_constant: {self.stability_constant:.12g}",
        ]
        lines += [f"increment[{i}]: {r:.6e}" for i, r in enumerate(self.residual_history)]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


class Characteristics:
    """Backward characteristics of every phase node of a grid.

    Positions are available at sub-steps ``s = j * h_sub`` (``h_sub`` divides
    ``dt`` and is at most ``dx / 2``), together with exit times and exit states.
    """

    def __init__(self, grid: PhaseGrid):
        self.grid = grid
        g = grid
        self.n_sub = max(1, int(math.ceil(g.dt / (0.5 * g.dx) - 1e-9)))
        self.h_sub = g.dt / self.n_sub
        x, y, th = g.phase_x, g.phase_y, g.phase_theta
        self.euclidean = g.domain.is_euclidean
        if self.euclidean:
            self.vx, self.vy = np.cos(th), np.sin(th)
            tau = euclidean_exit_time(g.domain.radius, x, y, self.vx, self.vy, -1.0)
            tau = np.where(tau < TAU_FLOOR, 0.0, tau)
            self.tau_minus = tau
            self.exit = np.stack([x - tau * self.vx, y - tau * self.vy], axis=1)
            self.exit_direction = np.tile(np.arange(g.n_v), g.n_nodes)
            self.tau_plus = euclidean_exit_time(g.domain.radius, x, y, self.vx, self.vy, 1.0)
            self.records = None
        else:
            dom = g.domain
            limit = _trap_limit(dom)
            n_rec = int(math.ceil(dom.diameter / self.h_sub)) + 2
            rec, tau, ex = _march(dom, x, y, th, -self.h_sub, limit, 1, n_rec)
            tau = np.where(tau < TAU_FLOOR, 0.0, tau)
            self.tau_minus = tau
            self.exit = ex[:, :2]
            self.exit_direction = ex[:, 2]
            self.records = rec
            _, taup, _ = _march(dom, x, y, th, self.h_sub, limit, 1, 1)
            self.tau_plus = np.where(taup < TAU_FLOOR, 0.0, taup)
        self.exit_alpha = np.arctan2(self.exit[:, 1], self.exit[:, 0])
        self.n_levels = int(min(g.n_t, math.ceil(self.tau_minus.max() / g.dt))) + 1
        self.n_subs = int(math.ceil(self.tau_minus.max() / self.h_sub)) + 1

    def positions(self, j: int):
        """Back-traced states at s = j * h_sub: (x, y, direction, alive)."""
        s = j * self.h_sub
        alive = s < self.tau_minus
        if self.euclidean:
            g = self.grid
            return (g.phase_x - s * self.vx, g.phase_y - s * self.vy,
                    self.exit_direction, alive)
        if j >= self.records.shape[0]:
            nan = np.full(self.grid.M, np.nan)
            return nan, nan, nan, np.zeros(self.grid.M, dtype=bool)
        r = self.records[j]
        xs, ys, ts = r[:, 0].copy(), r[:, 1].copy(), r[:, 2].copy()
        xs[~alive] = 0.0
        ys[~alive] = 0.0
        ts[~alive] = 0.0
        return xs, ys, ts, alive

    def stencil(self, px, py, direction, alive):
        """Interpolation stencil at back-traced states; dead entries get weight 0."""
        g = self.grid
        px = np.where(alive, px, 0.0)
        py = np.where(alive, py, 0.0)
        if not self.euclidean:
            direction = np.where(alive, direction, 0.0)
        idx, w = g.phase_stencil(px, py, direction)
        w = np.where(alive[:, None], w, 0.0)
        return np.ascontiguousarray(idx, dtype=np.intp), np.ascontiguousarray(w)

    def exit_stencil(self):
        g = self.grid
        R = g.domain.radius
        # pull exit points onto the closed disk before interpolating
        r = np.hypot(self.exit[:, 0], self.exit[:, 1])
        scale = np.where(r > R, R / np.maximum(r, 1e-300), 1.0)
        ex = self.exit * scale[:, None]
        ex[self.tau_minus == 0] = g.points[np.arange(g.M) // g.n_v][self.tau_minus == 0]
        idx, w = g.phase_stencil(ex[:, 0], ex[:, 1], self.exit_direction)
        return np.ascontiguousarray(idx, dtype=np.intp), np.ascontiguousarray(w)


class TransportOperator:
    """Linear-solver context for one (sigma, mu) pair on one grid.

    Caches characteristics, cumulative optical depths and the sweep stencil
    so that repeated solves (Picard iterations, hierarchy orders, sensitivity
    columns) share the set-up cost.
    """

    def __init__(self, coeffs: CoefficientSet, chars: Characteristics | None = None,
                 method: str = "ray", check: bool = True):
        if method not in ("sweep", "ray"):
            raise ValueError(f"unknown Duhamel method {method!r}")
        # check=False admits supercritical kernels: Picard still converges on
        # a finite time window, but kappa is then no longer a contraction bound
        if check:
            coeffs.check()
        self.coeffs = coeffs
        self.grid = g = coeffs.grid
        self.method = method
        self.chars = chars if chars is not None and chars.grid is g else Characteristics(g)
        self.sigma = np.ascontiguousarray(coeffs.sigma.reshape(g.M))
        self.kappa = 1.0 - math.exp(-coeffs.sigma_max * g.domain.diameter)
        self._optical_depth()
        self._sweep_setup()
        self._mu_w = None
        if coeffs.has_scattering:
            self._mu_w = coeffs.mu * g.quad.weights[None, :, None]

    # -- set-up ------------------------------------------------------------------
    def _sigma_at(self, j):
        px, py, d, alive = self.chars.positions(j)
        out = np.zeros(self.grid.M)
        live = np.flatnonzero(alive)
        if live.size:
            dl = d[live]
            idx, w = self.grid.phase_stencil(px[live], py[live], dl)
            out[live] = (self.sigma[idx] * w).sum(axis=1)
        return out, alive

    def _optical_depth(self):
        """Cumulative trapezoid of sigma along each backward characteristic."""
        ch, g = self.chars, self.grid
        tau = ch.tau_minus
        n_lev = ch.n_levels
        A_levels = np.zeros((n_lev, g.M))
        A = np.zeros(g.M)
        prev, _ = self._sigma_at(0)
        A_exit = np.zeros(g.M)
        last_sigma = prev.copy()
        last_s = np.zeros(g.M)
        for j in range(1, ch.n_subs + 1):
            cur, alive = self._sigma_at(j)
            A = np.where(alive, A + 0.5 * ch.h_sub * (prev + cur), A)
            last_sigma = np.where(alive, cur, last_sigma)
            last_s = np.where(alive, j * ch.h_sub, last_s)
            prev = np.where(alive, cur, prev)
            if j % ch.n_sub == 0 and j // ch.n_sub < n_lev:
                A_levels[j // ch.n_sub] = A
            if not alive.any():
                break
        eidx, ew = ch.exit_stencil()
        sig_exit = (self.sigma[eidx] * ew).sum(axis=1)
        A_exit = A + 0.5 * (tau - last_s) * (last_sigma + sig_exit)
        self.A_levels = A_levels
        self.A_exit = np.where(tau > 0, A_exit, 0.0)

    def _sweep_setup(self):
        ch, g = self.chars, self.grid
        tau = ch.tau_minus
        full = tau > g.dt
        px, py, d, alive = ch.positions(ch.n_sub)
        idx1, w1 = ch.stencil(px, py, d, alive & full)
        eidx, ew = ch.exit_stencil()
        self.sweep_idx = np.ascontiguousarray(np.where(full[:, None], idx1, eidx))
        self.sweep_w = np.ascontiguousarray(np.where(full[:, None], w1, ew))
        A1 = self.A_levels[1] if self.A_levels.shape[0] > 1 else np.zeros(g.M)
        self.sweep_att = np.where(full, np.exp(-A1), np.exp(-self.A_exit))
        self.sweep_half = 0.5 * np.minimum(tau, g.dt)
        self.sweep_alpha = np.where(full, 1.0, tau / g.dt)
        self.sweep_full = full.astype(np.uint8)

    # -- the three pieces ----------------------------------------------------------
    def initial_term(self, f0) -> np.ndarray:
        g, ch = self.grid, self.chars
        f0 = as_values(g, f0, static=True)
        out = np.zeros((g.n_t + 1, g.M))
        if not np.any(f0):
            return out
        for k in range(min(ch.n_levels, g.n_t + 1)):
            px, py, d, alive = ch.positions(k * ch.n_sub)
            if not alive.any():
                break
            idx, w = ch.stencil(px, py, d, alive)
            out[k] = np.where(alive, np.exp(-self.A_levels[k]) * (f0[idx] * w).sum(axis=1), 0.0)
        return out

    def boundary_term(self, f_minus: IncomingData | None) -> np.ndarray:
        g, ch = self.grid, self.chars
        out = np.zeros((g.n_t + 1, g.M))
        if f_minus is None:
            return out
        g.check(f_minus.grid)
        if not np.any(f_minus.values[:, g.incoming_mask]):
            return out
        att = np.exp(-self.A_exit)
        for n, t in enumerate(g.times):
            sel = np.flatnonzero(ch.tau_minus <= t)
            if sel.size == 0:
                continue
            vals = f_minus.interpolate(t - ch.tau_minus[sel], ch.exit_alpha[sel],
                                       ch.exit_direction[sel])
            out[n, sel] = att[sel] * vals
        return out

    def duhamel(self, g_src: np.ndarray, method: str | None = None) -> np.ndarray:
        """Attenuated time convolution of a source (n_t + 1, M) along characteristics."""
        method = method or self.method
        g_src = np.ascontiguousarray(g_src, dtype=float)
        if not np.any(g_src):
            return np.zeros_like(g_src)
        if method == "sweep":
            return _kernels.sl_sweep(g_src, self.sweep_idx, self.sweep_w, self.sweep_att,
                                     self.sweep_half, self.sweep_alpha, self.sweep_full,
                                     self.chars.tau_minus, self.grid.dt)
        return self._duhamel_ray(g_src)

    def _duhamel_ray(self, src):
        grid, ch = self.grid, self.chars
        dt = grid.dt
        tau = ch.tau_minus
        K = np.where(tau > 0, np.ceil(tau / dt - 1e-12).astype(np.intp) - 1, -1)
        K = np.minimum(K, grid.n_t)
        r = tau - K * dt
        G = np.zeros_like(src)
        for k in range(min(ch.n_levels, grid.n_t + 1)):
            px, py, d, alive = ch.positions(k * ch.n_sub)
            alive = alive & (k <= K)
            if not alive.any():
                break
            idx, w = ch.stencil(px, py, d, alive)
            att = np.exp(-self.A_levels[k])
            base = 0.5 * dt if k == 0 else dt
            mid = np.where(k < K, base, (0.0 if k == 0 else 0.5 * dt) + 0.5 * r)
            coef_mid = np.where(alive, att * mid, 0.0)
            coef_end = np.where(alive, att * (0.0 if k == 0 else 0.5 * dt), 0.0)
            _kernels.ray_accumulate(G, src, idx, w, coef_mid, coef_end, k, tau, dt)
        eidx, ew = ch.exit_stencil()
        ok = (K >= 0) & (K < grid.n_t)
        coef = np.where(ok, 0.5 * r * np.exp(-self.A_exit), 0.0)
        _kernels.ray_exit_accumulate(G, src, eidx, ew, np.ascontiguousarray(coef),
                                     np.ascontiguousarray(np.maximum(K, 0)),
                                     np.ascontiguousarray(r / dt), tau, dt)
        return G

    # -- scattering and transport derivative -------------------------------------
    def scatter(self, values: np.ndarray) -> np.ndarray:
        """K(f) for flat values (..., M)."""
        g = self.grid
        if self._mu_w is None:
            return np.zeros_like(values)
        lead = values.shape[:-1]
        f = values.reshape(lead + (g.n_nodes, g.n_v))
        if self._mu_w.shape[0] == 1:
            out = f @ self._mu_w[0]
        else:
            out = np.einsum("...nk,nkj->...nj", f, self._mu_w)
        return out.reshape(values.shape)

    def transport_derivative(self, values: np.ndarray, f_minus: IncomingData | None = None) -> np.ndarray:
        """(d/dt + X) along characteristics by backward differences on the solver stencil.

        Static input gives X f.  Nodes whose backward characteristic leaves
        within one step difference against the exit point (incoming data, or
        the interpolated value there when the input is static).
        """
        g, ch = self.grid, self.chars
        tau = ch.tau_minus
        full = self.sweep_full.astype(bool)
        step = np.where(full, g.dt, tau)
        usable = step > 1e-3 * g.dt
        idx, w = self.sweep_idx, self.sweep_w
        if values.ndim == 1:
            back = (values[idx] * w).sum(axis=1)
            return np.where(usable, (values - back) / np.where(usable, step, 1.0), 0.0)
        out = np.zeros_like(values)
        bsel = ~full
        for n in range(1, values.shape[0]):
            back = np.where(full, (w * values[n - 1][idx]).sum(axis=1), 0.0)
            if f_minus is not None and bsel.any():
                back[bsel] = f_minus.interpolate(g.times[n] - tau[bsel], ch.exit_alpha[bsel],
                                                 ch.exit_direction[bsel])
            out[n] = np.where(usable, (values[n] - back) / np.where(usable, step, 1.0), 0.0)
        out[0] = out[1] if values.shape[0] > 1 else 0.0
        return out

    def residual(self, values, source=None, f_minus=None) -> np.ndarray:
        """Discrete T f - S = (d/dt + X + sigma - K) f - S."""
        src = 0.0 if source is None else as_values(self.grid, source, static=values.ndim == 1)
        return self.transport_derivative(values, f_minus) + self.sigma * values - self.scatter(values) - src

    # -- solves --------------------------------------------------------------------
    def free_streaming(self, S=None, f0=None, f_minus=None) -> np.ndarray:
        g = self.grid
        out = self.initial_term(f0) + self.boundary_term(f_minus)
        if S is not None:
            out += self.duhamel(as_values(g, S, static=False))
        return out

    def solve(self, S=None, f0=None, f_minus=None, tol: float = 1e-10,
              max_iter: int = 200) -> tuple[Field, SolveReport]:
        g = self.grid
        base = self.free_streaming(S, f0, f_minus)
        history: list[float] = []
        f = base.copy()
        converged = True
        notes: list[str] = []
        if self._mu_w is not None:
            w = base
            for it in range(max_iter):
                w = self.duhamel(self.scatter(w))
                f += w
                inc = float(np.abs(w).max())
                history.append(inc)
                if inc <= tol:
                    break
            else:
                raise NonConvergenceError(
                    f"Picard iteration did not reach tol={tol:g} in {max_iter} iterations", history)
            floor = 1e3 * np.finfo(float).eps * max(float(np.abs(f).max()), 1e-300)
            for i in range(1, len(history) - 1):
                if history[i + 1] > history[i] * (1 + 1e-9) and history[i + 1] > floor:
                    converged = False
                    notes.append(f"increment grew at iteration {i + 1}")
                    break
        data = (float(np.abs(as_values(g, f0, True)).max()) if f0 is not None else 0.0)
        data += f_minus.sup_norm() if f_minus is not None else 0.0
        data += float(np.abs(as_values(g, S, False)).max()) if S is not None else 0.0
        const = float(np.abs(f).max()) / data if data > 0 else 0.0
        report = SolveReport(len(history), history, self.kappa, converged, const, notes=notes)
        return Field(g, f.reshape(g.n_t + 1, g.n_nodes, g.n_v)), report


def _operator(coeffs_or_op, method="ray") -> TransportOperator:
    if isinstance(coeffs_or_op, TransportOperator):
        return coeffs_or_op
    return TransportOperator(coeffs_or_op, method=method)


def attenuation(sigma, x, v, s, domain=None, ds: float | None = None, grid: PhaseGrid | None = None) -> float:
    """exp(-int_0^s sigma(phi_{-r}(x, v)) dr) by composite trapezoid.

    ``sigma`` is a callable ``sigma(x, y, theta)`` (evaluated exactly along
    the ray) or a static Field (interpolated with the solver stencil).
    """
    from .geometry import exit_time, flow

    if isinstance(sigma, Field):
        grid = sigma.grid
    if domain is None:
        domain = grid.domain
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    tau = exit_time(domain, x, v, "-")
    if s < 0 or s > tau + 1e-9 * domain.radius:
        raise ValueError(f"s={s} is outside [0, tau_-={tau}]")
    if s == 0:
        return 1.0
    if ds is None:
        ds = 0.5 * grid.dx if grid is not None else 1e-3 * domain.radius
    n = max(1, int(math.ceil(s / ds)))
    rs = np.linspace(0.0, min(s, tau), n + 1)
    pts = [flow(domain, x, v, -float(r)) for r in rs]
    px = np.array([p.x[0] for p in pts])
    py = np.array([p.x[1] for p in pts])
    th = np.array([p.theta for p in pts])
    if isinstance(sigma, Field):
        g = sigma.grid
        if domain.is_euclidean:
            j = int(np.argmin(np.abs(np.angle(np.exp(1j * (g.quad.angles - th[0]))))))
            idx, w = g.phase_stencil(px, py, np.full(px.size, j))
        else:
            idx, w = g.phase_stencil(px, py, th)
        vals = (sigma.flat[idx] * w).sum(axis=1)
    else:
        vals = np.broadcast_to(np.asarray(sigma(px, py, th), dtype=float), px.shape)
    integral = float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(rs)))
    return math.exp(-integral)


def scattering_apply(mu, values, weights) -> np.ndarray:
    """K(f)(v_j) = sum_k w_k mu(v_k, v_j) f(v_k) for one (t, x) slice."""
    mu = np.asarray(mu, dtype=float)
    values = np.asarray(values, dtype=float)
    return (weights * values) @ mu


def free_streaming_term(coeffs_or_op, f0=None, f_minus=None, S=None) -> Field:
    op = _operator(coeffs_or_op)
    g = op.grid
    vals = op.free_streaming(S, f0, f_minus)
    return Field(g, vals.reshape(g.n_t + 1, g.n_nodes, g.n_v))


def solve_linear(coeffs_or_op, S=None, f0=None, f_minus=None, tol: float = 1e-10,
                 max_iter: int = 200, method: str = "ray") -> tuple[Field, SolveReport]:
    return _operator(coeffs_or_op, method).solve(S, f0, f_minus, tol, max_iter)


def solve_nonlinear(coeffs_or_op, f0=None, f_minus=None, tol: float = 1e-12,
                    delta: float = 0.05, max_iter: int = 100,
                    method: str = "ray") -> tuple[Field, SolveReport]:
    """Small-data nonlinear solve by the contraction w -> L^{-1}(-N(w + f_hat))."""
    op = _operator(coeffs_or_op, method)
    g = op.grid
    f0_sup = float(np.abs(as_values(g, f0, True)).max()) if f0 is not None else 0.0
    fm_sup = f_minus.sup_norm() if f_minus is not None else 0.0
    if f0_sup > delta * (1 + 1e-12) or fm_sup > delta * (1 + 1e-12):
        raise SmallnessGateError(
            f"data too large for the small-data solver: |f0|={f0_sup:.3g}, "
            f"|f_-|={fm_sup:.3g}, gate delta={delta:.3g}")
    inner_tol = 0.1 * tol
    f_hat, rep = op.solve(None, f0, f_minus, inner_tol)
    N = op.coeffs.nonlinearity
    if N is None:
        rep.outer = True
        return f_hat, rep
    fh = f_hat.values.reshape(g.n_t + 1, g.M)
    w = np.zeros_like(fh)
    history: list[float] = []
    growth = 0
    for _ in range(max_iter):
        w_new, _ = op.solve(-N(w + fh), None, None, inner_tol)
        w_new = w_new.values.reshape(g.n_t + 1, g.M)
        inc = float(np.abs(w_new - w).max())
        w = w_new
        if history and inc > history[-1]:
            growth += 1
            if growth >= 3:
                raise DivergenceError("nonlinear iteration diverged (increment grew 3 times in a row)",
                                      history + [inc])
        else:
            growth = 0
        history.append(inc)
        if inc <= tol:
            break
    else:
        raise NonConvergenceError(f"nonlinear iteration did not reach tol={tol:g}", history)
    f = fh + w
    data = f0_sup + fm_sup
    const = float(np.abs(f).max()) / data if data > 0 else 0.0
    report = SolveReport(len(history), history, op.kappa, True, const, outer=True)
    return Field(g, f.reshape(g.n_t + 1, g.n_nodes, g.n_v)), report


def measure(field: Field) -> BoundaryTrace:
    """Restriction of a solution to outgoing boundary nodes: the measurement."""
    g = field.grid
    i, j = g.outgoing_pairs
    nodes = g.n_lattice + i
    if field.static:
        raise ValueError("measurement needs a time-dependent field")
    return BoundaryTrace(g, field.values[:, nodes, j].copy())
