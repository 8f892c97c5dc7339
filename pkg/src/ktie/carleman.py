"""Carleman weights, the admissible coefficient class, and discrete versions of
the weighted inequalities used for stability.

Every functional returns quantities multiplied by a common factor
``exp(-2 s max(phi))`` so that large ``s`` never overflows; ratios between
the two sides are unaffected.  Weighted integrals use exponentially fitted
quadrature (exact for an exponent linear between samples), since at the
default s the weight varies by orders of magnitude across one grid cell.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSet
from .errors import HypothesisError
from .geometry import Domain, TANGENT_BAND, exit_time_flow_identity_check
from .grid import Field, PhaseGrid
from .transport import TransportOperator, _operator

DEFAULT_S_GRID = (10.0, 20.0, 40.0, 80.0, 160.0)


def default_s_values(domain: Domain) -> list[float]:
    return [s / domain.diameter for s in DEFAULT_S_GRID]


# -- weights -------------------------------------------------------------------

@dataclass(frozen=True)
class EuclideanWeight:
    """phi(t, x) = gamma . x - beta t with B(v) = gamma . v - beta."""

    gamma: tuple[float, float] = (1.0, 0.0)
    beta: float = 0.15
    gamma0: float = 0.3

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float)
        if abs(np.hypot(*g) - 1.0) > 1e-12:
            raise ValueError("gamma must be a unit vector")
        if not 0.0 < self.beta < self.gamma0:
            raise ValueError(f"need 0 < beta < gamma0, got beta={self.beta}, gamma0={self.gamma0}")

    @property
    def a(self) -> float:
        return self.gamma0 - self.beta

    def B(self, theta):
        return self.gamma[0] * np.cos(theta) + self.gamma[1] * np.sin(theta) - self.beta

    def in_V(self, theta):
        # small tolerance so grid angles sitting exactly on gamma . v = gamma0 count
        return self.gamma[0] * np.cos(theta) + self.gamma[1] * np.sin(theta) >= self.gamma0 - 1e-12

    def phi(self, t, x, y):
        return self.gamma[0] * x + self.gamma[1] * y - self.beta * t

    def identity_residual(self, grid: PhaseGrid, delta: float | None = None) -> float:
        """max |(phi(t + d, x + d v) - phi(t, x)) / d - B(v)| over all phase nodes."""
        delta = grid.dt if delta is None else delta
        th = grid.phase_theta
        x, y = grid.phase_x, grid.phase_y
        t = 0.5 * grid.T
        lhs = (self.phi(t + delta, x + delta * np.cos(th), y + delta * np.sin(th))
               - self.phi(t, x, y)) / delta
        return float(np.abs(lhs - self.B(th)).max())


@dataclass(frozen=True)
class RiemannianWeight:
    """phi(t, x, v) = -beta t - tau_+(x, v) with B = 1 - beta."""

    domain: Domain
    beta: float = 0.15

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"need 0 < beta < 1, got {self.beta}")

    @property
    def B(self) -> float:
        return 1.0 - self.beta

    @property
    def degenerate(self) -> bool:
        return self.B < 1e-3

    def phi(self, t, tau_plus):
        return -self.beta * t - tau_plus

    def identity_residual(self, samples) -> float:
        """Residual of tau_+(phi_t(x, v)) = tau_+(x, v) - t along traced geodesics."""
        return exit_time_flow_identity_check(self.domain, samples)


# -- admissible class ------------------------------------------------------------

@dataclass(frozen=True)
class LambdaClass:
    """Fields even in v and vanishing where |gamma . v| <= gamma0."""

    gamma: tuple[float, float] = (1.0, 0.0)
    gamma0: float = 0.3

    def profile_mask(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        n_v = theta.size
        half = np.abs(self.gamma[0] * np.cos(theta[: n_v // 2])
                      + self.gamma[1] * np.sin(theta[: n_v // 2])) > self.gamma0
        return np.concatenate([half, half])

    def contains(self, values, grid: PhaseGrid) -> bool:
        v = np.asarray(values.values if isinstance(values, Field) else values)
        n_v = grid.n_v
        opposite = (np.arange(n_v) + n_v // 2) % n_v
        if not np.array_equal(v, v[..., opposite]):
            return False
        return not np.any(v[..., ~self.profile_mask(grid.quad.angles)])


def lambda_project(values, cls: LambdaClass, grid: PhaseGrid | None = None):
    """Symmetrize in v and zero the directions with |gamma . v| <= gamma0."""
    if isinstance(values, Field):
        return Field(values.grid, lambda_project(values.values, cls, values.grid))
    v = np.asarray(values, dtype=float)
    n_v = v.shape[-1]
    if n_v % 2:
        raise ValueError("direction grid must be symmetric under v -> -v")
    opposite = (np.arange(n_v) + n_v // 2) % n_v
    out = 0.5 * (v + v[..., opposite])
    theta = grid.quad.angles if grid is not None else 2 * np.pi * np.arange(n_v) / n_v
    return out * cls.profile_mask(theta)


# -- reports -------------------------------------------------------------------

@dataclass
class InequalityReport:
    s_values: list[float]
    lhs: list[float]
    rhs: list[float]
    fitted_C: float
    holds: bool
    label: str = ""
    constants: dict = field(default_factory=dict)

    @property
    def ratios(self) -> list[float]:
        return [l / r if r > 0 else math.inf for l, r in zip(self.lhs, self.rhs)]

    def violations(self, C: float | None = None) -> list[float]:
        C = self.fitted_C if C is None else C
        return [s for s, l, r in zip(self.s_values, self.lhs, self.rhs) if l > C * r]

    def verdict(self) -> str:
        tag = f"[{self.label}] " if self.label else ""
        if self.holds:
            return f"{tag}holds: lhs <= {self.fitted_C:.6g} * rhs for all s >= {self.s_values[0]:.6g}"
        bad = ", ".join(f"{s:.6g}" for s in self.violations())
        return f"{tag}violated at s = {bad} (C = {self.fitted_C:.6g})"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "lhs", "rhs", "ratio"])
        for s, l, r, q in zip(self.s_values, self.lhs, self.rhs, self.ratios):
            w.writerow([f"{s:.12g}", f"{l:.12e}", f"{r:.12e}", f"{q:.12e}"])
        return buf.getvalue()


def inequality_report(s_values, lhs, rhs, C: float | None = None, slack: float = 1.1,
                      label: str = "", constants=None) -> InequalityReport:
    """Calibrate C at the smallest s (inflated by ``slack``) unless given, then verify."""
    order = np.argsort(s_values)
    s_values = [float(s_values[i]) for i in order]
    lhs = [float(lhs[i]) for i in order]
    rhs = [float(rhs[i]) for i in order]
    if C is None:
        # a non-positive lhs satisfies the inequality for any C >= 0
        C = slack * max(lhs[0] / rhs[0], 0.0) if rhs[0] > 0 else math.inf
    holds = all(l <= C * r for l, r in zip(lhs, rhs))
    return InequalityReport(s_values, lhs, rhs, C, holds, label, dict(constants or {}))


# -- exponentially fitted quadrature ------------------------------------------------

_SERIES = 12


def _fitted_coefficients(u):
    """A(u) = int_0^1 (1 - r) e^{u r} dr and C(u) = int_0^1 r e^{u r} dr."""
    u = np.asarray(u, dtype=float)
    small = np.abs(u) < 0.1
    us = np.where(small, u, 0.0)
    A_s = np.zeros_like(us)
    C_s = np.zeros_like(us)
    term = np.ones_like(us)
    for k in range(_SERIES):
        denom = math.factorial(k + 2)
        A_s += term / denom
        C_s += (k + 1) * term / denom
        term = term * us
    ul = np.where(small, 1.0, u)
    with np.errstate(over="ignore", invalid="ignore"):
        eu = np.exp(ul)
        A_l = (eu - 1.0 - ul) / ul**2
        C_l = (ul * eu - eu + 1.0) / ul**2
    return np.where(small, A_s, A_l), np.where(small, C_s, C_l)


def fitted_integral(values, exponents, coords, axis: int = 0):
    """int values * exp(exponents) along ``axis`` with both piecewise linear in ``coords``.

    Exact for linear exponents, so steep weights need no extra resolution.
    Exponents should be shifted to be <= 0 by the caller.
    """
    v = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    p = np.moveaxis(np.broadcast_to(np.asarray(exponents, dtype=float), np.asarray(values).shape), axis, 0)
    h = np.diff(np.asarray(coords, dtype=float))
    h = h.reshape((-1,) + (1,) * (v.ndim - 1))
    A, C = _fitted_coefficients(p[1:] - p[:-1])
    seg = h * np.exp(p[:-1]) * (v[:-1] * A + v[1:] * C)
    return seg.sum(axis=0)


class ChordQuadrature:
    """Volume integrals over the disk along chords parallel to a direction.

    Chords are spaced ``dx`` apart; along each chord samples are spaced at
    most ``dx / refine`` and include both endpoints on the circle.  Nodal
    data is carried to the samples with the solver's spatial stencil, and
    the weight exponent is integrated exactly between samples.
    """

    def __init__(self, grid: PhaseGrid, direction=(1.0, 0.0), refine: int = 2):
        self.grid = grid
        R = grid.domain.radius
        d = np.asarray(direction, dtype=float)
        d = d / np.hypot(*d)
        perp = np.array([-d[1], d[0]])
        k = int(math.floor(R / grid.dx))
        etas = grid.dx * np.arange(-k, k + 1)
        pts, chords = [], []
        start = 0
        h = grid.dx / refine
        for eta in etas:
            half = math.sqrt(max(R * R - eta * eta, 0.0))
            n = max(1, int(math.ceil(2 * half / h)))
            xi = np.linspace(-half, half, n + 1)
            pts.append(xi[:, None] * d[None, :] + eta * perp[None, :])
            chords.append((start, start + n + 1, xi))
            start += n + 1
        self.points = np.concatenate(pts)
        # keep samples on the closed disk despite rounding
        r = np.hypot(self.points[:, 0], self.points[:, 1])
        self.points *= np.minimum(1.0, R / np.maximum(r, 1e-300))[:, None]
        self.chords = chords
        self.eta_weight = grid.dx
        self.idx, self.w = grid.lattice_stencil(self.points[:, 0], self.points[:, 1])

    def sample(self, nodal):
        """Nodal values (n_nodes, ...) to samples (P, ...)."""
        nodal = np.asarray(nodal, dtype=float)
        vals = nodal[self.idx]                              # (P, 4, ...)
        w = self.w.reshape(self.w.shape + (1,) * (nodal.ndim - 1))
        return (vals * w).sum(axis=1)

    def integrate(self, sampled, exponent):
        """Sum over chords of the fitted integral; trailing axes are kept."""
        total = 0.0
        ex = np.broadcast_to(exponent, sampled.shape)
        for a, b, xi in self.chords:
            if b - a < 2:
                continue
            total = total + fitted_integral(sampled[a:b], ex[a:b], xi, axis=0)
        return self.eta_weight * total


# -- Euclidean functional -----------------------------------------------------------

def _field_values(f, grid):
    vals = f.values if isinstance(f, Field) else np.asarray(f, dtype=float)
    return vals.reshape(grid.n_t + 1, grid.n_nodes, grid.n_v)


def _boundary_pieces(grid: PhaseGrid, values):
    """Ring values (nt1, n_ring, n_v) and signed weights with the tangential band dropped."""
    ring = values[:, grid.ring_slice, :]
    nv = grid.ring_normal_product
    nv = np.where(np.abs(nv) < TANGENT_BAND, 0.0, nv)
    w = grid.ring_arc[:, None] * grid.quad.weights[None, :] * nv
    return ring, w


def hypothesis_constants(coeffs: CoefficientSet, weight: EuclideanWeight, gamma1: float = 0.3) -> dict:
    """C_sigma over the band |B| <= gamma1 and C_mu, by quadrature."""
    g = coeffs.grid
    B = weight.B(g.quad.angles)
    band = np.abs(B) <= gamma1
    sig = np.abs(coeffs.sigma[: g.n_lattice])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(sig[:, band] == 0, 0.0, sig[:, band] / np.abs(B[band]))
        C_sigma = float(ratio.max()) if ratio.size else 0.0
        if coeffs.mu is None:
            C_mu = 0.0
        else:
            mu2 = coeffs.mu**2
            invB2 = np.where(B == 0, np.inf, 1.0 / B**2)
            terms = np.where(mu2 == 0, 0.0, mu2 * (invB2 * g.quad.weights)[None, :, None])
            C_mu = float(terms.sum(axis=1).max())
    return {"C_sigma": C_sigma, "C_mu": C_mu, "gamma1": gamma1}


class EuclideanCarleman:
    """Both sides of the Euclidean weighted inequality for one field, any s.

    The equation residual uses the solver's own backward-difference transport
    derivative, so solver outputs have small residual by construction.
    """

    def __init__(self, f, weight: EuclideanWeight, coeffs_or_op, gamma1: float = 0.3,
                 check: bool = True, f_tol: float = 1e-8):
        op = _operator(coeffs_or_op)
        g = op.grid
        self.grid, self.weight, self.op = g, weight, op
        vals = _field_values(f, g)
        self.values = vals
        self.constants = hypothesis_constants(op.coeffs, weight, gamma1)
        if check:
            failures = []
            scale = max(float(np.abs(vals).max()), 1e-300)
            if np.abs(vals[-1]).max() > f_tol * scale:
                failures.append("f(T) does not vanish")
            outside = ~weight.in_V(g.quad.angles)
            if np.abs(vals[0][:, outside]).max(initial=0.0) > f_tol * scale:
                failures.append("f(0) is not supported in V")
            if not math.isfinite(self.constants["C_sigma"]):
                failures.append("sigma / B is unbounded on the band |B| <= gamma1")
            if not math.isfinite(self.constants["C_mu"]):
                failures.append("the weighted mu integral with |B(v')|^-2 is unbounded")
            if failures:
                raise HypothesisError(failures)
        self.residual = op.residual(vals.reshape(g.n_t + 1, g.M)).reshape(vals.shape)
        self.quad = ChordQuadrature(g, weight.gamma)
        pts = self.quad.points
        R = g.domain.radius
        # spatial exponent per unit s, shifted so its maximum over the closed disk is 0
        self.phi_x = weight.gamma[0] * pts[:, 0] + weight.gamma[1] * pts[:, 1] - R
        ring = g.points[g.ring_slice]
        self.phi_ring = weight.gamma[0] * ring[:, 0] + weight.gamma[1] * ring[:, 1] - R
        th = g.quad.angles
        self.B2 = weight.B(th) ** 2
        self.V = weight.in_V(th)

    def _volume(self, nodal, s):
        q = self.quad
        per_dir = q.integrate(q.sample(nodal), 2 * s * self.phi_x[:, None])
        return float((per_dir * self.grid.quad.weights).sum())

    def evaluate(self, s: float) -> tuple[float, float]:
        g = self.grid
        et = -2 * s * self.weight.beta * g.times
        f2t = fitted_integral(self.values**2, et[:, None, None], g.times)
        r2t = fitted_integral(self.residual**2, et[:, None, None], g.times)
        init = self._volume(self.values[0] ** 2 * self.V, s)
        vol = self._volume(f2t * self.B2, s)
        res = self._volume(r2t, s)
        _, bw = _boundary_pieces(g, self.values)
        bd = float((f2t[g.ring_slice] * bw * np.exp(2 * s * self.phi_ring)[:, None]).sum())
        return s * init + s * s * vol, res + s * bd

    def report(self, s_values=None, C=None, label="") -> InequalityReport:
        s_values = list(s_values or default_s_values(self.grid.domain))
        sides = [self.evaluate(s) for s in s_values]
        return inequality_report(s_values, [a for a, _ in sides], [b for _, b in sides],
                                 C=C, label=label, constants=self.constants)


def carleman_functional_euclidean(f, weight: EuclideanWeight, coeffs_or_op, s: float,
                                  check: bool = True) -> tuple[float, float]:
    return EuclideanCarleman(f, weight, coeffs_or_op, check=check).evaluate(s)


# -- Riemannian functional ----------------------------------------------------------

class RiemannianCarleman:
    """Terms of the weighted inequality with the direction-dependent weight."""

    def __init__(self, u, weight: RiemannianWeight, coeffs_or_op):
        op = _operator(coeffs_or_op)
        if op.coeffs.has_scattering:
            raise HypothesisError(["the direction-dependent weight admits no scattering term"])
        g = op.grid
        self.grid, self.weight, self.op = g, weight, op
        vals = _field_values(u, g)
        self.values = vals
        self.residual = op.residual(vals.reshape(g.n_t + 1, g.M)).reshape(vals.shape)
        self.quad = ChordQuadrature(g)
        tau_p = op.chars.tau_plus.reshape(g.n_nodes, g.n_v)
        self.tau_nodes = tau_p
        # max of phi is 0 (t = 0 at outgoing boundary points), so no shift is needed
        self.tau_samples = self.quad.sample(tau_p)
        pts = self.quad.points
        self.c2 = g.domain.c(pts[:, 0], pts[:, 1]) ** 2

    def _volume(self, nodal, s):
        q = self.quad
        per_dir = q.integrate(q.sample(nodal) * self.c2[:, None], -2 * s * self.tau_samples)
        return float((per_dir * self.grid.quad.weights).sum())

    def terms(self, s: float) -> dict:
        g, B, beta = self.grid, self.weight.B, self.weight.beta
        et = -2 * s * beta * g.times
        u2t = fitted_integral(self.values**2, et[:, None, None], g.times)
        r2t = fitted_integral(self.residual**2, et[:, None, None], g.times)
        _, bw = _boundary_pieces(g, self.values)
        eb = np.exp(-2 * s * self.tau_nodes[g.ring_slice])
        final = math.exp(2 * s * (-beta * g.T))
        return {
            "volume": s * s * B * B * self._volume(u2t, s),
            "initial": s * B * self._volume(self.values[0] ** 2, s),
            "final": -s * B * final * self._volume(self.values[-1] ** 2, s),
            "boundary": -s * B * float((u2t[g.ring_slice] * eb * bw).sum()),
            "rhs": self._volume(r2t, s),
        }

    def evaluate(self, s: float) -> tuple[float, float]:
        t = self.terms(s)
        return t["volume"] + t["initial"] + t["final"] + t["boundary"], t["rhs"]

    def report(self, s_values=None, C=None, label="") -> InequalityReport:
        s_values = list(s_values or default_s_values(self.grid.domain))
        sides = [self.evaluate(s) for s in s_values]
        consts = {"B": self.weight.B, "degenerate": self.weight.degenerate}
        return inequality_report(s_values, [a for a, _ in sides], [b for _, b in sides],
                                 C=C, label=label, constants=consts)


def carleman_functional_riemannian(u, weight: RiemannianWeight, coeffs_or_op, s: float) -> dict:
    return RiemannianCarleman(u, weight, coeffs_or_op).terms(s)


# -- energy functional ------------------------------------------------------------

@dataclass
class EnergyValues:
    lhs: float              # max over t of ||d_t f(t)||_{L^2(S Omega)}
    lhs_boundary: float     # ||d_t f||_{L^2(outgoing boundary x (0, T))}
    rhs: float
    parts: dict


def time_derivative_solution(op: TransportOperator, S=None, f0=None, f_minus=None,
                             tol: float = 1e-12):
    """d_t f as the solution of the time-differentiated problem.

    u = d_t f solves the same equation with source d_t S, incoming data
    d_t f_minus and initial data -X f0 - sigma f0 + K f0 + S(0).
    """
    from .grid import IncomingData, as_values

    g = op.grid
    f0v = as_values(g, f0, static=True)
    Sv = as_values(g, S, static=False) if S is not None else None
    u0 = -op.transport_derivative(f0v) - op.sigma * f0v + op.scatter(f0v)
    dS = None
    if Sv is not None:
        u0 = u0 + Sv[0]
        dS = np.gradient(Sv, g.dt, axis=0, edge_order=2)
    dfm = None
    if f_minus is not None:
        dfm = IncomingData(g, np.gradient(f_minus.values, g.dt, axis=0, edge_order=2))
    u, _ = op.solve(dS, u0, dfm, tol)
    return u, u0


def energy_functional(coeffs_or_op, S_tilde=None, S0=None, f0=None, f_minus=None,
                      tol: float = 1e-12) -> EnergyValues:
    """Both sides of the energy estimate for the problem with source S_tilde * S0."""
    from .grid import as_values

    op = _operator(coeffs_or_op)
    g = op.grid
    St = as_values(g, S_tilde, static=True)
    S = None
    if S_tilde is not None:
        S = St[None, :] * (as_values(g, S0, static=False) if S0 is not None else 1.0)
    u, _ = time_derivative_solution(op, S, f0, f_minus, tol)
    uv = u.values
    per_t = np.sqrt((uv**2 * g.phase_weights).sum(axis=(1, 2)))
    i, j = g.outgoing_pairs
    tr = uv[:, g.n_lattice + i, j]
    bw = (g.ring_arc[i] * g.quad.weights[j] * g.ring_normal_product[i, j])[None, :] * g.time_weights[:, None]
    lhs_b = float(np.sqrt((tr**2 * bw).sum()))
    f0v = as_values(g, f0, static=True)
    pw = g.phase_weights.reshape(g.M)
    norm = lambda a: float(np.sqrt((a**2 * pw).sum()))
    parts = {"S_tilde": norm(St), "f0": norm(f0v), "Xf0": norm(op.transport_derivative(f0v))}
    if f_minus is not None:
        dfm = np.gradient(f_minus.values, g.dt, axis=0, edge_order=2)
        ii, jj = np.nonzero(g.incoming_mask)
        w = (g.ring_arc[ii] * g.quad.weights[jj] * np.abs(g.ring_normal_product[ii, jj]))[None, :]
        parts["dt_f_minus"] = float(np.sqrt((dfm[:, ii, jj] ** 2 * w * g.time_weights[:, None]).sum()))
    return EnergyValues(float(per_t.max()), lhs_b, float(sum(parts.values())), parts)


@dataclass
class EnergyEnsemble:
    """Calibrate C on one split of random draws, count violations on the other."""

    calibration: list[float]
    held_out: list[float]
    fitted_C: float

    @property
    def violations(self) -> int:
        return sum(r > self.fitted_C for r in self.held_out)


def random_energy_draw(grid: PhaseGrid, rng: np.random.Generator, incoming: bool = False):
    """One smooth random (S_tilde, S0, f0, f_minus) tuple on ``grid``."""
    from .grid import IncomingData

    g = grid
    R = g.domain.radius
    x, y, th = g.phase_x, g.phase_y, g.phase_theta
    c = rng.uniform(-0.5, 0.5, size=(2, 2)) * R
    a = rng.normal(size=(2, 3))
    width = rng.uniform(0.2, 0.5, size=2) * R

    def profile(k):
        return a[k, 0] + a[k, 1] * np.cos(th) + a[k, 2] * np.sin(2 * th)

    S_tilde = np.exp(-((x - c[0, 0]) ** 2 + (y - c[0, 1]) ** 2) / width[0] ** 2) * profile(0)
    r2 = ((x - c[1, 0]) ** 2 + (y - c[1, 1]) ** 2) / width[1] ** 2
    f0 = np.maximum(0.0, 1.0 - r2) ** 2 * profile(1)
    omega = rng.uniform(0.5, 3.0)
    S0 = (1.0 + 0.5 * np.sin(omega * g.times))[:, None] * np.ones(g.M)[None, :]
    f_minus = None
    if incoming:
        b = rng.normal(size=2)
        f_minus = IncomingData.from_function(
            g, lambda t, x_, y_, th_: np.sin(t) * np.exp(-t) * (b[0] + b[1] * np.cos(th_ - np.arctan2(y_, x_))))
    shape = (g.n_nodes, g.n_v)
    return (S_tilde.reshape(shape), S0.reshape(g.n_t + 1, *shape), f0.reshape(shape), f_minus)


def energy_ratio(values: EnergyValues) -> float:
    return max(values.lhs, values.lhs_boundary) / values.rhs if values.rhs > 0 else math.inf


def energy_ensemble(coeffs_or_op, n_calibration: int = 100, n_held_out: int = 100,
                    seed: int = 0, incoming: bool | None = None, slack: float = 1.1) -> EnergyEnsemble:
    op = _operator(coeffs_or_op)
    if incoming is None:
        incoming = not op.grid.domain.is_euclidean
    rng = np.random.default_rng(seed)
    ratios = [energy_ratio(energy_functional(op, *random_energy_draw(op.grid, rng, incoming)))
              for _ in range(n_calibration + n_held_out)]
    cal, held = ratios[:n_calibration], ratios[n_calibration:]
    return EnergyEnsemble(cal, held, slack * max(cal))


# -- run helpers ------------------------------------------------------------------

def time_cutoff(times, T: float, width: float = 0.5) -> np.ndarray:
    """Smoothstep equal to 1 up to T - 2 width and 0 from T - width on."""
    r = np.clip((T - width - np.asarray(times, dtype=float)) / width, 0.0, 1.0)
    return r * r * (3 - 2 * r)


def cut_off(values, grid: PhaseGrid, width: float = 0.5) -> np.ndarray:
    """Multiply a time-dependent field by the cutoff so that it vanishes at T."""
    vals = _field_values(values, grid)
    return vals * time_cutoff(grid.times, grid.T, width)[:, None, None]


def negative_control_coefficients(coeffs: CoefficientSet, weight: EuclideanWeight,
                                  strength: float = 20.0, threshold: float = -0.2) -> CoefficientSet:
    """Strong one-way scattering out of V into directions where the weight decreases.

    sigma is raised by the scattered-out mass so the kernel stays conservative
    from V, but the result is supercritical on the receiving directions and
    its C_mu constant is far outside the admissible budget.
    """
    from .catalog import negative_control_kernel

    g = coeffs.grid
    mu = negative_control_kernel(g, weight, strength, threshold)
    outflow = (mu[0] * g.quad.weights[None, :]).sum(axis=1)
    return CoefficientSet(g, coeffs.sigma + outflow[None, :], mu, None, None,
                          coeffs.nonlinearity, {"negative_control": True})
