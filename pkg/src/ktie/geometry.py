"""Disk domains, exit times, characteristics and direction quadrature.

Two geometries are supported: the Euclidean disk, where characteristics are
straight lines and exit times have closed forms, and the disk with a
conformal metric ``g = c(x)^2 dx^2``.  In the conformal case a phase point is
stored as a position and the Euclidean angle ``theta`` of its direction; the
metric-unit velocity is ``e(theta) / c(x)`` and the geodesic equations are

    x' = e(theta) / c,    theta' = <grad c, e_perp(theta)> / c^2.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import (
    EscapedDomainError,
    InvalidDomainError,
    InvalidQuadratureError,
    NotOnBoundaryError,
    OutOfDomainError,
    TrappedGeodesicError,
)

EUCLIDEAN = "euclidean_disk"
CONFORMAL = "conformal_disk"
TANGENT_BAND = 1e-10
BISECT_ITERS = 52


@dataclass(frozen=True)
class ConformalFactor:
    """Named conformal factor family: ``constant`` (c = 1) or ``gaussian``.

    The gaussian bump is ``c(x) = 1 + amplitude * exp(-|x - center|^2 / width^2)``.
    """

    kind: str = "constant"
    amplitude: float = 0.0
    width: float = 1.0
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("constant", "gaussian"):
            raise InvalidDomainError(f"unknown conformal factor family {self.kind!r}")
        if self.width <= 0:
            raise InvalidDomainError("conformal bump width must be positive")

    @property
    def kernel_params(self) -> tuple[float, float, float, float]:
        amp = self.amplitude if self.kind == "gaussian" else 0.0
        return amp, self.width, float(self.center[0]), float(self.center[1])

    def __call__(self, x, y):
        amp, w, cx, cy = self.kernel_params
        return 1.0 + amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / w**2)

    def gradient(self, x, y):
        amp, w, cx, cy = self.kernel_params
        e = amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / w**2)
        return -2.0 * (x - cx) / w**2 * e, -2.0 * (y - cy) / w**2 * e


@dataclass(frozen=True)
class Domain:
    kind: str
    radius: float
    conformal: ConformalFactor = field(default_factory=ConformalFactor)
    diameter: float = 0.0

    @property
    def is_euclidean(self) -> bool:
        return self.kind == EUCLIDEAN

    def c(self, x, y):
        if self.is_euclidean:
            return np.ones_like(np.asarray(x, dtype=float))
        return self.conformal(x, y)

    @property
    def default_step(self) -> float:
        return 1e-3 * self.radius

    def contains(self, x, y, tol=1e-12) -> np.ndarray:
        return np.hypot(x, y) <= self.radius * (1.0 + tol)


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    v: np.ndarray

    @property
    def theta(self) -> float:
        return math.atan2(self.v[1], self.v[0])


@dataclass(frozen=True)
class DirectionQuadrature:
    angles: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.angles.size

    @property
    def vectors(self) -> np.ndarray:
        return np.stack([np.cos(self.angles), np.sin(self.angles)], axis=1)

    @property
    def opposite(self) -> np.ndarray:
        """Index of -v_j for each node j."""
        n = self.n
        return (np.arange(n) + n // 2) % n

    def integrate(self, values, axis=-1):
        return np.tensordot(values, self.weights, axes=([axis], [0]))


@dataclass
class GeodesicTrace:
    s: np.ndarray
    x: np.ndarray
    v: np.ndarray
    tau_plus: float
    tau_minus: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["s", "x1", "x2", "v1", "v2"])
            for row in zip(self.s, self.x[:, 0], self.x[:, 1], self.v[:, 0], self.v[:, 1]):
                out.writerow([f"{val:.12e}" for val in row])


def direction_quadrature(n_v: int) -> DirectionQuadrature:
    if n_v < 8 or n_v % 2:
        raise InvalidQuadratureError(f"need an even number of directions >= 8, got {n_v}")
    angles = 2.0 * np.pi * np.arange(n_v) / n_v
    return DirectionQuadrature(angles, np.full(n_v, 1.0 / n_v))


# -- exit times -------------------------------------------------------------

def euclidean_exit_time(R, x, y, vx, vy, sign=1.0):
    """Closed-form exit time of the ray x + sign*s*v from the disk |x| <= R."""
    b = sign * (x * vx + y * vy)
    vv = vx * vx + vy * vy
    cc = x * x + y * y - R * R
    disc = np.maximum(b * b - vv * cc, 0.0)
    return np.maximum((-b + np.sqrt(disc)) / vv, 0.0)


def _march(domain, x, y, th, h, max_time, record_every=1, n_records=1):
    amp, w, cx, cy = domain.conformal.kernel_params
    max_steps = int(math.ceil(max_time / abs(h))) + 1
    rec, tau, ex, trapped = _kernels.geodesic_march(
        np.ascontiguousarray(x, dtype=float), np.ascontiguousarray(y, dtype=float),
        np.ascontiguousarray(th, dtype=float), float(h), max_steps, record_every,
        n_records, domain.radius, amp, w, cx, cy, BISECT_ITERS)
    if trapped.any():
        raise TrappedGeodesicError(
            f"{int(trapped.sum())} geodesic(s) still inside after time {max_time:.3g}; "
            "the metric may be trapping")
    return rec, tau, ex


def _trap_limit(domain: Domain) -> float:
    if domain.diameter > 0:
        return 4.0 * domain.diameter
    # before D_metric is known: crude optical-length bound on a chord
    amp = abs(domain.conformal.kernel_params[0])
    return 4.0 * 2.0 * domain.radius * (1.0 + amp) / max(1.0 - amp, 1e-3) * 2.0


def batch_exit(domain, x, y, th, sign=1.0, step=None):
    """Exit times and exit states for many seeds (angles theta) at once."""
    x, y, th = (np.asarray(a, dtype=float) for a in (x, y, th))
    if domain.is_euclidean:
        vx, vy = np.cos(th), np.sin(th)
        tau = euclidean_exit_time(domain.radius, x, y, vx, vy, sign)
        return tau, np.stack([x + sign * tau * vx, y + sign * tau * vy, th], axis=1)
    step = domain.default_step if step is None else step
    _, tau, ex = _march(domain, x, y, th, sign * step, _trap_limit(domain))
    return tau, ex


def _check_phase_point(domain, x, v):
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if not domain.contains(x[0], x[1]):
        raise OutOfDomainError(f"point {tuple(x)} lies outside the disk of radius {domain.radius}")
    speed = float(domain.c(x[0], x[1]) * np.hypot(v[0], v[1]))
    if abs(speed - 1.0) > 1e-10:
        raise ValueError(f"direction has metric length {speed}, expected 1")
    return x, v


def unit_direction(domain, x, theta) -> np.ndarray:
    c = float(domain.c(x[0], x[1]))
    return np.array([math.cos(theta), math.sin(theta)]) / c


def exit_time(domain: Domain, x, v, sign: str = "+", step: float | None = None) -> float:
    """Forward (``+``) or backward (``-``) exit time of the phase point (x, v)."""
    x, v = _check_phase_point(domain, x, v)
    sgn = 1.0 if sign == "+" else -1.0
    if sign not in ("+", "-"):
        raise ValueError("sign must be '+' or '-'")
    if domain.is_euclidean:
        return float(euclidean_exit_time(domain.radius, x[0], x[1], v[0], v[1], sgn))
    th = math.atan2(v[1], v[0])
    tau, _ = batch_exit(domain, x[:1], x[1:], np.array([th]), sgn, step)
    return float(tau[0])


def _integrate(domain, x, y, th, t, step):
    n = max(1, int(math.ceil(abs(t) / step)))
    h = t / n
    amp, w, cx, cy = domain.conformal.kernel_params
    from ._kernels._fallback import _rk4

    for _ in range(n):
        x, y, th = _rk4(x, y, th, h, amp, w * w, cx, cy)
    return x, y, th


def flow(domain: Domain, x, v, t: float, step: float | None = None) -> PhasePoint:
    """Geodesic flow phi_t(x, v) for |t| inside the exit time."""
    x, v = _check_phase_point(domain, x, v)
    if t == 0:
        return PhasePoint(x.copy(), v.copy())
    limit = exit_time(domain, x, v, "+" if t > 0 else "-", step)
    tol = 1e-9 * domain.radius
    if abs(t) > limit + tol:
        raise EscapedDomainError(f"flow time {t} exceeds exit time {limit}")
    if domain.is_euclidean:
        return PhasePoint(x + t * v, v.copy())
    step = domain.default_step if step is None else step
    th = math.atan2(v[1], v[0])
    nx, ny, nth = _integrate(domain, x[0], x[1], th, t, step)
    xn = np.array([float(nx), float(ny)])
    return PhasePoint(xn, unit_direction(domain, xn, float(nth)))


def trace(domain: Domain, x, v, step: float | None = None) -> GeodesicTrace:
    """Forward geodesic from (x, v) to the boundary, sampled at every step."""
    x, v = _check_phase_point(domain, x, v)
    step = domain.default_step if step is None else step
    tau_plus = exit_time(domain, x, v, "+", step)
    tau_minus = exit_time(domain, x, v, "-", step)
    n = max(1, int(math.ceil(tau_plus / step)))
    s = np.linspace(0.0, tau_plus, n + 1)
    if domain.is_euclidean:
        xs = x[None, :] + s[:, None] * v[None, :]
        vs = np.repeat(v[None, :], n + 1, axis=0)
    else:
        th = math.atan2(v[1], v[0])
        amp, w, cx, cy = domain.conformal.kernel_params
        from ._kernels._fallback import _rk4

        pts = [(x[0], x[1], th)]
        cur = pts[0]
        h = tau_plus / n
        for _ in range(n):
            cur = tuple(float(c) for c in _rk4(*cur, h, amp, w * w, cx, cy))
            pts.append(cur)
        arr = np.array(pts)
        xs = arr[:, :2]
        c = domain.c(xs[:, 0], xs[:, 1])
        vs = np.stack([np.cos(arr[:, 2]), np.sin(arr[:, 2])], axis=1) / c[:, None]
    return GeodesicTrace(s, xs, vs, tau_plus, tau_minus)


def exit_time_flow_identity_check(domain: Domain, samples, n_times: int = 6,
                                  step: float | None = None) -> float:
    """max |tau_+(phi_t(x,v)) - (tau_+(x,v) - t)| over samples and a t-grid."""
    worst = 0.0
    for x, v in samples:
        tp = exit_time(domain, x, v, "+", step)
        for t in np.linspace(0.0, 0.9 * tp, n_times):
            p = flow(domain, x, v, float(t), step)
            worst = max(worst, abs(exit_time(domain, p.x, p.v, "+", step) - (tp - t)))
    return worst


def boundary_normal_product(domain: Domain, x, y, th):
    """<n(x), v>_g for boundary points with velocity angle th (v g-unit)."""
    return (np.cos(th) * x + np.sin(th) * y) / domain.radius


def classify_boundary(domain: Domain, x, v) -> str:
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if abs(np.hypot(x[0], x[1]) - domain.radius) > 1e-8 * domain.radius:
        raise NotOnBoundaryError(f"point {tuple(x)} is not on the boundary")
    c = float(domain.c(x[0], x[1]))
    dot = c * float(x @ v) / domain.radius
    if abs(dot) < TANGENT_BAND:
        return "tangential"
    return "outgoing" if dot > 0 else "incoming"


def _sample_diameter(domain: Domain) -> float:
    R = domain.radius
    radii = np.linspace(0.0, R, 9)
    alphas = np.linspace(0.0, 2 * np.pi, 16, endpoint=False)
    thetas = np.linspace(0.0, 2 * np.pi, 32, endpoint=False)
    rr, aa, tt = np.meshgrid(radii, alphas, thetas, indexing="ij")
    x = (rr * np.cos(aa)).ravel()
    y = (rr * np.sin(aa)).ravel()
    tau, _ = batch_exit(domain, x, y, tt.ravel(), 1.0, step=0.01 * R)
    return float(tau.max())


DEFAULT_CONFORMAL = ConformalFactor("gaussian", 0.1, 1.0)


def make_domain(kind: str = EUCLIDEAN, R: float = 1.0,
                c: ConformalFactor | None = None) -> Domain:
    if R <= 0:
        raise InvalidDomainError(f"radius must be positive, got {R}")
    if kind not in (EUCLIDEAN, CONFORMAL):
        raise InvalidDomainError(f"unknown domain kind {kind!r}")
    if kind == EUCLIDEAN:
        if c is not None and (c.kind != "constant"):
            raise InvalidDomainError("a Euclidean disk has conformal factor 1")
        return Domain(EUCLIDEAN, float(R), ConformalFactor(), 2.0 * R)
    c = DEFAULT_CONFORMAL if c is None else c
    r = np.linspace(0.0, R, 41)
    a = np.linspace(0.0, 2 * np.pi, 64, endpoint=False)
    rr, aa = np.meshgrid(r, a)
    vals = c(rr * np.cos(aa), rr * np.sin(aa))
    if not np.all(vals > 0):
        raise InvalidDomainError(f"conformal factor has non-positive samples (min {vals.min():.3g})")
    provisional = Domain(CONFORMAL, float(R), c, 0.0)
    return Domain(CONFORMAL, float(R), c, 1.05 * _sample_diameter(provisional))
