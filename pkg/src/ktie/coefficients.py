"""Absorption, scattering and nonlinearity coefficients on a phase grid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CoefficientError
from .grid import Field, PhaseGrid

# Named N0 profiles: value function and Taylor derivatives at 0.
N0_FAMILY = {
    "square": (lambda z: z * z, {2: 2.0}, 2),
    "cube": (lambda z: z * z * z, {3: 6.0}, 3),
    "square_cubic": (lambda z: z * z + z * z * z / 3.0, {2: 2.0, 3: 2.0}, 2),
}


@dataclass
class TaylorN:
    """N(x, v, z) = sum_k q_k(x, v) z^k / k!, k = 2..K_max."""

    q: dict[int, np.ndarray]

    def __post_init__(self):
        if any(k < 2 for k in self.q):
            raise CoefficientError("Taylor nonlinearity starts at order 2")

    @property
    def max_order(self) -> int:
        return max(self.q, default=1)

    def derivatives(self) -> dict[int, np.ndarray]:
        return dict(self.q)

    def __call__(self, z):
        out = np.zeros_like(z)
        for k, qk in sorted(self.q.items()):
            out += qk * z**k / math.factorial(k)
        return out


@dataclass
class ProductN:
    """N(x, v, z) = q(x, v) N0(z) for a named N0 with growth exponent ell."""

    q: np.ndarray
    n0: str = "square"

    def __post_init__(self):
        if self.n0 not in N0_FAMILY:
            raise CoefficientError(f"unknown N0 profile {self.n0!r}; known: {sorted(N0_FAMILY)}")

    @property
    def ell(self) -> int:
        return N0_FAMILY[self.n0][2]

    @property
    def max_order(self) -> int:
        return max(N0_FAMILY[self.n0][1])

    def derivatives(self) -> dict[int, np.ndarray]:
        return {k: d * self.q for k, d in N0_FAMILY[self.n0][1].items()}

    def growth_constant(self, samples: int = 201) -> float:
        """Smallest C1 with |N0(z)| <= C1 |z|^ell on sampled z in [-1, 1]."""
        z = np.linspace(-1.0, 1.0, samples)
        z = z[z != 0]
        return float(np.max(np.abs(N0_FAMILY[self.n0][0](z)) / np.abs(z) ** self.ell))

    def __call__(self, z):
        return self.q * N0_FAMILY[self.n0][0](z)


@dataclass
class CoefficientSet:
    """sigma (x, v), mu (x, v', v) and an optional nonlinearity, all flat on a grid.

    ``sigma`` has shape (n_nodes, n_v); ``mu`` has shape (n_nodes or 1, n_v, n_v)
    with axis 1 the incoming direction v' and axis 2 the outgoing direction v.
    """

    grid: PhaseGrid
    sigma: np.ndarray
    mu: np.ndarray | None = None
    mu_tilde: np.ndarray | None = None
    p: np.ndarray | None = None
    nonlinearity: TaylorN | ProductN | None = None
    meta: dict = field(default_factory=dict)

    @property
    def has_scattering(self) -> bool:
        return self.mu is not None and bool(np.any(self.mu != 0))

    @property
    def sigma_max(self) -> float:
        return float(self.sigma.max())

    def with_(self, **changes) -> "CoefficientSet":
        data = dict(grid=self.grid, sigma=self.sigma, mu=self.mu, mu_tilde=self.mu_tilde,
                    p=self.p, nonlinearity=self.nonlinearity, meta=dict(self.meta))
        data.update(changes)
        if "mu_tilde" in changes or "p" in changes:
            if data["mu_tilde"] is not None and data["p"] is not None:
                data["mu"] = data["mu_tilde"][:, None, :] * data["p"]
        return CoefficientSet(**data)

    def check(self, tol: float = 1e-12) -> dict:
        """Verify the admissibility conditions; return the measured constants."""
        problems = []
        g = self.grid
        if self.sigma.shape != (g.n_nodes, g.n_v):
            raise CoefficientError(f"sigma shape {self.sigma.shape} does not match the grid")
        if self.sigma.min() < -tol:
            problems.append(f"sigma is negative somewhere (min {self.sigma.min():.3g})")
        report = {"sigma_max": self.sigma_max}
        if self.mu is not None:
            if self.mu.ndim != 3 or self.mu.shape[1:] != (g.n_v, g.n_v) or self.mu.shape[0] not in (1, g.n_nodes):
                raise CoefficientError(f"mu shape {self.mu.shape} does not match the grid")
            if self.mu.min() < -tol:
                problems.append(f"mu is negative somewhere (min {self.mu.min():.3g})")
            w = g.quad.weights
            into = np.einsum("nkj,k->nj", self.mu, w)   # integral over v'
            out_of = np.einsum("nkj,j->nk", self.mu, w)  # integral over v
            excess = max(float((into - self.sigma).max()), float((out_of - self.sigma).max()))
            report["mu_max"] = float(self.mu.max())
            report["subcritical_margin"] = -excess
            if excess > tol:
                problems.append(f"scattering is not subcritical: direction integral of mu exceeds sigma by {excess:.3g}")
            if not g.domain.is_euclidean and self.has_scattering:
                problems.append("scattering is not supported on the conformal disk: the "
                                "Riemannian transport equation used there has no collision term")
        if isinstance(self.nonlinearity, ProductN):
            report["N0_C1"] = self.nonlinearity.growth_constant()
        if problems:
            raise CoefficientError("; ".join(problems))
        return report


def _as_static(grid: PhaseGrid, value) -> np.ndarray:
    if isinstance(value, Field):
        grid.check(value.grid)
        if not value.static:
            raise CoefficientError("coefficients must be time-independent")
        return value.values.copy()
    if callable(value):
        return grid.sample_static(value).values
    arr = np.asarray(value, dtype=float)
    return np.broadcast_to(arr, (grid.n_nodes, grid.n_v)).copy()


def make_coefficients(grid: PhaseGrid, sigma, mu=None, mu_tilde=None, p=None,
                      nonlinearity=None, check: bool = True) -> CoefficientSet:
    """Build a CoefficientSet from scalars, Fields or callables f(x, y, theta).

    ``mu`` may be a scalar, an array broadcastable to (n_nodes, n_v, n_v), or a
    callable ``mu(x, y, theta_in, theta_out)``.  A separable kernel is given by
    ``mu_tilde`` (static) and ``p``.
    """
    sig = _as_static(grid, sigma)
    mu_arr = None
    mt = pp = None
    if mu_tilde is not None or p is not None:
        if mu_tilde is None or p is None:
            raise CoefficientError("a separable kernel needs both mu_tilde and p")
        mt = _as_static(grid, mu_tilde)
        pp = _kernel_array(grid, p)
        mu_arr = mt[:, None, :] * pp
    elif mu is not None:
        mu_arr = _kernel_array(grid, mu)
    coeffs = CoefficientSet(grid, sig, mu_arr, mt, pp, nonlinearity)
    if check:
        coeffs.check()
    return coeffs


def _kernel_array(grid: PhaseGrid, mu) -> np.ndarray:
    if callable(mu):
        th = grid.quad.angles
        x = grid.points[:, 0][:, None, None]
        y = grid.points[:, 1][:, None, None]
        vals = mu(x, y, th[None, :, None], th[None, None, :])
        return np.broadcast_to(np.asarray(vals, dtype=float), (grid.n_nodes, grid.n_v, grid.n_v)).copy()
    arr = np.asarray(mu, dtype=float)
    if arr.ndim == 0:
        return np.full((1, grid.n_v, grid.n_v), float(arr))
    if arr.ndim == 2:
        return arr[None].copy()
    return arr.copy()


def taylor_from_fields(grid: PhaseGrid, q: dict) -> TaylorN:
    return TaylorN({int(k): _as_static(grid, v).reshape(grid.M) for k, v in q.items()})


def product_from_field(grid: PhaseGrid, q, n0: str = "square") -> ProductN:
    return ProductN(_as_static(grid, q).reshape(grid.M), n0)
