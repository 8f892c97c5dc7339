"""Phase-space grids, sampled fields and boundary traces.

Spatial nodes are a Cartesian lattice of spacing ``dx`` clipped to the disk,
followed by a ring of ``n_ring`` points on the boundary circle.  Ring nodes
carry solution values (they are where the measurement lives), close the
interpolation stencil in cells cut by the boundary, and have zero volume
weight.

Flat layout: a static field has shape ``(n_nodes, n_v)``, a time-dependent
field ``(n_t + 1, n_nodes, n_v)``; the flat index of (node, direction) is
``node * n_v + j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import GridMismatchError
from .geometry import TANGENT_BAND, Domain, direction_quadrature


class PhaseGrid:
    def __init__(self, domain: Domain, dx: float, n_v: int, dt: float, T: float,
                 n_ring: int | None = None, enforce_horizon: bool = True):
        if dx <= 0 or dt <= 0:
            raise ValueError("grid spacings must be positive")
        if dt > dx * (1 + 1e-12):
            raise ValueError(f"time step {dt} exceeds spatial step {dx}")
        n_t = int(round(T / dt))
        if abs(n_t * dt - T) > 1e-9 * T:
            raise ValueError(f"T={T} is not a multiple of dt={dt}")
        if enforce_horizon and T < 2.0 * domain.diameter * (1 - 1e-12):
            raise ValueError(f"T={T} violates T >= 2*D_metric = {2 * domain.diameter:.6g}")
        self.domain = domain
        self.dx = float(dx)
        self.dt = float(dt)
        self.n_t = n_t
        self.T = n_t * self.dt
        self.quad = direction_quadrature(n_v)
        self.n_v = n_v
        R = domain.radius
        half = int(math.floor(R / dx + 1e-9))
        self.coords = dx * np.arange(-half, half + 1)
        self.n_side = self.coords.size
        X, Y = np.meshgrid(self.coords, self.coords, indexing="ij")
        self.mask = np.hypot(X, Y) <= R * (1 + 1e-12)
        self.node_index = np.full(self.mask.shape, -1, dtype=np.intp)
        self.n_lattice = int(self.mask.sum())
        self.node_index[self.mask] = np.arange(self.n_lattice)
        if n_ring is None:
            n_ring = 8 * int(math.ceil(2 * math.pi * R / (8 * dx)))
        self.n_ring = int(n_ring)
        self.ring_alpha = 2 * np.pi * np.arange(self.n_ring) / self.n_ring
        ring = R * np.stack([np.cos(self.ring_alpha), np.sin(self.ring_alpha)], axis=1)
        self.points = np.concatenate([np.stack([X[self.mask], Y[self.mask]], axis=1), ring])
        self.n_nodes = self.points.shape[0]
        self.ring_slice = slice(self.n_lattice, self.n_nodes)
        self.M = self.n_nodes * n_v

    # -- descriptors -----------------------------------------------------------
    def descriptor(self) -> dict:
        d = self.domain
        return {
            "kind": d.kind, "R": d.radius, "conformal": d.conformal.kind,
            "amplitude": d.conformal.amplitude, "width": d.conformal.width,
            "dx": self.dx, "n_v": self.n_v, "dt": self.dt, "n_t": self.n_t,
            "n_ring": self.n_ring, "n_nodes": self.n_nodes,
        }

    def same_as(self, other: "PhaseGrid") -> bool:
        return self.descriptor() == other.descriptor()

    def check(self, other: "PhaseGrid") -> None:
        if other is not self and not self.same_as(other):
            raise GridMismatchError("fields live on different phase grids")

    def refined(self) -> "PhaseGrid":
        """Grid with dx, dt halved and the boundary ring doubled (same directions)."""
        return PhaseGrid(self.domain, self.dx / 2, self.n_v, self.dt / 2, self.T,
                         n_ring=2 * self.n_ring)

    # -- geometry helpers ------------------------------------------------------
    @cached_property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_t + 1)

    @cached_property
    def c_nodes(self) -> np.ndarray:
        return np.asarray(self.domain.c(self.points[:, 0], self.points[:, 1]), dtype=float)

    @cached_property
    def node_weights(self) -> np.ndarray:
        """Volume quadrature weight of each spatial node (Riemannian area)."""
        w = self.dx**2 * self.c_nodes**2
        w[self.ring_slice] = 0.0
        return w

    @cached_property
    def phase_weights(self) -> np.ndarray:
        """Weights for integrals over S(Omega), shape (n_nodes, n_v)."""
        return self.node_weights[:, None] * self.quad.weights[None, :]

    @cached_property
    def time_weights(self) -> np.ndarray:
        w = np.full(self.n_t + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w

    @cached_property
    def phase_x(self) -> np.ndarray:
        return np.repeat(self.points[:, 0], self.n_v)

    @cached_property
    def phase_y(self) -> np.ndarray:
        return np.repeat(self.points[:, 1], self.n_v)

    @cached_property
    def phase_theta(self) -> np.ndarray:
        return np.tile(self.quad.angles, self.n_nodes)

    @cached_property
    def ring_normal_product(self) -> np.ndarray:
        """<n, v>_g on ring nodes, shape (n_ring, n_v)."""
        return np.cos(self.quad.angles[None, :] - self.ring_alpha[:, None])

    @cached_property
    def ring_arc(self) -> np.ndarray:
        """Boundary length element per ring node, dlambda_g = c R dalpha."""
        return self.c_nodes[self.ring_slice] * 2 * np.pi * self.domain.radius / self.n_ring

    @cached_property
    def outgoing_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        i, j = np.nonzero(self.ring_normal_product > TANGENT_BAND)
        return i, j

    @cached_property
    def incoming_mask(self) -> np.ndarray:
        return self.ring_normal_product < -TANGENT_BAND

    @cached_property
    def closed_incoming_mask(self) -> np.ndarray:
        # incoming plus grazing pairs; grazing exits read their data from here
        return self.ring_normal_product <= TANGENT_BAND

    # -- interpolation ---------------------------------------------------------
    @cached_property
    def triangulation(self):
        from scipy.spatial import Delaunay

        return Delaunay(self.points)

    def lattice_stencil(self, px, py):
        """Monotone spatial interpolation stencil: node indices and weights (P, 4).

        Bilinear on lattice cells lying wholly inside the disk; linear on a
        Delaunay triangulation of lattice and ring nodes in cells cut by the
        boundary; linear in boundary angle between ring nodes for points in
        the thin sliver between the inscribed polygon and the circle.  Weights
        are non-negative and sum to one, so constants are reproduced exactly.
        """
        px = np.atleast_1d(np.asarray(px, dtype=float))
        py = np.atleast_1d(np.asarray(py, dtype=float))
        shape = px.shape
        px, py = px.ravel(), py.ravel()
        x0 = self.coords[0]
        fx = (px - x0) / self.dx
        fy = (py - x0) / self.dx
        i = np.clip(np.floor(fx).astype(np.intp), 0, self.n_side - 2)
        j = np.clip(np.floor(fy).astype(np.intp), 0, self.n_side - 2)
        a = np.clip(fx - i, 0.0, 1.0)
        b = np.clip(fy - j, 0.0, 1.0)
        ii = np.stack([i, i + 1, i, i + 1], axis=-1)
        jj = np.stack([j, j, j + 1, j + 1], axis=-1)
        w = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=-1)
        idx = self.node_index[ii, jj]
        cut = np.any(idx < 0, axis=1)
        if cut.any():
            sel = np.flatnonzero(cut)
            ci, cw = self._boundary_stencil(px[sel], py[sel])
            idx[sel] = ci
            w[sel] = cw
        return idx.reshape(shape + (4,)), w.reshape(shape + (4,))

    def _boundary_stencil(self, px, py):
        tri = self.triangulation
        pts = np.stack([px, py], axis=1)
        simplex = tri.find_simplex(pts)
        idx = np.zeros((px.size, 4), dtype=np.intp)
        w = np.zeros((px.size, 4))
        inside = simplex >= 0
        if inside.any():
            s = simplex[inside]
            T = tri.transform[s]
            bary = np.einsum("nij,nj->ni", T[:, :2], pts[inside] - T[:, 2])
            bary = np.concatenate([bary, 1 - bary.sum(axis=1, keepdims=True)], axis=1)
            bary = np.clip(bary, 0.0, None)
            bary /= bary.sum(axis=1, keepdims=True)
            idx[inside, :3] = tri.simplices[s]
            w[inside, :3] = bary
        out = ~inside
        if out.any():
            if np.any(np.hypot(px[out], py[out]) > self.domain.radius * (1 + 1e-9)):
                raise ValueError("interpolation point outside the disk")
            fa = np.mod(np.arctan2(py[out], px[out]), 2 * np.pi) / (2 * np.pi / self.n_ring)
            i0 = np.floor(fa).astype(np.intp) % self.n_ring
            frac = fa - np.floor(fa)
            idx[out, 0] = self.n_lattice + i0
            idx[out, 1] = self.n_lattice + (i0 + 1) % self.n_ring
            w[out, 0] = 1 - frac
            w[out, 1] = frac
        return idx, w

    def phase_stencil(self, px, py, direction):
        """Flat-index stencil for field values at points and directions.

        ``direction`` is an integer direction index array (Euclidean case:
        nearest node, characteristics keep v) or a float angle array
        (conformal case: linear in theta between neighbouring nodes).
        """
        nodes, w = self.lattice_stencil(px, py)
        direction = np.asarray(direction)
        if np.issubdtype(direction.dtype, np.integer):
            return nodes * self.n_v + direction[..., None], w
        dth = 2 * np.pi / self.n_v
        f = np.mod(direction, 2 * np.pi) / dth
        j0 = np.floor(f).astype(np.intp) % self.n_v
        b = (f - np.floor(f))[..., None]
        j1 = (j0 + 1) % self.n_v
        idx = np.concatenate([nodes * self.n_v + j0[..., None], nodes * self.n_v + j1[..., None]], axis=-1)
        ww = np.concatenate([w * (1 - b), w * b], axis=-1)
        return idx, ww

    # -- sampling ----------------------------------------------------------------
    def sample_static(self, func) -> "Field":
        """Field from ``func(x, y, theta)`` evaluated on all phase nodes."""
        vals = func(self.phase_x, self.phase_y, self.phase_theta)
        vals = np.broadcast_to(np.asarray(vals, dtype=float), (self.M,))
        return Field(self, vals.reshape(self.n_nodes, self.n_v).copy())

    def sample_dynamic(self, func) -> "Field":
        t = self.times[:, None]
        vals = func(t, self.phase_x[None, :], self.phase_y[None, :], self.phase_theta[None, :])
        vals = np.broadcast_to(np.asarray(vals, dtype=float), (self.n_t + 1, self.M))
        return Field(self, vals.reshape(self.n_t + 1, self.n_nodes, self.n_v).copy())

    def zeros(self, static=False) -> "Field":
        shape = (self.n_nodes, self.n_v) if static else (self.n_t + 1, self.n_nodes, self.n_v)
        return Field(self, np.zeros(shape))

    def constant(self, value, static=False) -> "Field":
        f = self.zeros(static)
        f.values[...] = value
        return f


@dataclass
class Field:
    grid: PhaseGrid
    values: np.ndarray

    def __post_init__(self):
        g = self.grid
        if self.values.shape not in ((g.n_nodes, g.n_v), (g.n_t + 1, g.n_nodes, g.n_v)):
            raise GridMismatchError(f"field shape {self.values.shape} does not match the grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    @property
    def static(self) -> bool:
        return self.values.ndim == 2

    @property
    def flat(self) -> np.ndarray:
        if self.static:
            return self.values.reshape(self.grid.M)
        return self.values.reshape(self.grid.n_t + 1, self.grid.M)

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy())

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max()) if self.values.size else 0.0

    def l2_norm(self) -> float:
        g = self.grid
        sq = self.values**2 * g.phase_weights
        if self.static:
            return float(math.sqrt(sq.sum()))
        return float(math.sqrt((sq.sum(axis=(1, 2)) * g.time_weights).sum()))

    def at_time(self, n: int) -> "Field":
        return Field(self.grid, self.values[n].copy())

    def __add__(self, other):
        return Field(self.grid, self.values + _vals(self.grid, other))

    def __sub__(self, other):
        return Field(self.grid, self.values - _vals(self.grid, other))

    def __mul__(self, other):
        return Field(self.grid, self.values * _vals(self.grid, other))

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.grid, -self.values)


def _vals(grid, other):
    if isinstance(other, Field):
        grid.check(other.grid)
        return other.values
    return other


def as_values(grid: PhaseGrid, data, static: bool) -> np.ndarray:
    """Coerce None / scalar / Field / array / callable into a flat value array.

    Callables take ``(x, y, theta)`` when static and ``(t, x, y, theta)`` otherwise.
    """
    shape = (grid.M,) if static else (grid.n_t + 1, grid.M)
    if data is None:
        return np.zeros(shape)
    if callable(data):
        data = grid.sample_static(data) if static else grid.sample_dynamic(data)
    if isinstance(data, Field):
        grid.check(data.grid)
        if data.static and not static:
            return np.broadcast_to(data.flat, shape).copy()
        if data.static != static:
            raise GridMismatchError("expected a static field" if static else "expected a time-dependent field")
        return data.flat.copy()
    arr = np.asarray(data, dtype=float)
    if arr.ndim == 0:
        return np.full(shape, float(arr))
    if static and arr.size == grid.M:
        arr = arr.reshape(-1)
    elif not static and arr.ndim == 3:
        arr = arr.reshape(arr.shape[0], -1)
    try:
        return np.broadcast_to(arr, shape).copy()
    except ValueError as exc:
        raise GridMismatchError(f"data of shape {arr.shape} incompatible with grid") from exc


@dataclass
class IncomingData:
    """Incoming boundary data on ring nodes: values (n_t + 1, n_ring, n_v).

    Only entries with <n, v> <= 0 are read; grazing pairs serve tangential exits.
    """

    grid: PhaseGrid
    values: np.ndarray

    def __post_init__(self):
        g = self.grid
        if self.values.shape != (g.n_t + 1, g.n_ring, g.n_v):
            raise GridMismatchError("incoming data shape does not match the grid")
        if not np.all(np.isfinite(self.values[:, g.closed_incoming_mask])):
            raise ValueError("incoming data contains non-finite values")

    @classmethod
    def constant(cls, grid: PhaseGrid, value: float) -> "IncomingData":
        return cls(grid, np.full((grid.n_t + 1, grid.n_ring, grid.n_v), float(value)))

    @classmethod
    def from_function(cls, grid: PhaseGrid, func) -> "IncomingData":
        R = grid.domain.radius
        x = R * np.cos(grid.ring_alpha)[None, :, None]
        y = R * np.sin(grid.ring_alpha)[None, :, None]
        th = grid.quad.angles[None, None, :]
        t = grid.times[:, None, None]
        vals = np.broadcast_to(func(t, x, y, th), (grid.n_t + 1, grid.n_ring, grid.n_v))
        return cls(grid, np.array(vals, dtype=float))

    def sup_norm(self) -> float:
        sel = self.values[:, self.grid.incoming_mask]
        return float(np.abs(sel).max()) if sel.size else 0.0

    def interpolate(self, t, alpha, direction):
        """Linear in time and boundary angle (and theta in the conformal case)."""
        g = self.grid
        t = np.asarray(t, dtype=float)
        ft = np.clip(t / g.dt, 0.0, g.n_t)
        n0 = np.minimum(np.floor(ft).astype(np.intp), g.n_t - 1)
        a_t = ft - n0
        fa = np.mod(alpha, 2 * np.pi) / (2 * np.pi / g.n_ring)
        i0 = np.floor(fa).astype(np.intp) % g.n_ring
        a_a = fa - np.floor(fa)
        i1 = (i0 + 1) % g.n_ring
        direction = np.asarray(direction)
        if np.issubdtype(direction.dtype, np.integer):
            dirs = [(direction, np.ones_like(a_a))]
        else:
            fd = np.mod(direction, 2 * np.pi) / (2 * np.pi / g.n_v)
            j0 = np.floor(fd).astype(np.intp) % g.n_v
            b = fd - np.floor(fd)
            dirs = [(j0, 1 - b), ((j0 + 1) % g.n_v, b)]
        num = np.zeros(np.broadcast(t, alpha).shape)
        den = np.zeros_like(num)
        inc = g.closed_incoming_mask
        for j, wj in dirs:
            for i, wi in ((i0, 1 - a_a), (i1, a_a)):
                ok = inc[i, j]
                for n, wn in ((n0, 1 - a_t), (n0 + 1, a_t)):
                    w = wj * wi * wn * ok
                    num += w * self.values[n, i, j]
                    den += w
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


@dataclass
class BoundaryTrace:
    """Values on outgoing ring pairs at every time level, with <n,v> attached."""

    grid: PhaseGrid
    values: np.ndarray

    def __post_init__(self):
        g = self.grid
        if self.values.shape != (g.n_t + 1, self.ring_index.size):
            raise GridMismatchError("trace shape does not match the grid")

    @property
    def ring_index(self) -> np.ndarray:
        return self.grid.outgoing_pairs[0]

    @property
    def dir_index(self) -> np.ndarray:
        return self.grid.outgoing_pairs[1]

    @property
    def measure_factor(self) -> np.ndarray:
        return self.grid.ring_normal_product[self.ring_index, self.dir_index]

    def quadrature_weights(self) -> np.ndarray:
        """Weights for the L^2(d xi dt) norm, shape (n_t + 1, n_pairs)."""
        g = self.grid
        space = g.ring_arc[self.ring_index] * g.quad.weights[self.dir_index] * self.measure_factor
        return g.time_weights[:, None] * space[None, :]

    def l2_norm(self) -> float:
        return float(math.sqrt((self.quadrature_weights() * self.values**2).sum()))

    def weighted_flat(self) -> np.ndarray:
        return (np.sqrt(self.quadrature_weights()) * self.values).ravel()

    def __sub__(self, other: "BoundaryTrace") -> "BoundaryTrace":
        self.grid.check(other.grid)
        return BoundaryTrace(self.grid, self.values - other.values)

    def scaled(self, factor: float) -> "BoundaryTrace":
        return BoundaryTrace(self.grid, self.values * factor)

    def restrict_to(self, coarse: PhaseGrid) -> "BoundaryTrace":
        """Subsample a trace from a refined grid onto a coarser one."""
        g = self.grid
        tstep = int(round(coarse.dt / g.dt))
        rstep = g.n_ring // coarse.n_ring
        if (g.n_ring != rstep * coarse.n_ring or g.n_v != coarse.n_v
                or abs(tstep * g.dt - coarse.dt) > 1e-12 or abs(g.T - coarse.T) > 1e-9):
            raise GridMismatchError("trace grid is not a refinement of the target grid")
        full = np.zeros((g.n_t + 1, g.n_ring, g.n_v))
        full[:, self.ring_index, self.dir_index] = self.values
        sub = full[::tstep, ::rstep, :]
        ci, cj = coarse.outgoing_pairs
        return BoundaryTrace(coarse, sub[:, ci, cj].copy())


def time_derivative_trace(trace: BoundaryTrace) -> BoundaryTrace:
    """Second-order finite-difference time derivative of a trace."""
    if trace.values.shape[0] < 3:
        raise ValueError("time derivative needs at least 3 time levels")
    return BoundaryTrace(trace.grid, np.gradient(trace.values, trace.grid.dt, axis=0, edge_order=2))


def time_derivative(field: Field) -> Field:
    if field.static:
        raise ValueError("static field has no time derivative")
    if field.values.shape[0] < 3:
        raise ValueError("time derivative needs at least 3 time levels")
    return Field(field.grid, np.gradient(field.values, field.grid.dt, axis=0, edge_order=2))
