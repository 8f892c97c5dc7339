"""Higher-order linearization in the data amplitude.

For data ``eps * h`` the solution is expanded as ``f(eps) = sum_k eps^k F_k / k!``
with ``F_0 = 0``.  Jets store the derivatives ``F_k`` themselves, so every
product carries explicit binomial factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSet, ProductN, TaylorN
from .errors import JetOrderError, SmallnessGateError
from .grid import Field, PhaseGrid, as_values
from .transport import SolveReport, _operator, solve_nonlinear


class EpsJet:
    """Truncated eps-series with zero constant term; ``jet[k]`` is the k-th derivative."""

    def __init__(self, coeffs):
        coeffs = list(coeffs)
        if not coeffs:
            raise JetOrderError("a jet needs at least one order")
        self._c = coeffs

    @property
    def order(self) -> int:
        return len(self._c)

    def __getitem__(self, k: int):
        if k < 1 or k > self.order:
            raise JetOrderError(f"jet of order {self.order} has no derivative of order {k}")
        return self._c[k - 1]

    def truncate(self, m: int) -> "EpsJet":
        if m > self.order:
            raise JetOrderError(f"cannot truncate a jet of order {self.order} to {m}")
        return EpsJet(self._c[:m])

    def __mul__(self, other: "EpsJet") -> "EpsJet":
        return jet_product(self, other, min(self.order, other.order))


def jet_product(a: EpsJet, b: EpsJet, order: int) -> EpsJet:
    """Derivatives 1..order of the product of two zero-constant series.

    Order ``n`` reads only ``a[i], b[n - i]`` for ``1 <= i <= n - 1``, so the
    result may go one order beyond the inputs.
    """
    zero = np.zeros_like(np.asarray(a[1] * b[1], dtype=float))
    out = []
    for n in range(1, order + 1):
        acc = zero.copy()
        for i in range(1, n):
            acc = acc + math.comb(n, i) * a[i] * b[n - i]
        out.append(acc)
    return EpsJet(out)


def jet_power(jet: EpsJet, k: int, order: int | None = None) -> EpsJet:
    """Derivatives 1..order of ``f^k`` where ``f`` is the series of ``jet``.

    ``order`` defaults to the jet order.  Because ``f^k`` vanishes to order
    ``k``, the order-m derivative for ``k >= 2`` needs only orders < m of the
    jet, and ``order = jet.order + 1`` is allowed in that case.
    """
    if k < 1:
        raise ValueError("power must be at least 1")
    order = jet.order if order is None else order
    if k == 1:
        return jet.truncate(order)
    if order > jet.order + 1:
        raise JetOrderError(f"order {order} needs jet orders the jet of order {jet.order} lacks")
    acc = jet
    for _ in range(k - 1):
        acc = jet_product(acc, jet, order)
    return acc


def remainder(q: dict, jet: EpsJet, m: int):
    """R_m: order-m derivative of sum_{k=2}^{m-1} q_k f^k / k! at eps = 0.

    Only jet orders up to m - 1 are visible; reading order m is an error.
    """
    if m < 2:
        raise ValueError("remainders start at order 2")
    if jet.order < m - 1:
        raise JetOrderError(f"remainder of order {m} needs jet orders 1..{m - 1}, have {jet.order}")
    visible = jet.truncate(m - 1)
    total = np.zeros_like(np.asarray(visible[1], dtype=float))
    for k in range(2, m):
        qk = q.get(k)
        if qk is None:
            continue
        if not np.any(qk):
            continue
        total = total + qk * jet_power(visible, k, m)[m] / math.factorial(k)
    return total


def nonlinearity_derivatives(coeffs: CoefficientSet) -> dict:
    N = coeffs.nonlinearity
    if N is None:
        return {}
    if isinstance(N, (TaylorN, ProductN)):
        return N.derivatives()
    raise TypeError(f"unsupported nonlinearity {type(N).__name__}")


@dataclass
class HierarchySolution:
    """Jets F_1..F_m with the source actually fed to the solver at each order."""

    grid: PhaseGrid
    jets: EpsJet
    sources: dict[int, np.ndarray]
    reports: dict[int, SolveReport] = field(default_factory=dict)

    def field(self, k: int) -> Field:
        g = self.grid
        return Field(g, self.jets[k].reshape(g.n_t + 1, g.n_nodes, g.n_v))


def solve_hierarchy(coeffs_or_op, h, m: int, tol: float = 1e-12) -> HierarchySolution:
    """F_1 from initial data h, then F_k driven by -q_k F_1^k - R_k with zero data."""
    op = _operator(coeffs_or_op)
    g = op.grid
    q = nonlinearity_derivatives(op.coeffs)
    h_vals = as_values(g, h, static=True)
    F1, rep = op.solve(None, h_vals, None, tol)
    orders = [F1.flat]
    sources = {}
    reports = {1: rep}
    for k in range(2, m + 1):
        jet = EpsJet(orders)
        src = -remainder(q, jet, k)
        if k in q:
            src = src - q[k] * orders[0] ** k
        sources[k] = src
        if np.any(src):
            Fk, rep = op.solve(src, None, None, tol)
            orders.append(Fk.flat)
        else:
            rep = SolveReport(0, [], op.kappa, True)
            orders.append(np.zeros_like(orders[0]))
        reports[k] = rep
    return HierarchySolution(g, EpsJet(orders), sources, reports)


# central stencils in units of eps: offsets and weights, divided by eps^k
FD_STENCILS = {
    1: ((-1, 1), (-0.5, 0.5)),
    2: ((-1, 0, 1), (1.0, -2.0, 1.0)),
    3: ((-2, -1, 1, 2), (-0.5, 1.0, -1.0, 0.5)),
}


def fd_linearize(coeffs_or_op, h, k: int, eps_base: float, delta: float = 0.05,
                 tol: float = 1e-13, cache: dict | None = None) -> Field:
    """k-th central difference in eps of the nonlinear solution with initial data eps*h.

    ``cache`` maps amplitudes to nonlinear solutions so that stencils sharing
    nodes (across orders, and across eps values that halve) solve each once.
    """
    if k not in FD_STENCILS:
        raise ValueError("finite-difference linearization is available for k = 1, 2, 3")
    op = _operator(coeffs_or_op)
    g = op.grid
    h_vals = as_values(g, h, static=True)
    offsets, weights = FD_STENCILS[k]
    reach = max(abs(o) for o in offsets) * abs(eps_base) * float(np.abs(h_vals).max())
    if reach > delta * (1 + 1e-12):
        raise SmallnessGateError(
            f"stencil amplitude {reach:.3g} exceeds the smallness gate delta={delta:.3g}")
    acc = np.zeros((g.n_t + 1, g.M))
    for o, w in zip(offsets, weights):
        if o == 0:
            continue  # zero data gives the zero solution
        amp = o * eps_base
        key = float(f"{amp:.15g}")
        if cache is not None and key in cache:
            flat = cache[key]
        else:
            flat = solve_nonlinear(op, amp * h_vals, None, tol=tol, delta=delta)[0].flat
            if cache is not None:
                cache[key] = flat
        acc += w * flat
    acc /= eps_base**k
    return Field(g, acc.reshape(g.n_t + 1, g.n_nodes, g.n_v))


def consistency_table(coeffs_or_op, h, orders=(1, 2, 3), eps_values=(0.02, 0.01, 0.005, 0.0025),
                      delta: float = 0.05, tol: float = 1e-13):
    """Relative L2 gap between hierarchy and finite differences for each (k, eps)."""
    op = _operator(coeffs_or_op)
    hier = solve_hierarchy(op, h, max(orders), tol=tol)
    rows = []
    cache: dict = {}
    for k in orders:
        ref = hier.field(k)
        norm = ref.l2_norm()
        for eps in eps_values:
            fd = fd_linearize(op, h, k, eps, delta, tol, cache)
            err = (fd - ref).l2_norm() / norm if norm > 0 else (fd - ref).l2_norm()
            rows.append((k, eps, err))
    return rows
