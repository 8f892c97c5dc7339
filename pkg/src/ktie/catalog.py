"""Named coefficient entries referenced from config files.

A spec string is ``name`` or ``name(key=value, ...)`` with literal values,
for example ``lambda_gaussian(amplitude=0.5, x0=0.2, width=0.4)``.
"""

from __future__ import annotations

import ast
import csv
import re
from dataclasses import dataclass

import numpy as np

from .carleman import EuclideanWeight, LambdaClass
from .errors import KtieError
from .grid import PhaseGrid


class CatalogError(KtieError):
    pass


@dataclass(frozen=True)
class Spec:
    name: str
    params: tuple[tuple[str, object], ...] = ()

    @property
    def kwargs(self) -> dict:
        return dict(self.params)

    def __str__(self) -> str:
        if not self.params:
            return self.name
        return f"{self.name}(" + ", ".join(f"{k}={v!r}" for k, v in self.params) + ")"


_SPEC = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(?:\((.*)\))?\s*$", re.S)


def parse_spec(text: str) -> Spec:
    m = _SPEC.match(text)
    if not m:
        raise CatalogError(f"cannot parse coefficient spec {text!r}")
    name, body = m.group(1), m.group(2)
    params = []
    if body and body.strip():
        try:
            call = ast.parse(f"f({body})", mode="eval").body
        except SyntaxError as exc:
            raise CatalogError(f"bad arguments in {text!r}: {exc.msg}") from None
        if call.args:
            raise CatalogError(f"arguments in {text!r} must be given as key=value")
        for kw in call.keywords:
            try:
                params.append((kw.arg, ast.literal_eval(kw.value)))
            except ValueError:
                raise CatalogError(f"argument {kw.arg!r} in {text!r} is not a literal") from None
    return Spec(name, tuple(params))


# name -> (allowed keys with defaults)
STATIC_ENTRIES = {
    "none": {},
    "constant": {"value": 1.0},
    "gaussian": {"amplitude": 1.0, "x0": 0.0, "y0": 0.0, "width": 0.5, "base": 0.0},
    "lambda_profile": {"value": 1.0},
    "lambda_gaussian": {"amplitude": 1.0, "x0": 0.0, "y0": 0.0, "width": 0.5, "base": 0.0},
    "angular": {"base": 0.5, "amplitude": 0.3, "angle": 0.0},
    "bump": {"amplitude": 1.0, "x0": 0.0, "y0": 0.0, "radius": 0.5},
    "csv": {"path": ""},
}
KERNEL_ENTRIES = {
    "none": {},
    "isotropic": {"value": 0.1},
    "lambda_kernel": {"value": 0.1},
    "negative_control": {"strength": 20.0, "threshold": -0.2},
}
PROFILE_ENTRIES = {
    "none": {},
    "uniform": {"value": 1.0},
    "cosine": {"value": 1.0, "anisotropy": 0.5},
}
NONLINEARITY_ENTRIES = {
    "none": {},
    "taylor": {},
    "product": {"n0": "square"},
}

FAMILIES = {"static": STATIC_ENTRIES, "kernel": KERNEL_ENTRIES,
            "profile": PROFILE_ENTRIES, "nonlinearity": NONLINEARITY_ENTRIES}


def validate(text: str, family: str) -> Spec:
    """Parse and check names and keys against a catalog family."""
    spec = parse_spec(text)
    entries = FAMILIES[family]
    if spec.name not in entries:
        raise CatalogError(f"unknown {family} entry {spec.name!r}; known: {sorted(entries)}")
    unknown = set(spec.kwargs) - set(entries[spec.name])
    if unknown:
        raise CatalogError(f"{spec.name} does not take {sorted(unknown)}; "
                           f"allowed: {sorted(entries[spec.name])}")
    return spec


def _args(spec: Spec, family: str) -> dict:
    out = dict(FAMILIES[family][spec.name])
    out.update(spec.kwargs)
    return out


def static_field(text: str, grid: PhaseGrid, cls: LambdaClass | None = None) -> np.ndarray | None:
    """Evaluate a static catalog entry on the grid, shape (n_nodes, n_v); ``none`` gives None."""
    spec = validate(text, "static")
    a = _args(spec, "static")
    cls = cls or LambdaClass()
    x = grid.points[:, 0][:, None]
    y = grid.points[:, 1][:, None]
    ones = np.ones((grid.n_nodes, grid.n_v))
    mask = cls.profile_mask(grid.quad.angles).astype(float)[None, :]
    if spec.name == "none":
        return None
    if spec.name == "constant":
        return float(a["value"]) * ones
    if spec.name == "lambda_profile":
        return float(a["value"]) * mask * ones
    if spec.name in ("gaussian", "lambda_gaussian"):
        bump = a["base"] + a["amplitude"] * np.exp(-((x - a["x0"]) ** 2 + (y - a["y0"]) ** 2) / a["width"] ** 2)
        vals = bump * ones
        return vals * mask if spec.name == "lambda_gaussian" else vals
    if spec.name == "angular":
        return (a["base"] + a["amplitude"] * np.cos(grid.quad.angles - a["angle"]) ** 2)[None, :] * ones
    if spec.name == "bump":
        # compactly supported (1 - r^2)^2, C^1 across its edge
        r2 = ((x - a["x0"]) ** 2 + (y - a["y0"]) ** 2) / a["radius"] ** 2
        return a["amplitude"] * np.maximum(0.0, 1.0 - r2) ** 2 * ones
    return _read_csv_field(a["path"], grid)


def _read_csv_field(path: str, grid: PhaseGrid) -> np.ndarray:
    """Tabulated field with columns x, y, theta, value in node-major order."""
    if not path:
        raise CatalogError("csv entry needs a path")
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise CatalogError(f"cannot read coefficient table {path}: {exc}") from None
    if len(rows) != grid.M:
        raise CatalogError(f"{path} has {len(rows)} rows, the grid has {grid.M} phase nodes")
    arr = np.array([[float(r["x"]), float(r["y"]), float(r["theta"]), float(r["value"])] for r in rows])
    if (np.abs(arr[:, 0] - grid.phase_x).max() > 1e-9 or np.abs(arr[:, 1] - grid.phase_y).max() > 1e-9
            or np.abs(arr[:, 2] - grid.phase_theta).max() > 1e-9):
        raise CatalogError(f"{path} is tabulated on a different grid")
    return arr[:, 3].reshape(grid.n_nodes, grid.n_v)


def kernel(text: str, grid: PhaseGrid, cls: LambdaClass | None = None,
           weight: EuclideanWeight | None = None) -> np.ndarray | None:
    """Scattering kernel array (1, n_v, n_v), axis 1 incoming, axis 2 outgoing."""
    spec = validate(text, "kernel")
    a = _args(spec, "kernel")
    cls = cls or LambdaClass()
    n_v = grid.n_v
    if spec.name == "none":
        return None
    if spec.name == "isotropic":
        return np.full((1, n_v, n_v), float(a["value"]))
    if spec.name == "lambda_kernel":
        P = cls.profile_mask(grid.quad.angles).astype(float)
        return float(a["value"]) * np.outer(P, P)[None]
    weight = weight or EuclideanWeight()
    return negative_control_kernel(grid, weight, a["strength"], a["threshold"])


def negative_control_kernel(grid: PhaseGrid, weight: EuclideanWeight, strength: float,
                            threshold: float) -> np.ndarray:
    """One-way scattering from the weight's cone V into directions with B below ``threshold``."""
    th = grid.quad.angles
    src = weight.in_V(th)
    dst = weight.B(th) < threshold
    mu = np.zeros((1, grid.n_v, grid.n_v))
    mu[0][np.ix_(src, dst)] = strength
    return mu


def profile(text: str, grid: PhaseGrid) -> np.ndarray | None:
    """Separable-kernel profile p(v', v), shape (n_v, n_v)."""
    spec = validate(text, "profile")
    a = _args(spec, "profile")
    th = grid.quad.angles
    if spec.name == "none":
        return None
    if spec.name == "uniform":
        return np.full((grid.n_v, grid.n_v), float(a["value"]))
    if abs(a["anisotropy"]) >= 1:
        raise CatalogError("cosine profile needs |anisotropy| < 1 to stay positive")
    return float(a["value"]) * (1 + a["anisotropy"] * np.cos(th[:, None] - th[None, :]))
