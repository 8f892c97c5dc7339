"""Sectioned INI experiment configuration with strict keys and aggregated errors."""

from __future__ import annotations

import configparser
import hashlib
import io
import math
from dataclasses import dataclass
from pathlib import Path

from . import catalog
from .errors import ConfigError, InvalidQuadratureError


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(t for t in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _lam(text: str):
    return "auto" if text.strip() == "auto" else float(text)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "geometry": {
        "kind": (str, "euclidean_disk"),
        "R": (float, 1.0),
        "conformal": (str, "gaussian"),
        "amplitude": (float, 0.1),
        "width": (float, 1.0),
    },
    "grid": {
        "dx": (float, 0.05),
        "n_v": (int, 16),
        "dt": (float, 0.03125),
        "T": (float, 4.0),
    },
    "coefficients": {
        "sigma": (str, "constant(value=1.0)"),
        "mu": (str, "none"),
        "mu_tilde": (str, "none"),
        "p": (str, "none"),
        "nonlinearity": (str, "none"),
        "q": (str, "none"),
        "q2": (str, "none"),
        "q3": (str, "none"),
        "h": (str, "constant(value=1.0)"),
    },
    "weight": {
        "gamma": (_floats, (1.0, 0.0)),
        "beta": (float, 0.15),
        "gamma0": (float, 0.3),
        "gamma1": (float, 0.3),
        "riemannian_beta": (float, 0.15),
        "s_grid": (_floats, (10.0, 20.0, 40.0, 80.0, 160.0)),
        "slack": (float, 1.1),
    },
    "solver": {
        "tol": (float, 1e-10),
        "max_iter": (int, 200),
        "delta": (float, 0.05),
        "method": (str, "ray"),
    },
    "linearize": {
        "orders": (_ints, (1, 2, 3)),
        "eps": (_floats, (0.016, 0.008, 0.004, 0.002)),
    },
    "carleman": {
        "functionals": (_words, ("euclidean",)),
        "negative_control": (_bool, True),
        "negative_strength": (float, 20.0),
        "negative_threshold": (float, -0.2),
        "energy_draws": (int, 100),
    },
    "inversion": {
        "target": (str, "sigma"),
        "n_b": (int, 6),
        "lam": (_lam, "auto"),
        "iterations": (int, 3),
        "phantom": (str, "lambda_gaussian(amplitude=0.15, x0=0.2, y0=0.0, width=0.4)"),
        "phantom3": (str, "none"),
        "K": (int, 2),
        "refined_data": (_bool, False),
        "ensemble": (int, 100),
        "amplitude": (float, 0.05),
        "noise": (float, 0.0),
    },
    "output": {
        "dir": (str, "ktie_out"),
    },
    "run": {
        "seed": (int, 0),
    },
}

CATALOG_KEYS = {
    ("coefficients", "sigma"): "static", ("coefficients", "mu"): "kernel",
    ("coefficients", "mu_tilde"): "static", ("coefficients", "p"): "profile",
    ("coefficients", "nonlinearity"): "nonlinearity", ("coefficients", "q"): "static",
    ("coefficients", "q2"): "static", ("coefficients", "q3"): "static",
    ("coefficients", "h"): "static", ("inversion", "phantom"): "static",
    ("inversion", "phantom3"): "static",
}


class Section(dict):
    """Read-only mapping with attribute access."""

    def __getattr__(self, key):
        try:
            return self[key]
        except KeyError:
            raise AttributeError(key) from None

    def __setitem__(self, key, value):
        raise TypeError("config sections are read-only")


@dataclass(frozen=True)
class ExperimentConfig:
    sections: dict

    def __getattr__(self, name):
        sections = object.__getattribute__(self, "sections")
        if name in sections:
            return sections[name]
        raise AttributeError(name)

    def with_overrides(self, **changes) -> "ExperimentConfig":
        """Copy with ``section__key=value`` replacements, revalidated."""
        raw = {s: dict(v) for s, v in self.sections.items()}
        for k, v in changes.items():
            sec, key = k.split("__", 1)
            raw[sec][key] = v
        return _validate({s: {k: _fmt(v) for k, v in d.items()} for s, d in raw.items()})

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for sec in SCHEMA:
            cp[sec] = {k: _fmt(v) for k, v in self.sections[sec].items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


def parse_text(text: str, strict: bool = True) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"malformed config: {exc}"]) from None
    problems = []
    raw: dict[str, dict[str, str]] = {s: {} for s in SCHEMA}
    for sec in cp.sections():
        if sec not in SCHEMA:
            if strict:
                problems.append(f"unknown section [{sec}]")
            continue
        for key, value in cp[sec].items():
            if key not in SCHEMA[sec]:
                if strict:
                    problems.append(f"unknown key {sec}.{key}")
                continue
            raw[sec][key] = value
    try:
        cfg = _validate(raw)
    except ConfigError as exc:
        problems.extend(exc.violations)
        cfg = None
    if problems:
        raise ConfigError(problems)
    return cfg


def parse_config(path, strict: bool = True) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError([f"config file not found: {p}"])
    return parse_text(p.read_text(), strict)


def default_config() -> ExperimentConfig:
    return parse_text("")


def _validate(raw: dict) -> ExperimentConfig:
    problems = []
    sections = {}
    for sec, keys in SCHEMA.items():
        vals = {}
        for key, (conv, default) in keys.items():
            if key in raw.get(sec, {}):
                try:
                    vals[key] = conv(raw[sec][key])
                except (ValueError, TypeError) as exc:
                    problems.append(f"{sec}.{key}: {exc}")
                    vals[key] = default
            else:
                vals[key] = default
        sections[sec] = Section(vals)
    for (sec, key), family in CATALOG_KEYS.items():
        try:
            catalog.validate(sections[sec][key], family)
        except catalog.CatalogError as exc:
            problems.append(f"{sec}.{key}: {exc}")
    problems.extend(_semantic_checks(sections))
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(sections)


def _semantic_checks(s: dict) -> list[str]:
    from .geometry import CONFORMAL, EUCLIDEAN, direction_quadrature

    out = []
    geo, grid = s["geometry"], s["grid"]
    if geo.kind not in (EUCLIDEAN, CONFORMAL):
        out.append(f"geometry.kind must be {EUCLIDEAN} or {CONFORMAL}, got {geo.kind!r}")
    if geo.R <= 0:
        out.append("geometry.R must be positive")
    try:
        direction_quadrature(grid.n_v)
    except InvalidQuadratureError as exc:
        out.append(f"grid.n_v: {exc}")
    if grid.dx <= 0 or grid.dt <= 0:
        out.append("grid.dx and grid.dt must be positive")
    elif grid.dt > grid.dx * (1 + 1e-12):
        out.append(f"grid.dt={grid.dt} exceeds grid.dx={grid.dx}")
    elif abs(round(grid.T / grid.dt) * grid.dt - grid.T) > 1e-9 * max(grid.T, 1.0):
        out.append(f"grid.T={grid.T} is not a multiple of grid.dt={grid.dt}")
    if not out:
        D = diameter_of(s)
        if grid.T < 2 * D * (1 - 1e-12):
            out.append(f"grid.T={grid.T} violates T >= 2*D_metric = {2 * D:.6g}")
    if s["solver"].method not in ("ray", "sweep"):
        out.append("solver.method must be ray or sweep")
    if s["solver"].tol <= 0 or s["solver"].max_iter < 1:
        out.append("solver.tol must be positive and solver.max_iter at least 1")
    w = s["weight"]
    if len(w.gamma) != 2 or not math.isclose(math.hypot(*w.gamma), 1.0, rel_tol=1e-9):
        out.append("weight.gamma must be a unit 2-vector")
    if not 0 < w.riemannian_beta < 1:
        out.append("weight.riemannian_beta must lie in (0, 1)")
    if not w.s_grid or min(w.s_grid) <= 0:
        out.append("weight.s_grid must list positive values")
    for f in s["carleman"].functionals:
        if f not in ("euclidean", "riemannian", "energy"):
            out.append(f"carleman.functionals: unknown functional {f!r}")
    inv = s["inversion"]
    if inv.target not in ("sigma", "mu_tilde", "q"):
        out.append("inversion.target must be sigma, mu_tilde or q")
    if inv.n_b < 2:
        out.append("inversion.n_b must be at least 2")
    if inv.K < 2:
        out.append("inversion.K must be at least 2")
    nl = catalog.parse_spec(s["coefficients"].nonlinearity).name if _parses(s["coefficients"].nonlinearity) else None
    if nl == "product" and s["coefficients"].q == "none":
        out.append("coefficients.q is required for a product nonlinearity")
    if any(k not in (1, 2, 3) for k in s["linearize"].orders):
        out.append("linearize.orders must be drawn from 1, 2, 3")
    return out


def _parses(text: str) -> bool:
    try:
        catalog.parse_spec(text)
        return True
    except catalog.CatalogError:
        return False


_DIAMETERS: dict = {}


def diameter_of(sections) -> float:
    geo = sections["geometry"]
    key = (geo.kind, geo.R, geo.conformal, geo.amplitude, geo.width)
    if key not in _DIAMETERS:
        _DIAMETERS[key] = make_domain_from(sections).diameter
    return _DIAMETERS[key]


def make_domain_from(sections):
    from .geometry import CONFORMAL, ConformalFactor, make_domain

    geo = sections["geometry"]
    if geo.kind == CONFORMAL:
        c = ConformalFactor(geo.conformal, geo.amplitude, geo.width)
        return make_domain(CONFORMAL, geo.R, c)
    return make_domain(geo.kind, geo.R)
