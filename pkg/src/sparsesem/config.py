"""Problem configuration files.

A configuration is a YAML mapping with nested sections. Coefficients,
right-hand sides and boundary data are numbers, monomial tables
(``{poly: [[c00, c01], [c10, c11]]}`` meaning ``sum c[i][j] x^i y^j``) or named
builtins (``{builtin: gravity, args: [50000]}``); nothing is evaluated as code.

Example::

    mesh: {type: rectangle, bounds: [0, 1, 0, 1], nx: 4, ny: 4}
    p: 8
    pdo: {uxx: 1, uyy: 1, b: {builtin: sin_xy}}
    rhs: {builtin: bench_rhs}
    boundary: {builtin: bench_boundary}
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from numbers import Number
from typing import Any

import numpy as np
import yaml
from numpy.polynomial import polynomial as P

from . import problems
from .geometry import CallableField, PDOCoeffs
from .mesh import (Mesh, MeshError, make_lshape, make_polygon, make_quad, make_rectangle, make_triangle,
                   read_mesh, refine_uniform)

__all__ = ["ConfigError", "ProblemConfig", "parse_config", "dump_config", "load_config", "builtin_config",
           "BUILTIN_CONFIGS", "FIELD_BUILTINS"]


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


def _pulse(x0=1.0, y0=0.0, a=4.0):
    return CallableField(problems.gaussian_pulse(x0, y0, a))


FIELD_BUILTINS = {
    "sin_xy": problems.sin_xy,
    "gravity": problems.gravity,
    "bench_rhs": lambda: CallableField(problems.bench_rhs),
    "bench_boundary": lambda: CallableField(problems.bench_boundary),
    "gaussian_pulse": _pulse,
}
VELOCITY_BUILTINS = {"kovasznay": problems.kovasznay}

MESH_TYPES = ("rectangle", "lshape", "polygon", "quad", "triangle", "file")
SECTIONS = ("mesh", "p", "pdo", "rhs", "boundary", "exact", "solver", "sample", "sweep", "timestep", "lshape")
PDO_KEYS = ("uxx", "uxy", "uyy", "ux", "uy", "b")

DEFAULT_SOLVER = {"storage": "full", "threads": 1, "strict": False, "residual_tol": 1e-8, "max_rank": 30}
DEFAULT_TIMESTEP = {"kappa": 0.01, "velocity": {"builtin": "kovasznay", "args": [100.0]}, "dt": 0.1,
                    "t_final": 5.0, "u0": {"builtin": "gaussian_pulse"}, "snapshots": []}
DEFAULT_LSHAPE = {"tolerances": [1e-2, 1e-3, 1e-4, 1e-5, 1e-6], "p0": 3, "p_max": 16, "max_levels": 20,
                  "max_dof": 200000}


def _plain(v):
    """YAML-friendly copy: tuples become lists, numpy scalars become floats."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def _need(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _is_num(v) -> bool:
    return isinstance(v, Number) and not isinstance(v, bool)


def _check_field(spec, where: str, registry=FIELD_BUILTINS):
    if spec is None or _is_num(spec):
        return
    if isinstance(spec, str):
        _need(spec in registry, f"{where}: unknown builtin {spec!r}; known: {sorted(registry)}")
        return
    _need(isinstance(spec, dict), f"{where}: expected a number, a builtin or a poly table")
    if "builtin" in spec:
        _need(set(spec) <= {"builtin", "args"}, f"{where}: unexpected keys {sorted(set(spec) - {'builtin', 'args'})}")
        _need(spec["builtin"] in registry, f"{where}: unknown builtin {spec['builtin']!r}; known: {sorted(registry)}")
        args = spec.get("args", [])
        _need(isinstance(args, list) and all(_is_num(a) for a in args), f"{where}: args must be a list of numbers")
    elif "poly" in spec:
        _need(set(spec) == {"poly"}, f"{where}: a poly table takes no other keys")
        tab = spec["poly"]
        ok = isinstance(tab, list) and tab and all(isinstance(r, list) and r and all(_is_num(c) for c in r) for r in tab)
        _need(ok, f"{where}: poly must be a non-empty list of numeric rows")
    else:
        raise ConfigError(f"{where}: expected 'builtin' or 'poly'")


def make_field(spec, registry=FIELD_BUILTINS):
    """Turn a field spec into a number or callable field."""
    if spec is None:
        return 0.0
    if _is_num(spec):
        return spec
    if isinstance(spec, str):
        spec = {"builtin": spec}
    if "builtin" in spec:
        return registry[spec["builtin"]](*spec.get("args", []))
    n = max(len(r) for r in spec["poly"])
    tab = np.array([r + [0.0] * (n - len(r)) for r in spec["poly"]], dtype=float)
    return CallableField(lambda x, y, c=tab: P.polyval2d(x, y, c))


@dataclass
class ProblemConfig:
    """Validated configuration. Sections not given take their defaults."""

    mesh: dict
    p: Any = 4
    pdo: dict = field(default_factory=lambda: {"uxx": 1.0, "uyy": 1.0})
    rhs: Any = 0.0
    boundary: Any = 0.0
    exact: dict | None = None
    solver: dict = field(default_factory=lambda: dict(DEFAULT_SOLVER))
    sample: dict = field(default_factory=lambda: {"grid": [101, 101]})
    sweep: dict | None = None
    timestep: dict | None = None
    lshape: dict | None = None

    def __post_init__(self):
        self.validate()

    # -- validation --------------------------------------------------------

    def validate(self):
        m = self.mesh
        _need(isinstance(m, dict) and m.get("type") in MESH_TYPES,
              f"mesh.type must be one of {list(MESH_TYPES)}")
        t = m["type"]
        allowed = {"rectangle": {"bounds", "nx", "ny"}, "lshape": set(), "polygon": {"n", "side", "center"},
                   "quad": {"vertices"}, "triangle": {"vertices"}, "file": {"path"}}[t] | {"type", "refine"}
        _need(set(m) <= allowed, f"mesh: unexpected keys {sorted(set(m) - allowed)} for type {t}")
        if t == "rectangle":
            _need(len(m.get("bounds", [0, 1, 0, 1])) == 4, "mesh.bounds needs four numbers")
            for k in ("nx", "ny"):
                _need(isinstance(m.get(k, 1), int) and m.get(k, 1) >= 1, f"mesh.{k} must be a positive integer")
        if t in ("quad", "triangle"):
            nv = 4 if t == "quad" else 3
            _need(len(m.get("vertices", [])) == nv, f"mesh.vertices needs {nv} points")
        if t == "file":
            _need(isinstance(m.get("path"), str), "mesh.path must be a string")
        _need(isinstance(m.get("refine", 0), int) and m.get("refine", 0) >= 0, "mesh.refine must be >= 0")

        p = self.p
        if isinstance(p, dict):
            _need(set(p) <= {"default", "elements"}, "p: expected keys 'default' and 'elements'")
            _need(isinstance(p.get("default"), int) and p["default"] >= 1, "p.default must be an integer >= 1")
            els = p.get("elements", {})
            _need(isinstance(els, dict) and all(isinstance(k, int) and isinstance(v, int) and v >= 1
                                                for k, v in els.items()), "p.elements maps element ids to orders")
        elif isinstance(p, list):
            _need(p and all(isinstance(q, int) and q >= 1 for q in p), "p list entries must be integers >= 1")
        else:
            _need(isinstance(p, int) and not isinstance(p, bool) and p >= 1, "p must be an integer >= 1")

        _need(isinstance(self.pdo, dict) and set(self.pdo) <= set(PDO_KEYS), f"pdo keys must be among {PDO_KEYS}")
        for k, v in self.pdo.items():
            _check_field(v, f"pdo.{k}")
        for name in ("rhs", "boundary"):
            spec = getattr(self, name)
            if spec == "exact":
                _need(self.exact is not None, f"{name}: 'exact' needs an exact section")
            else:
                _check_field(spec, name)
        if self.exact is not None:
            _need(isinstance(self.exact, dict) and self.exact.get("name") in problems.EXACT,
                  f"exact.name must be one of {sorted(problems.EXACT)}")
            args = self.exact.get("args", [])
            _need(isinstance(args, list) and all(_is_num(a) for a in args), "exact.args must be numbers")
        s = self.solver
        _need(isinstance(s, dict) and set(s) <= set(DEFAULT_SOLVER), f"solver keys must be among {list(DEFAULT_SOLVER)}")
        _need(s.get("storage", "full") in ("full", "lean"), "solver.storage must be 'full' or 'lean'")
        _need(isinstance(s.get("threads", 1), int) and s.get("threads", 1) >= 1, "solver.threads must be >= 1")
        g = self.sample.get("grid") if isinstance(self.sample, dict) else None
        _need(isinstance(g, list) and len(g) == 2 and all(isinstance(v, int) and v >= 2 for v in g),
              "sample.grid must be two integers >= 2")
        if self.sweep is not None:
            sw = self.sweep
            _need(isinstance(sw, dict) and sw.get("kind") in ("h", "p"), "sweep.kind must be 'h' or 'p'")
            vals = sw.get("values")
            _need(isinstance(vals, list) and vals and all(isinstance(v, int) and v >= 1 for v in vals),
                  "sweep.values must be positive integers")
            _need(sw["kind"] == "p" or self.mesh["type"] == "rectangle", "an h sweep needs a rectangle mesh")
        if self.timestep is not None:
            ts = self.timestep
            _need(isinstance(ts, dict) and set(ts) <= set(DEFAULT_TIMESTEP), f"timestep keys must be among {list(DEFAULT_TIMESTEP)}")
            for k in ("kappa", "dt", "t_final"):
                _need(_is_num(ts.get(k, 0.0)), f"timestep.{k} must be a number")
            _need(ts.get("dt", 0.1) > 0, "timestep.dt must be positive")
            vel = ts.get("velocity", DEFAULT_TIMESTEP["velocity"])
            if isinstance(vel, list):
                _need(len(vel) == 2, "timestep.velocity needs two components")
                for i, v in enumerate(vel):
                    _check_field(v, f"timestep.velocity[{i}]")
            else:
                _need(isinstance(vel, (str, dict)) and not (isinstance(vel, dict) and "poly" in vel),
                      "timestep.velocity must be a builtin or a list of two fields")
                _check_field(vel, "timestep.velocity", VELOCITY_BUILTINS)
            _check_field(ts.get("u0", 0.0), "timestep.u0")
        if self.lshape is not None:
            _need(isinstance(self.lshape, dict) and set(self.lshape) <= set(DEFAULT_LSHAPE),
                  f"lshape keys must be among {list(DEFAULT_LSHAPE)}")

    # -- builders ------------------------------------------------------------

    def build_mesh(self, p: int | None = None) -> Mesh:
        m = self.mesh
        t = m["type"]
        try:
            if t == "rectangle":
                mesh = make_rectangle(tuple(m.get("bounds", [0, 1, 0, 1])), m.get("nx", 1), m.get("ny", 1))
            elif t == "lshape":
                mesh = make_lshape()
            elif t == "polygon":
                mesh = make_polygon(m.get("n", 5), m.get("side", 1.0), center=tuple(m.get("center", [0.0, 0.0])))
            elif t == "quad":
                mesh = make_quad(m["vertices"])
            elif t == "triangle":
                mesh = make_triangle(m["vertices"])
            else:
                mesh = read_mesh(m["path"])
            for _ in range(m.get("refine", 0)):
                mesh = refine_uniform(mesh)
        except (MeshError, OSError, ValueError) as exc:
            raise ConfigError(f"mesh: {exc}") from exc
        return mesh.with_orders(self.orders(mesh, p))

    def orders(self, mesh: Mesh, p: int | None = None) -> list:
        """Element orders; ``p`` replaces every configured order."""
        if p is not None:
            return [int(p)] * mesh.n_elem
        spec = self.p
        if isinstance(spec, list):
            _need(len(spec) == mesh.n_elem, f"p lists {len(spec)} orders for {mesh.n_elem} elements")
            return list(spec)
        base = spec["default"] if isinstance(spec, dict) else spec
        out = [base if q is None else q for q in mesh.orders]
        for k, q in (spec.get("elements", {}) if isinstance(spec, dict) else {}).items():
            _need(0 <= k < mesh.n_elem, f"p.elements names element {k} of {mesh.n_elem}")
            out[k] = q
        return out

    def build_pdo(self) -> PDOCoeffs:
        return PDOCoeffs(**{k: make_field(v) for k, v in self.pdo.items()})

    def exact_solution(self):
        if self.exact is None:
            return None
        return problems.exact_solution(self.exact["name"], *self.exact.get("args", []))

    def _resolve(self, spec):
        if spec == "exact":
            return self.exact_solution().u
        return make_field(spec)

    def rhs_field(self):
        if self.rhs == "exact":
            ex = self.exact_solution()
            return 0.0 if ex.f is None else ex.f
        return make_field(self.rhs)

    def boundary_field(self):
        return self._resolve(self.boundary)

    def velocity(self):
        vel = (self.timestep or {}).get("velocity", DEFAULT_TIMESTEP["velocity"])
        if isinstance(vel, list):
            return tuple(make_field(v) for v in vel), 0.0
        v = make_field(vel, VELOCITY_BUILTINS)
        return (v.b1, v.b2), v.div

    def timestep_options(self) -> dict:
        out = dict(DEFAULT_TIMESTEP)
        out.update(self.timestep or {})
        return out

    def lshape_options(self) -> dict:
        out = dict(DEFAULT_LSHAPE)
        out.update(self.lshape or {})
        return out

    def solver_options(self) -> dict:
        out = dict(DEFAULT_SOLVER)
        out.update(self.solver)
        return out

    # -- serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        out = {"mesh": self.mesh, "p": self.p, "pdo": self.pdo, "rhs": self.rhs, "boundary": self.boundary,
               "solver": self.solver, "sample": self.sample}
        for k in ("exact", "sweep", "timestep", "lshape"):
            if getattr(self, k) is not None:
                out[k] = getattr(self, k)
        return _plain(copy.deepcopy(out))


def _from_dict(data) -> ProblemConfig:
    _need(isinstance(data, dict), "configuration must be a mapping")
    unknown = set(data) - set(SECTIONS)
    _need(not unknown, f"unknown sections {sorted(unknown)}")
    _need("mesh" in data, "missing mesh section")
    data = _plain(data)
    solver = dict(DEFAULT_SOLVER)
    solver.update(data.pop("solver", None) or {})
    if isinstance(data.get("p"), dict) and "elements" in data["p"]:
        data["p"]["elements"] = {int(k): v for k, v in data["p"]["elements"].items()}
    return ProblemConfig(solver=solver, **data)


def parse_config(text: str) -> ProblemConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from exc
    try:
        return _from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: ProblemConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)


BUILTIN_CONFIGS = {
    "pentagon": """
mesh: {type: polygon, n: 5, side: 1.2}
p: 60
pdo: {uxx: 1, uyy: 1, b: {builtin: gravity, args: [50000]}}
rhs: -1
boundary: 0
sample: {grid: [121, 121]}
""",
    "helmholtz": """
mesh: {type: rectangle, bounds: [-1, 1, -1, 1], nx: 8, ny: 8}
p: 10
pdo: {uxx: 1, uyy: 1, b: 200}
rhs: 0
boundary: exact
exact: {name: helmholtz_cos, args: [10]}
""",
    "converge": """
mesh: {type: rectangle, bounds: [-1, 1, -1, 1], nx: 2, ny: 2}
p: 5
pdo: {uxx: 1, uyy: 1, b: 50}
rhs: 0
boundary: exact
exact: {name: helmholtz_cos, args: [5]}
sweep: {kind: h, values: [2, 4, 8, 16]}
""",
    "bench": """
mesh: {type: rectangle, bounds: [-1, 1, -1, 1], nx: 4, ny: 4}
p: 4
pdo: {uxx: 1, uyy: 1, b: {builtin: sin_xy}}
rhs: {builtin: bench_rhs}
boundary: {builtin: bench_boundary}
sweep: {kind: h, values: [2, 4, 8, 16]}
""",
    "convection_diffusion": """
mesh: {type: rectangle, bounds: [0, 10, -1, 1], nx: 20, ny: 4}
p: 16
timestep:
  kappa: 0.01
  velocity: {builtin: kovasznay, args: [100]}
  dt: 0.1
  t_final: 5.0
  u0: {builtin: gaussian_pulse}
  snapshots: [1.0, 2.5, 5.0]
sample: {grid: [401, 81]}
""",
    "lshape": """
mesh: {type: lshape}
p: 3
boundary: exact
exact: {name: lshape_corner}
lshape: {tolerances: [0.01, 0.001, 0.0001, 1.0e-05, 1.0e-06], p0: 3, p_max: 16, max_levels: 20}
""",
}


def builtin_config(name: str) -> ProblemConfig:
    try:
        return parse_config(BUILTIN_CONFIGS[name])
    except KeyError:
        raise ConfigError(f"unknown builtin config {name!r}; known: {sorted(BUILTIN_CONFIGS)}") from None


def load_config(source: str) -> ProblemConfig:
    """Read a config file, or a builtin when ``source`` is ``builtin:NAME``."""
    if source.startswith("builtin:"):
        return builtin_config(source.split(":", 1)[1])
    if not os.path.exists(source):
        raise ConfigError(f"config file {source!r} not found")
    with open(source, encoding="utf-8") as fh:
        return parse_config(fh.read())
