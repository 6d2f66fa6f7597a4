"""Named coefficients, exact solutions and canned experiments.

Everything a config file can refer to by name lives here, so a run is fully
described by text without evaluating user expressions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import CallableField, PDOCoeffs
from .hps import Hierarchy, InterfaceResidualWarning, Solution, timestep_backward_euler
from .mesh import Mesh, make_lshape, make_polygon, make_rectangle, refine_corner

__all__ = [
    "Velocity",
    "kovasznay",
    "gravity",
    "sin_xy",
    "COEFFICIENTS",
    "ExactSolution",
    "EXACT",
    "exact_solution",
    "helmholtz_cos",
    "lshape_corner",
    "linear",
    "harmonic_quadratic",
    "polynomial",
    "bench_rhs",
    "bench_boundary",
    "gaussian_pulse",
    "convection_diffusion",
    "pentagon_gravity",
    "HPStep",
    "lshape_hp",
]


# ---------------------------------------------------------------------------
# coefficient builtins


@dataclass(frozen=True)
class Velocity:
    """Planar velocity ``(b1, b2)`` with its divergence."""

    b1: Callable
    b2: Callable
    div: Callable
    params: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.b1, self.b2))


def kovasznay(Re: float = 100.0, exponent: float | None = None) -> Velocity:
    """Kovasznay flow ``(1 - e^{gx} cos 2 pi y, g/(2 pi) e^{gx} sin 2 pi y)``.

    ``g`` defaults to the decaying root ``Re/2 - sqrt(Re^2/4 + 4 pi^2)`` of the
    Kovasznay dispersion relation. Pass ``exponent`` to use another value.
    The field is divergence free for every ``g``.
    """
    g = Re / 2 - math.sqrt(Re**2 / 4 + 4 * math.pi**2) if exponent is None else float(exponent)
    tp = 2 * math.pi

    def b1(x, y):
        return 1.0 - np.exp(g * x) * np.cos(tp * y)

    def b2(x, y):
        return g / tp * np.exp(g * x) * np.sin(tp * y)

    def div(x, y):
        return np.zeros(np.broadcast(x, y).shape)

    return Velocity(b1, b2, div, {"Re": Re, "gamma": g})


def gravity(gamma0: float = 50000.0) -> CallableField:
    """Reaction coefficient ``gamma0 (1 - y)``."""
    return CallableField(lambda x, y: gamma0 * (1.0 - y))


def sin_xy() -> CallableField:
    return CallableField(lambda x, y: np.sin(x * y))


COEFFICIENTS = {"sin_xy": sin_xy, "gravity": gravity, "kovasznay": kovasznay}


# ---------------------------------------------------------------------------
# exact solutions


@dataclass(frozen=True)
class ExactSolution:
    """Exact solution with the right-hand side it induces for its operator."""

    u: Callable
    pdo: PDOCoeffs
    f: Callable | float | None = None
    name: str = ""

    def __call__(self, x, y):
        return self.u(x, y)


def helmholtz_cos(omega: float) -> ExactSolution:
    """``u = cos(wx) cos(wy)`` solving ``lap u + 2 w^2 u = 0``."""
    w = float(omega)
    return ExactSolution(lambda x, y: np.cos(w * x) * np.cos(w * y), PDOCoeffs.laplace(2 * w * w), None,
                         f"helmholtz_cos({w:g})")


def lshape_corner() -> ExactSolution:
    """``r^(2/3) sin(2 theta / 3)`` with ``theta`` in ``[0, 2 pi)``, harmonic off the origin."""

    def u(x, y):
        r = np.hypot(x, y)
        th = np.mod(np.arctan2(y, x), 2 * np.pi)
        return r ** (2 / 3) * np.sin(2 * th / 3)

    return ExactSolution(u, PDOCoeffs.laplace(), None, "lshape_corner")


def linear(a: float = 1.0, b: float = 1.0, c: float = 0.0) -> ExactSolution:
    return ExactSolution(lambda x, y: a * x + b * y + c + 0 * x * y, PDOCoeffs.laplace(), None, "linear")


def harmonic_quadratic() -> ExactSolution:
    return ExactSolution(lambda x, y: x * x - y * y, PDOCoeffs.laplace(), None, "harmonic_quadratic")


def polynomial(degree: int = 6) -> ExactSolution:
    """``(x + 2y)^degree`` for the Laplacian, with its right-hand side."""
    d = int(degree)

    def u(x, y):
        return (x + 2 * y) ** d

    def f(x, y):
        return 5.0 * d * (d - 1) * (x + 2 * y) ** max(d - 2, 0) if d >= 2 else 0.0 * x

    return ExactSolution(u, PDOCoeffs.laplace(), f, f"polynomial({d})")


EXACT = {
    "helmholtz_cos": helmholtz_cos,
    "lshape_corner": lshape_corner,
    "linear": linear,
    "harmonic_quadratic": harmonic_quadratic,
    "polynomial": polynomial,
}


def exact_solution(name: str, *args) -> ExactSolution:
    try:
        return EXACT[name](*args)
    except KeyError:
        raise KeyError(f"unknown exact solution {name!r}; known: {sorted(EXACT)}") from None


# ---------------------------------------------------------------------------
# experiment defaults


def bench_rhs(x, y):
    return np.exp(x + y)


def bench_boundary(x, y):
    return x * y


def gaussian_pulse(x0: float = 1.0, y0: float = 0.0, a: float = 4.0):
    return lambda x, y: np.exp(-a * (x - x0) ** 2 - a * (y - y0) ** 2)


def convection_diffusion(p: int = 16, t_final: float = 5.0, dt: float = 0.1, kappa: float = 0.01,
                         Re: float = 100.0, nx: int = 20, ny: int = 4, use_update: bool = True,
                         snapshot_times=(), threads: int = 1, storage: str = "full"):
    """Backward Euler on ``[0, 10] x [-1, 1]`` for a Gaussian carried by Kovasznay flow."""
    mesh = make_rectangle((0.0, 10.0, -1.0, 1.0), nx, ny, p)
    vel = kovasznay(Re)
    return timestep_backward_euler(mesh, gaussian_pulse(), kappa, (vel.b1, vel.b2), dt, t_final, p=p,
                                   div_velocity=vel.div, use_update=use_update, snapshot_times=snapshot_times,
                                   storage=storage, threads=threads)


def pentagon_gravity(p: int = 60, side: float = 1.2, gamma0: float = 50000.0, threads: int = 1) -> Hierarchy:
    """``lap u + gamma0 (1 - y) u = -1`` with zero data on a five-quad pentagon."""
    mesh = make_polygon(5, side, p)
    pdo = PDOCoeffs(uxx=1.0, uyy=1.0, b=gravity(gamma0))
    return Hierarchy(mesh, pdo, -1.0, p=p, threads=threads).build()


# ---------------------------------------------------------------------------
# hp-adaptive L-shape


@dataclass
class HPStep:
    n_dof: int
    error: float
    levels: int
    p_min: int
    p_max: int
    n_elem: int


def _touches(mesh: Mesh, k: int, vi: int) -> bool:
    return vi in mesh.elements[k]


def lshape_hp(tolerances=(1e-2, 1e-3, 1e-4, 1e-5, 1e-6), p0: int = 3, p_max: int = 16, max_levels: int = 20,
              max_dof: int = 200000, mark: float = 0.1, indicator: str = "l2", kid_bump: int = 2,
              callback=None):
    """A priori hp loop for the L-shape corner singularity.

    Each pass solves, measures element errors against the exact solution and
    marks elements whose indicator is at least ``mark`` times the largest one
    (``"l2"`` is the squared L2 error, ``"scaled"`` divides it by the squared
    diameter). Marked elements at the reentrant corner are graded toward it,
    the others get one more polynomial degree. New elements away from the
    corner start ``kid_bump`` degrees above their parent: low-order elements
    next to a graded cross point make the interface solves sensitive to the
    singular flux. The loop stops once the smallest tolerance is met and
    records the first mesh that meets each tolerance.

    Returns ``(met, history, mesh)`` with ``met`` a list of
    ``(tolerance, n_dof, error)`` rows for the tolerances reached.
    """
    ex = lshape_corner()
    mesh = make_lshape(p0)
    tols = sorted(tolerances, reverse=True)
    met, history = [], []
    levels = 0
    while True:
        with warnings.catch_warnings():
            # unit-data interface residuals are expected on the graded mesh
            warnings.simplefilter("ignore", InterfaceResidualWarning)
            h = Hierarchy(mesh, ex.pdo).build()
            sol: Solution = h.solve(ex.u)
        errs = sol.element_errors(ex.u)
        e2 = np.array([a for a, _ in errs])
        err = math.sqrt(e2.sum() / sum(b for _, b in errs))
        step = HPStep(h.n_dof, err, levels, min(mesh.orders), max(mesh.orders), mesh.n_elem)
        history.append(step)
        if callback is not None:
            callback(step)
        while tols and err <= tols[0]:
            met.append((tols.pop(0), h.n_dof, err))
        if not tols or h.n_dof > max_dof:
            break
        vi = mesh.vertex_index((0.0, 0.0))
        eta = e2 / np.array([m.diameter for m in mesh.maps]) ** 2 if indicator == "scaled" else e2
        marked = np.flatnonzero(eta >= mark * eta.max())
        grade = any(_touches(mesh, k, vi) for k in marked)
        orders = list(mesh.orders)
        bumped = False
        for k in marked:
            if not _touches(mesh, k, vi) and orders[k] < p_max:
                orders[k] += 1
                bumped = True
        if grade and levels >= max_levels and not bumped:
            break
        mesh = mesh.with_orders(orders)
        if grade and levels < max_levels:
            old = {tuple(e) for e in mesh.elements}
            mesh = refine_corner(mesh, vi)
            levels += 1
            # children away from the corner start above their parent's order
            mesh = mesh.with_orders([
                min(q + kid_bump, p_max) if tuple(e) not in old and vi not in e else q
                for e, q in zip(mesh.elements, mesh.orders)
            ])
        elif not bumped:
            break
    return met, history, mesh
