"""Element maps from the reference square ``[-1, 1]^2`` and PDO transformation.

Quadrilaterals use the bilinear map through their four vertices. Triangles
use the collapsed-coordinate (Duffy) map composed with an affine map, which
is itself bilinear with the last two vertices coincident; both are therefore
handled by :class:`QuadMap`.

Bivariate polynomials in ``(r, s)`` are stored as monomial coefficient
arrays ``P[i, j]`` multiplying ``s**i * r**j``. Jacobian factors are kept as
exact ``(numerator, det power)`` pairs so that scaling by ``det(J)**3`` never
involves pointwise division.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from numpy.polynomial import chebyshev as C
from numpy.polynomial import polynomial as P
from scipy.signal import convolve2d

from .chebkit import cheb_coeffs2d, cheb_points

__all__ = [
    "GeometryError",
    "QuadMap",
    "TriMap",
    "bilinear_map",
    "duffy_map",
    "JacobianFactors",
    "jacobian_factors",
    "Constant",
    "ChebCoeffs2D",
    "CallableField",
    "as_field",
    "PDOCoeffs",
    "RefPDO",
    "transform_pdo",
    "EdgeFlux",
    "normal_deriv_factors",
    "REF_CORNERS",
    "SIDES",
]

REF_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
SIDES = ("left", "right", "bottom", "top")
# vertex pairs (start, end) of each side in its increasing-parameter direction
SIDE_VERTICES = ((0, 3), (1, 2), (0, 1), (3, 2))


class GeometryError(ValueError):
    """Degenerate, non-convex or otherwise invalid element geometry."""


# ---------------------------------------------------------------------------
# small bivariate polynomial helpers (monomial, P[i, j] ~ s^i r^j)


def _pmul(a, b):
    return convolve2d(np.atleast_2d(a), np.atleast_2d(b))


def _padd(a, b):
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    out = np.zeros((max(a.shape[0], b.shape[0]), max(a.shape[1], b.shape[1])), dtype=np.result_type(a, b))
    out[: a.shape[0], : a.shape[1]] += a
    out[: b.shape[0], : b.shape[1]] += b
    return out


def _pscale(a, c):
    return np.atleast_2d(a) * c


def _pd_r(a):
    a = np.atleast_2d(a)
    if a.shape[1] == 1:
        return np.zeros((a.shape[0], 1))
    return a[:, 1:] * np.arange(1, a.shape[1])


def _pd_s(a):
    a = np.atleast_2d(a)
    if a.shape[0] == 1:
        return np.zeros((1, a.shape[1]))
    return a[1:, :] * np.arange(1, a.shape[0])[:, None]


def _peval(a, r, s):
    return P.polyval2d(s, r, np.atleast_2d(a))


def _pdiv_one_minus_s(a, tol=1e-10):
    """Exact division of ``a(r, s)`` by ``(1 - s)``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    n = a.shape[0]
    # a = (1 - s) q  =>  a_i = q_i - q_{i-1}, so q is a running sum of a
    q = np.zeros((max(n - 1, 1), a.shape[1]))
    acc = np.zeros(a.shape[1])
    for i in range(n - 1):
        acc = acc + a[i]
        q[i] = acc
    resid = acc + a[n - 1] if n > 1 else a[0]
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(resid).max() > tol * scale:
        raise GeometryError("transformed coefficient is not divisible by (1 - s)")
    return q


def _mono_to_cheb_matrix(n):
    M = np.zeros((n, n))
    for k in range(n):
        c = C.poly2cheb(np.eye(n)[k])
        M[: c.size, k] = c
    return M


def _monomial_to_cheb2d(a):
    """Convert ``P[i, j] s^i r^j`` to Chebyshev ``C[i, j] T_i(s) T_j(r)``."""
    a = np.atleast_2d(a)
    return _mono_to_cheb_matrix(a.shape[0]) @ a @ _mono_to_cheb_matrix(a.shape[1]).T


# ---------------------------------------------------------------------------
# maps


@dataclass(frozen=True)
class QuadMap:
    """Bilinear map ``x = a0 + a1 r + a2 s + a3 r s`` (same for ``y``).

    ``vertices[k]`` is the image of reference corner ``k`` in the order
    ``(-1,-1), (1,-1), (1,1), (-1,1)``.
    """

    vertices: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    collapsed: bool = False

    @property
    def is_triangle(self) -> bool:
        return self.collapsed

    @property
    def x_poly(self) -> np.ndarray:
        a = self.ax
        return np.array([[a[0], a[1]], [a[2], a[3]]])

    @property
    def y_poly(self) -> np.ndarray:
        a = self.ay
        return np.array([[a[0], a[1]], [a[2], a[3]]])

    @property
    def det_poly(self) -> np.ndarray:
        """``det(J) = x_r y_s - x_s y_r``, linear in ``(r, s)``."""
        x, y = self.x_poly, self.y_poly
        return _padd(_pmul(_pd_r(x), _pd_s(y)), -_pmul(_pd_s(x), _pd_r(y)))

    def __call__(self, r, s):
        r, s = np.asarray(r, dtype=float), np.asarray(s, dtype=float)
        ax, ay = self.ax, self.ay
        return ax[0] + ax[1] * r + ax[2] * s + ax[3] * r * s, ay[0] + ay[1] * r + ay[2] * s + ay[3] * r * s

    def jacobian(self, r, s):
        """Return ``(x_r, x_s, y_r, y_s)``."""
        r, s = np.asarray(r, dtype=float), np.asarray(s, dtype=float)
        ax, ay = self.ax, self.ay
        return ax[1] + ax[3] * s, ax[2] + ax[3] * r, ay[1] + ay[3] * s, ay[2] + ay[3] * r

    def det(self, r, s):
        xr, xs, yr, ys = self.jacobian(r, s)
        return xr * ys - xs * yr

    def inverse(self, x, y, tol=1e-14, maxit=50):
        """Reference coordinates of physical points by Newton iteration."""
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        xs_ = np.broadcast_to(x, np.broadcast(x, y).shape).astype(float)
        ys_ = np.broadcast_to(y, xs_.shape).astype(float)
        if self.collapsed:
            r, s = np.zeros_like(xs_), np.full_like(xs_, -1.0 / 3.0)
        else:
            r, s = np.zeros_like(xs_), np.zeros_like(xs_)
        for _ in range(maxit):
            fx, fy = self(r, s)
            fx, fy = fx - xs_, fy - ys_
            xr, xs, yr, ys = self.jacobian(r, s)
            d = xr * ys - xs * yr
            d = np.where(np.abs(d) < 1e-300, 1e-300, d)
            dr = (ys * fx - xs * fy) / d
            ds = (-yr * fx + xr * fy) / d
            r, s = r - dr, s - ds
            if self.collapsed:
                s = np.minimum(s, 1.0)
            if np.all(np.abs(dr) + np.abs(ds) < tol):
                break
        if self.collapsed:
            # points at the collapsed vertex: any r works
            r = np.where(np.abs(1 - s) < 1e-12, 0.0, r)
        return r, s

    def contains(self, x, y, tol=1e-10):
        r, s = self.inverse(x, y)
        return (np.abs(r) <= 1 + tol) & (np.abs(s) <= 1 + tol)

    @property
    def area(self) -> float:
        d = self.det_poly
        # integral of the linear det over [-1,1]^2 is 4 * constant term
        return 4.0 * d[0, 0]

    @property
    def diameter(self) -> float:
        v = np.unique(self.vertices, axis=0)
        return float(max(np.hypot(*(a - b)) for a in v for b in v))


def _bilinear_coeffs(vertices):
    r, s = REF_CORNERS[:, 0], REF_CORNERS[:, 1]
    V = np.column_stack([np.ones(4), r, s, r * s])
    # the 4x4 system is orthogonal up to scaling (V^T V = 4 I)
    return V.T @ vertices[:, 0] / 4.0, V.T @ vertices[:, 1] / 4.0


def _signed_area(pts):
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def bilinear_map(vertices) -> QuadMap:
    """Bilinear map through four counterclockwise vertices.

    Clockwise input is reversed with a warning. Raises :class:`GeometryError`
    for degenerate or non-convex quadrilaterals.
    """
    v = np.asarray(vertices, dtype=float)
    if v.shape != (4, 2):
        raise GeometryError("a quadrilateral needs four (x, y) vertices")
    if not np.all(np.isfinite(v)):
        raise GeometryError("vertex coordinates must be finite")
    if _signed_area(v) < 0:
        warnings.warn("clockwise quadrilateral reversed to counterclockwise", stacklevel=2)
        v = v[[0, 3, 2, 1]]
    ax, ay = _bilinear_coeffs(v)
    m = QuadMap(v, ax, ay, False)
    dets = m.det(REF_CORNERS[:, 0], REF_CORNERS[:, 1])
    scale = max(np.ptp(v[:, 0]), np.ptp(v[:, 1])) ** 2
    if np.any(dets <= 1e-12 * scale):
        raise GeometryError("quadrilateral is degenerate or non-convex (det J <= 0 at a corner)")
    return m


def duffy_map(vertices) -> QuadMap:
    """Collapsed map from the reference square onto a triangle.

    Corners ``(-1,-1)`` and ``(1,-1)`` go to vertices 0 and 1; the edge
    ``s = 1`` collapses onto vertex 2.
    """
    v = np.asarray(vertices, dtype=float)
    if v.shape != (3, 2):
        raise GeometryError("a triangle needs three (x, y) vertices")
    if not np.all(np.isfinite(v)):
        raise GeometryError("vertex coordinates must be finite")
    area = _signed_area(v)
    if area < 0:
        warnings.warn("clockwise triangle reversed to counterclockwise", stacklevel=2)
        v = v[[0, 2, 1]]
        area = -area
    scale = max(np.ptp(v[:, 0]), np.ptp(v[:, 1])) ** 2
    if area <= 1e-14 * max(scale, 1e-300) or scale == 0:
        raise GeometryError("degenerate triangle")
    quad = np.vstack([v, v[2]])
    ax, ay = _bilinear_coeffs(quad)
    return QuadMap(quad, ax, ay, True)


TriMap = QuadMap


# ---------------------------------------------------------------------------
# Jacobian factors


@dataclass(frozen=True)
class RationalPoly:
    """``num(r, s) / det(r, s)**power``."""

    num: np.ndarray
    power: int

    def __call__(self, r, s, det_poly):
        return _peval(self.num, r, s) / _peval(det_poly, r, s) ** self.power


@dataclass(frozen=True)
class JacobianFactors:
    det: np.ndarray
    r_x: RationalPoly
    r_y: RationalPoly
    s_x: RationalPoly
    s_y: RationalPoly
    r_xx: RationalPoly
    r_xy: RationalPoly
    r_yy: RationalPoly
    s_xx: RationalPoly
    s_xy: RationalPoly
    s_yy: RationalPoly

    def eval(self, name, r, s):
        return getattr(self, name)(r, s, self.det)


def _dx_rational(f: RationalPoly, x, y, det, wrt):
    """Physical derivative of ``N / det**k``, returned over ``det**(k+2)``."""
    N, k = f.num, f.power
    Nr = _padd(_pmul(_pd_r(N), det), _pscale(_pmul(N, _pd_r(det)), -k))
    Ns = _padd(_pmul(_pd_s(N), det), _pscale(_pmul(N, _pd_s(det)), -k))
    if wrt == "x":
        # r_x = y_s / det, s_x = -y_r / det
        num = _padd(_pmul(_pd_s(y), Nr), -_pmul(_pd_r(y), Ns))
    else:
        # r_y = -x_s / det, s_y = x_r / det
        num = _padd(-_pmul(_pd_s(x), Nr), _pmul(_pd_r(x), Ns))
    return RationalPoly(num, k + 2)


def jacobian_factors(m: QuadMap) -> JacobianFactors:
    """Inverse-map derivatives as exact rational functions of ``(r, s)``."""
    x, y, det = m.x_poly, m.y_poly, m.det_poly
    r_x = RationalPoly(_pd_s(y), 1)
    r_y = RationalPoly(-_pd_s(x), 1)
    s_x = RationalPoly(-_pd_r(y), 1)
    s_y = RationalPoly(_pd_r(x), 1)
    return JacobianFactors(
        det, r_x, r_y, s_x, s_y,
        _dx_rational(r_x, x, y, det, "x"),
        _dx_rational(r_x, x, y, det, "y"),
        _dx_rational(r_y, x, y, det, "y"),
        _dx_rational(s_x, x, y, det, "x"),
        _dx_rational(s_x, x, y, det, "y"),
        _dx_rational(s_y, x, y, det, "y"),
    )


def _lift(f: RationalPoly, det, power=3):
    """``det**power * f`` as a plain polynomial."""
    if f.power > power:
        raise ValueError("cannot lift beyond the scaling power")
    out = np.atleast_2d(f.num)
    for _ in range(power - f.power):
        out = _pmul(out, det)
    return out


# ---------------------------------------------------------------------------
# scalar fields and PDO coefficients


@dataclass(frozen=True)
class Constant:
    value: complex

    def __call__(self, x, y):
        return np.full(np.broadcast(np.asarray(x), np.asarray(y)).shape, self.value)

    @property
    def is_zero(self) -> bool:
        return self.value == 0


@dataclass(frozen=True)
class ChebCoeffs2D:
    """``sum C[i, j] T_i(y') T_j(x')`` with ``(x', y')`` the bbox scaled to ``[-1, 1]^2``."""

    coeffs: np.ndarray
    bbox: tuple = (-1.0, 1.0, -1.0, 1.0)

    def _scaled(self, x, y):
        x0, x1, y0, y1 = self.bbox
        return (2 * np.asarray(x) - (x0 + x1)) / (x1 - x0), (2 * np.asarray(y) - (y0 + y1)) / (y1 - y0)

    def __call__(self, x, y):
        xs, ys = self._scaled(x, y)
        return C.chebval2d(ys, xs, np.atleast_2d(self.coeffs))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.coeffs)

    def deriv(self, axis: str) -> "ChebCoeffs2D":
        x0, x1, y0, y1 = self.bbox
        c = np.atleast_2d(self.coeffs)
        if axis == "x":
            d = C.chebder(c, axis=1) * (2.0 / (x1 - x0)) if c.shape[1] > 1 else np.zeros((c.shape[0], 1))
        else:
            d = C.chebder(c, axis=0) * (2.0 / (y1 - y0)) if c.shape[0] > 1 else np.zeros((1, c.shape[1]))
        return ChebCoeffs2D(d, self.bbox)


@dataclass(frozen=True)
class CallableField:
    fn: Callable

    def __call__(self, x, y):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        out = self.fn(x, y)
        return np.broadcast_to(np.asarray(out), np.broadcast(x, y).shape)

    @property
    def is_zero(self) -> bool:
        return False


ScalarField = Union[Constant, ChebCoeffs2D, CallableField]


def as_field(v) -> ScalarField:
    if isinstance(v, (Constant, ChebCoeffs2D, CallableField)):
        return v
    if v is None:
        return Constant(0.0)
    if callable(v):
        return CallableField(v)
    if np.isscalar(v):
        return Constant(v)
    raise TypeError(f"cannot interpret {type(v).__name__} as a scalar field")


def _sample_to_cheb(field: ScalarField, bbox, n=65):
    x0, x1, y0, y1 = bbox
    t = cheb_points(n)
    X, Y = np.meshgrid(x0 + (x1 - x0) * (t + 1) / 2, y0 + (y1 - y0) * (t + 1) / 2)
    return ChebCoeffs2D(cheb_coeffs2d(field(X, Y)), tuple(bbox))


def _field_deriv(field: ScalarField, axis: str, bbox) -> ScalarField:
    if isinstance(field, Constant):
        return Constant(0.0)
    if isinstance(field, CallableField):
        if bbox is None:
            raise ValueError("differentiating a callable coefficient needs a bounding box")
        field = _sample_to_cheb(field, bbox)
    return field.deriv(axis)


def _field_sum(*fields):
    fields = [f for f in fields if not f.is_zero]
    if not fields:
        return Constant(0.0)
    if len(fields) == 1:
        return fields[0]
    if all(isinstance(f, Constant) for f in fields):
        return Constant(sum(f.value for f in fields))
    return CallableField(lambda x, y, fs=tuple(fields): sum(f(x, y) for f in fs))


@dataclass(frozen=True)
class PDOCoeffs:
    """Non-divergence form ``uxx u_xx + uxy u_xy + uyy u_yy + ux u_x + uy u_y + b u``."""

    uxx: ScalarField = Constant(0.0)
    uxy: ScalarField = Constant(0.0)
    uyy: ScalarField = Constant(0.0)
    ux: ScalarField = Constant(0.0)
    uy: ScalarField = Constant(0.0)
    b: ScalarField = Constant(0.0)

    def __post_init__(self):
        for name in ("uxx", "uxy", "uyy", "ux", "uy", "b"):
            object.__setattr__(self, name, as_field(getattr(self, name)))

    @classmethod
    def laplace(cls, k2=0.0):
        """``u_xx + u_yy + k2 u``."""
        return cls(uxx=1.0, uyy=1.0, b=k2)

    @classmethod
    def from_divergence_form(cls, a11=1.0, a12=0.0, a22=1.0, b1=0.0, b2=0.0, c=0.0, bbox=None):
        """Expand ``div(A grad u) + div(b u) + c u`` with symmetric ``A``.

        Polynomial (:class:`ChebCoeffs2D`) fields are differentiated exactly;
        callables are first interpolated on ``bbox``.
        """
        a11, a12, a22, b1, b2, c = map(as_field, (a11, a12, a22, b1, b2, c))
        d = lambda f, ax: _field_deriv(f, ax, bbox)  # noqa: E731
        ux = _field_sum(d(a11, "x"), d(a12, "y"), b1)
        uy = _field_sum(d(a12, "x"), d(a22, "y"), b2)
        b = _field_sum(d(b1, "x"), d(b2, "y"), c)
        uxy = a12 if isinstance(a12, Constant) and a12.is_zero else _field_sum(a12, a12)
        return cls(a11, uxy, a22, ux, uy, b)

    def apply(self, u, x, y, h=None):
        """Apply to a callable ``u`` with derivatives ``u(x, y, dx, dy)``."""
        return (
            self.uxx(x, y) * u(x, y, 2, 0)
            + self.uxy(x, y) * u(x, y, 1, 1)
            + self.uyy(x, y) * u(x, y, 0, 2)
            + self.ux(x, y) * u(x, y, 1, 0)
            + self.uy(x, y) * u(x, y, 0, 1)
            + self.b(x, y) * u(x, y, 0, 0)
        )


REF_TERMS = ("rr", "rs", "ss", "r", "s", "1")


@dataclass(frozen=True)
class RefPDO:
    """Reference-square operator ``sum coeffs[t] * d_t u`` with Chebyshev coefficient
    matrices ``C[i, j]`` multiplying ``T_i(s) T_j(r)``, plus the rhs multiplier."""

    coeffs: dict
    rhs_scale: np.ndarray  # monomial polynomial in (r, s)
    map: QuadMap

    @property
    def degree(self) -> int:
        return max(max(c.shape) - 1 for c in self.coeffs.values())

    def rhs(self, f, tol=1e-14, max_n=513):
        """Chebyshev coefficients of ``rhs_scale * f`` on the reference square."""
        f = as_field(f)
        return _adaptive_cheb(lambda r, s: _peval(self.rhs_scale, r, s) * f(*self.map(r, s)), tol, max_n)


def _adaptive_cheb(fn, tol=1e-14, max_n=513, start=17):
    n = start
    while True:
        t = cheb_points(n)
        Rg, Sg = np.meshgrid(t, t)
        vals = fn(Rg, Sg)
        c = cheb_coeffs2d(vals)
        scale = np.abs(c).max()
        if scale == 0:
            return np.zeros((1, 1), dtype=c.dtype)
        big = np.abs(c) > tol * scale
        rows = np.nonzero(big.any(axis=1))[0][-1] + 1
        cols = np.nonzero(big.any(axis=0))[0][-1] + 1
        resolved = rows < n - 2 and cols < n - 2
        # tail check: the last few coefficients are negligible
        if resolved or n >= max_n:
            return c[:rows, :cols]
        n = 2 * n - 1


def _chain_terms(jf: JacobianFactors, x, y):
    """For each physical derivative, list of (reference term, det^3-scaled polynomial)."""
    d = jf.det
    L = lambda f: _lift(f, d)  # noqa: E731

    def prod(f, g):
        return _pmul(_pmul(f.num, g.num), _poly_pow(d, 3 - f.power - g.power))

    return {
        "uxx": [("rr", prod(jf.r_x, jf.r_x)), ("rs", 2 * prod(jf.r_x, jf.s_x)), ("ss", prod(jf.s_x, jf.s_x)),
                ("r", L(jf.r_xx)), ("s", L(jf.s_xx))],
        "uxy": [("rr", prod(jf.r_x, jf.r_y)), ("rs", _padd(prod(jf.r_x, jf.s_y), prod(jf.r_y, jf.s_x))),
                ("ss", prod(jf.s_x, jf.s_y)), ("r", L(jf.r_xy)), ("s", L(jf.s_xy))],
        "uyy": [("rr", prod(jf.r_y, jf.r_y)), ("rs", 2 * prod(jf.r_y, jf.s_y)), ("ss", prod(jf.s_y, jf.s_y)),
                ("r", L(jf.r_yy)), ("s", L(jf.s_yy))],
        "ux": [("r", L(jf.r_x)), ("s", L(jf.s_x))],
        "uy": [("r", L(jf.r_y)), ("s", L(jf.s_y))],
        "b": [("1", _poly_pow(d, 3))],
    }


def _poly_pow(a, k):
    out = np.ones((1, 1))
    for _ in range(k):
        out = _pmul(out, a)
    return out


def transform_pdo(pdo: PDOCoeffs, m: QuadMap, tol=1e-14, max_n=513) -> RefPDO:
    """Pull ``pdo`` back to the reference square, scaled to polynomial coefficients.

    Quadrilaterals are scaled by ``det(J)**3``. For triangles ``det(J)`` is
    ``c (1 - s)`` and the operator is instead scaled by ``(1 - s)**2``, i.e.
    ``det**3 / (c**3 (1 - s))``, which removes the collapsed-vertex singularity.
    The rhs multiplier is returned alongside.
    """
    jf = jacobian_factors(m)
    terms = _chain_terms(jf, m.x_poly, m.y_poly)
    rhs_scale = _poly_pow(jf.det, 3)
    if m.collapsed:
        c = jf.det[0, 0]  # det = c (1 - s)
        post = lambda poly: _pdiv_one_minus_s(poly) / c**3  # noqa: E731
        terms = {k: [(t, post(p)) for t, p in v] for k, v in terms.items()}
        rhs_scale = post(rhs_scale)
    # group by reference derivative
    groups = {t: [] for t in REF_TERMS}
    for name, contribs in terms.items():
        field = getattr(pdo, name)
        if field.is_zero:
            continue
        for t, poly in contribs:
            if np.any(np.abs(poly) > 0):
                groups[t].append((field, poly))
    coeffs = {}
    for t, items in groups.items():
        if not items:
            coeffs[t] = np.zeros((1, 1))
            continue
        if all(isinstance(f, Constant) for f, _ in items):
            poly = np.zeros((1, 1), dtype=complex if any(np.iscomplexobj(f.value) for f, _ in items) else float)
            for f, p in items:
                poly = _padd(poly, p * f.value)
            c = _monomial_to_cheb2d(poly)
        else:
            def fn(r, s, items=items):
                x, y = m(r, s)
                return sum(f(x, y) * _peval(p, r, s) for f, p in items)

            c = _adaptive_cheb(fn, tol, max_n)
        coeffs[t] = _chop2d(c, tol)
    return RefPDO(coeffs, rhs_scale, m)


def _chop2d(c, tol):
    scale = np.abs(c).max() if c.size else 0
    if scale == 0:
        return np.zeros((1, 1), dtype=c.dtype)
    big = np.abs(c) > tol * scale
    rows = np.nonzero(big.any(axis=1))[0][-1] + 1
    cols = np.nonzero(big.any(axis=0))[0][-1] + 1
    return c[:rows, :cols]


# ---------------------------------------------------------------------------
# outward normal derivative along a side


@dataclass(frozen=True)
class EdgeFlux:
    """``d/dn = alpha(t) d/dr + beta(t) d/ds`` along one side, ``t`` in ``[-1, 1]``.

    ``alpha`` and ``beta`` are ratios of univariate monomial polynomials.
    """

    alpha_num: np.ndarray
    beta_num: np.ndarray
    den: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        d = P.polyval(t, self.den)
        return P.polyval(t, self.alpha_num) / d, P.polyval(t, self.beta_num) / d

    @property
    def is_constant(self) -> bool:
        return all(np.allclose(np.asarray(a)[1:], 0, atol=0) for a in (self.alpha_num, self.beta_num, self.den))


def _restrict(poly, side):
    """Univariate monomial coefficients in ``t`` of ``poly`` on a reference side."""
    poly = np.atleast_2d(poly)
    if side in (0, 1):  # r fixed, t = s
        rv = -1.0 if side == 0 else 1.0
        return np.array([P.polyval(rv, poly[i]) for i in range(poly.shape[0])])
    sv = -1.0 if side == 2 else 1.0
    return np.array([P.polyval(sv, poly[:, j]) for j in range(poly.shape[1])])


def side_is_degenerate(m: QuadMap, side: int) -> bool:
    a, b = SIDE_VERTICES[side]
    return bool(np.all(m.vertices[a] == m.vertices[b]))


def normal_deriv_factors(m: QuadMap, side: int) -> EdgeFlux:
    """Outward unit-normal derivative in reference derivatives along ``side``.

    Sides are numbered left (``r=-1``), right (``r=1``), bottom (``s=-1``),
    top (``s=1``).
    """
    if side not in (0, 1, 2, 3):
        raise ValueError("side must be 0..3")
    if side_is_degenerate(m, side):
        raise GeometryError("side collapses to a point; it has no normal")
    v = m.vertices
    # counterclockwise traversal: bottom 0->1, right 1->2, top 2->3, left 3->0
    a, b = {0: (3, 0), 1: (1, 2), 2: (0, 1), 3: (2, 3)}[side]
    e = v[b] - v[a]
    nx, ny = e[1] / np.hypot(*e), -e[0] / np.hypot(*e)
    x, y = m.x_poly, m.y_poly
    a_num = _restrict(nx * _pd_s(y) - ny * _pd_s(x), side)
    b_num = _restrict(-nx * _pd_r(y) + ny * _pd_r(x), side)
    den = _restrict(m.det_poly, side)
    return EdgeFlux(a_num, b_num, den)
