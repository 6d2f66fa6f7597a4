import warnings

import numpy as np
import pytest
import scipy.optimize
import sympy as sym
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import chebyshev as C

from sparsesem.geometry import (CallableField, ChebCoeffs2D, Constant, GeometryError, PDOCoeffs, bilinear_map,
                                duffy_map, jacobian_factors, normal_deriv_factors, transform_pdo)

SQ = [(-1, -1), (1, -1), (1, 1), (-1, 1)]
UNIT = [(0, 0), (1, 0), (1, 1), (0, 1)]
SKEW = [(0.0, 0.0), (2.0, 0.3), (2.4, 1.7), (-0.2, 1.2)]


def random_convex_quad(rng):
    """Perturbed square; perturbations small enough to stay convex."""
    return np.array(UNIT, float) + rng.uniform(-0.2, 0.2, (4, 2))


# -- maps ---------------------------------------------------------------------------


def test_identity_map():
    m = bilinear_map(SQ)
    assert np.allclose(m.ax, [0, 1, 0, 0]) and np.allclose(m.ay, [0, 0, 1, 0])


def test_unit_square_map():
    m = bilinear_map(UNIT)
    # x = (1 + r)/2, y = (1 + s)/2, from the 4x4 corner system solved independently
    A = np.array([[1, r, s, r * s] for r, s in SQ], float)
    assert np.allclose(m.ax, np.linalg.solve(A, [0, 1, 1, 0]))
    assert np.allclose(m.ay, [0.5, 0, 0.5, 0])
    assert m.det(0.3, -0.2) == pytest.approx(0.25)


def test_rotated_square_map():
    rot = [(1, 0), (1, 1), (0, 1), (0, 0)]
    m = bilinear_map(rot)
    assert np.allclose(m.ax, [0.5, 0, -0.5, 0]) and np.allclose(m.ay, [0.5, 0.5, 0, 0])
    assert m.det(0.1, 0.7) == pytest.approx(0.25)


def test_map_reproduces_vertices():
    m = bilinear_map(SKEW)
    for (r, s), v in zip(SQ, SKEW):
        assert np.allclose(m(r, s), v, rtol=0, atol=1e-14)


@pytest.mark.parametrize("verts", [
    [(0, 0), (1, 0), (0.2, 0.2), (0, 1)],  # non-convex
    [(0, 0), (1, 0), (2, 0), (0, 1)],  # degenerate
])
def test_bad_quads_rejected(verts):
    with pytest.raises(GeometryError):
        bilinear_map(verts)


def test_clockwise_quad_reversed():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        m = bilinear_map(UNIT[::-1])
    assert w and m.det(0, 0) > 0


# -- Jacobian factors ------------------------------------------------------------------


def test_identity_factors():
    jf = jacobian_factors(bilinear_map(SQ))
    r, s = 0.2, -0.4
    assert jf.eval("r_x", r, s) == pytest.approx(1) and jf.eval("s_y", r, s) == pytest.approx(1)
    for name in ("r_y", "s_x", "r_xx", "r_xy", "r_yy", "s_xx", "s_xy", "s_yy"):
        assert jf.eval(name, r, s) == 0


def test_unit_square_factors():
    jf = jacobian_factors(bilinear_map(UNIT))
    assert jf.eval("r_x", 0.1, 0.1) == pytest.approx(2) and jf.eval("s_y", 0.1, 0.1) == pytest.approx(2)
    for name in ("r_xx", "r_xy", "r_yy", "s_xx", "s_xy", "s_yy"):
        assert jf.eval(name, 0.3, -0.5) == 0


def test_affine_second_order_factors_vanish():
    jf = jacobian_factors(bilinear_map([(0, 0), (2, 1), (3, 3), (1, 2)]))
    for name in ("r_xx", "r_xy", "r_yy", "s_xx", "s_xy", "s_yy"):
        assert not np.any(jf.__getattribute__(name).num)


def _inverse(m, x, y):
    # fsolve complains once it stalls at machine precision
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return scipy.optimize.fsolve(lambda rs: np.array(m(rs[0], rs[1])) - [x, y], [0.0, 0.0], xtol=1e-13)


def test_factors_against_finite_differences():
    m = bilinear_map(SKEW)
    jf = jacobian_factors(m)
    h = 1e-4
    for r0, s0 in [(0.1, 0.2), (-0.5, 0.4), (0.6, -0.7)]:
        x0, y0 = m(r0, s0)
        inv = lambda x, y: _inverse(m, x, y)  # noqa: E731
        d_dx = (inv(x0 + h, y0) - inv(x0 - h, y0)) / (2 * h)
        d_dy = (inv(x0, y0 + h) - inv(x0, y0 - h)) / (2 * h)
        assert jf.eval("r_x", r0, s0) == pytest.approx(d_dx[0], abs=1e-8)
        assert jf.eval("s_x", r0, s0) == pytest.approx(d_dx[1], abs=1e-8)
        assert jf.eval("r_y", r0, s0) == pytest.approx(d_dy[0], abs=1e-8)
        assert jf.eval("s_y", r0, s0) == pytest.approx(d_dy[1], abs=1e-8)
        h2 = 1e-3
        dxx = (inv(x0 + h2, y0) - 2 * inv(x0, y0) + inv(x0 - h2, y0)) / h2**2
        dyy = (inv(x0, y0 + h2) - 2 * inv(x0, y0) + inv(x0, y0 - h2)) / h2**2
        dxy = (inv(x0 + h2, y0 + h2) - inv(x0 + h2, y0 - h2) - inv(x0 - h2, y0 + h2) + inv(x0 - h2, y0 - h2)) / (4 * h2**2)
        assert jf.eval("r_xx", r0, s0) == pytest.approx(dxx[0], abs=1e-5)
        assert jf.eval("s_yy", r0, s0) == pytest.approx(dyy[1], abs=1e-5)
        assert jf.eval("r_xy", r0, s0) == pytest.approx(dxy[0], abs=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_inverse_jacobian_property(seed):
    rng = np.random.default_rng(seed)
    m = bilinear_map(random_convex_quad(rng))
    jf = jacobian_factors(m)
    r, s = rng.uniform(-1, 1, (2, 100))
    xr, xs, yr, ys = m.jacobian(r, s)
    inv = np.array([[jf.eval("r_x", r, s), jf.eval("r_y", r, s)], [jf.eval("s_x", r, s), jf.eval("s_y", r, s)]])
    fwd = np.array([[xr, xs], [yr, ys]])
    prod = np.einsum("ijn,jkn->ikn", inv, fwd)
    assert np.allclose(prod, np.eye(2)[:, :, None], atol=1e-12)


# -- PDO transformation ---------------------------------------------------------------


def _ref_apply(ref, U, r, s):
    """Apply reference operator ``ref`` to a sympy expression ``U(r, s)`` at points."""
    R, S = sym.symbols("r s")
    d = {"rr": sym.diff(U, R, 2), "rs": sym.diff(U, R, S), "ss": sym.diff(U, S, 2), "r": sym.diff(U, R),
         "s": sym.diff(U, S), "1": U}
    out = 0
    for t, expr in d.items():
        f = sym.lambdify((R, S), expr, "numpy")
        out = out + C.chebval2d(s, r, ref.coeffs[t]) * f(r, s)
    return out


def test_laplace_identity_map_unchanged():
    ref = transform_pdo(PDOCoeffs.laplace(), bilinear_map(SQ))
    assert np.allclose(ref.coeffs["rr"], [[1]]) and np.allclose(ref.coeffs["ss"], [[1]])
    assert not np.any(ref.coeffs["rs"]) and not np.any(ref.coeffs["1"])
    assert ref.rhs_scale[0, 0] == 1 and np.count_nonzero(ref.rhs_scale) == 1


def test_laplace_unit_square():
    ref = transform_pdo(PDOCoeffs.laplace(), bilinear_map(UNIT))
    # (4 u_rr + 4 u_ss) * (1/4)^3
    assert np.allclose(ref.coeffs["rr"], [[1 / 16]]) and np.allclose(ref.coeffs["ss"], [[1 / 16]])
    assert ref.rhs_scale[0, 0] == pytest.approx(1 / 64) and np.count_nonzero(ref.rhs_scale) == 1


def test_constant_coefficient_degree_bound():
    pdo = PDOCoeffs(uxx=1.0, uxy=0.3, uyy=2.0, ux=0.5, uy=-1.0, b=3.0)
    ref = transform_pdo(pdo, bilinear_map(SKEW))
    for c in ref.coeffs.values():
        assert c.shape[0] <= 4 and c.shape[1] <= 4


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_transform_polynomial_exactness(seed):
    rng = np.random.default_rng(seed)
    verts = random_convex_quad(rng)
    m = bilinear_map(verts)
    a = rng.standard_normal(6)
    pdo = PDOCoeffs(uxx=a[0], uxy=a[1], uyy=a[2], ux=a[3], uy=a[4], b=a[5])
    ref = transform_pdo(pdo, m)
    X, Y, R, S = sym.symbols("x y r s")
    cu = rng.standard_normal((5, 5))
    u = sum(cu[i, j] * X**i * Y**j for i in range(5) for j in range(5 - i))
    Lu = a[0] * sym.diff(u, X, 2) + a[1] * sym.diff(u, X, Y) + a[2] * sym.diff(u, Y, 2) + a[3] * sym.diff(u, X) \
        + a[4] * sym.diff(u, Y) + a[5] * u
    xm = m.ax[0] + m.ax[1] * R + m.ax[2] * S + m.ax[3] * R * S
    ym = m.ay[0] + m.ay[1] * R + m.ay[2] * S + m.ay[3] * R * S
    U = u.subs({X: xm, Y: ym}, simultaneous=True)
    r, s = rng.uniform(-1, 1, (2, 25))
    det = m.det(r, s)
    phys = sym.lambdify((X, Y), Lu, "numpy")(*m(r, s)) * det**3
    assert np.allclose(_ref_apply(ref, U, r, s), phys, atol=1e-10 * max(1.0, np.abs(phys).max()))


def test_variable_coefficient_degree_bound():
    # degree-m coefficient: transformed degrees stay within m + 3 per variable
    c = np.zeros((3, 3))
    c[2, 1] = 1.0
    pdo = PDOCoeffs(uxx=ChebCoeffs2D(c, (-1, 3, -1, 3)), uyy=1.0)
    ref = transform_pdo(pdo, bilinear_map(SKEW))
    for k in ("rr", "ss", "rs"):
        big = np.argwhere(np.abs(ref.coeffs[k]) > 1e-13)
        assert big[:, 0].max() <= 2 + 3 + 1 and big[:, 1].max() <= 2 + 3 + 1


def test_callable_coefficients_are_sampled():
    pdo = PDOCoeffs(uxx=1.0, uyy=1.0, b=CallableField(lambda x, y: np.sin(x * y)))
    ref = transform_pdo(pdo, bilinear_map(UNIT))
    r, s = 0.3, -0.6
    x, y = bilinear_map(UNIT)(r, s)
    assert C.chebval2d(s, r, ref.coeffs["1"]) == pytest.approx(np.sin(x * y) / 64, abs=1e-14)


# -- triangles ------------------------------------------------------------------------


def test_duffy_reference_triangle():
    m = duffy_map([(0, 0), (1, 0), (0, 1)])
    assert np.allclose(m(-1, -1), (0, 0))
    assert np.allclose(m(1, -1), (1, 0))
    assert np.allclose(m(1, 1), (0, 1)) and np.allclose(m(-1, 1), (0, 1))
    r, s = 0.2, -0.3
    assert m(r, s)[0] == pytest.approx(0.25 * (1 + r) * (1 - s))


def test_duffy_affine_scaling():
    m1 = duffy_map([(0, 0), (1, 0), (0, 1)])
    m2 = duffy_map([(0, 0), (2, 0), (0, 2)])
    r, s = np.random.default_rng(0).uniform(-1, 1, (2, 10))
    assert np.allclose(np.array(m2(r, s)), 2 * np.array(m1(r, s)))


def test_degenerate_triangle():
    with pytest.raises(GeometryError):
        duffy_map([(0, 0), (1, 1), (2, 2)])


def test_triangle_transform_is_polynomial():
    m = duffy_map([(0, 0), (1, 0), (0, 1)])
    ref = transform_pdo(PDOCoeffs.laplace(), m)
    for c in ref.coeffs.values():
        assert np.all(np.isfinite(c)) and max(c.shape) <= 6


# -- normal derivatives -------------------------------------------------------------------


def test_identity_left_normal():
    fl = normal_deriv_factors(bilinear_map(SQ), 0)
    a, b = fl(np.linspace(-1, 1, 5))
    assert np.allclose(a, -1) and np.allclose(b, 0)


def test_unit_square_right_normal():
    a, b = normal_deriv_factors(bilinear_map(UNIT), 1)(0.3)
    assert a == pytest.approx(2) and b == pytest.approx(0)


@pytest.mark.parametrize("side", [0, 1, 2, 3])
def test_normal_derivative_against_chain_rule(side):
    m = bilinear_map(SKEW)
    # gradient of u = x^3 - 2 x y + y^2
    du = lambda x, y: np.array([3 * x**2 - 2 * y, -2 * x + 2 * y])  # noqa: E731
    t = 0.35
    r, s = {0: (-1, t), 1: (1, t), 2: (t, -1), 3: (t, 1)}[side]
    a, b = normal_deriv_factors(m, side)(t)
    # reference derivatives by the forward chain rule
    xr, xs, yr, ys = m.jacobian(r, s)
    g = du(*m(r, s))
    ur, us = g @ [xr, yr], g @ [xs, ys]
    # true outward unit normal of the straight side
    v = m.vertices
    p0, p1 = {0: (v[3], v[0]), 1: (v[1], v[2]), 2: (v[0], v[1]), 3: (v[2], v[3])}[side]
    e = p1 - p0
    nrm = np.array([e[1], -e[0]]) / np.hypot(*e)
    assert a * ur + b * us == pytest.approx(du(*m(r, s)) @ nrm, abs=1e-12)


def test_collapsed_side_has_no_normal():
    with pytest.raises(GeometryError):
        normal_deriv_factors(duffy_map([(0, 0), (1, 0), (0, 1)]), 3)


def test_fields():
    assert Constant(2.0)(np.zeros(3), np.zeros(3)).shape == (3,)
    assert PDOCoeffs.laplace(4.0).b.value == 4.0
