"""One-dimensional ultraspherical toolkit.

Sparse differentiation, conversion and multiplication operators acting on
Chebyshev / ultraspherical coefficient vectors, Chebyshev transforms, and an
almost-banded linear solver built on a banded LU factorization plus a
Woodbury low-rank correction.

Conventions
-----------
Coefficient vectors are indexed by polynomial degree. ``C^(0)`` is used as a
shorthand for the Chebyshev ``T`` basis, so every operator here takes a basis
*level*: 0 for Chebyshev, ``lam >= 1`` for ``C^(lam)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.fft
import scipy.linalg
import scipy.sparse as sp
from scipy.linalg import lapack

__all__ = [
    "BasisTag",
    "CHEBYSHEV",
    "CoeffVec",
    "BandedOp",
    "AlmostBandedOp",
    "OdeSpec",
    "SingularOperatorError",
    "ultraspherical",
    "diff_op",
    "conv_op",
    "conv_chain",
    "jacobi_op",
    "mult_op",
    "cheb_points",
    "cheb_points_first_kind",
    "cheb_coeffs",
    "cheb_coeffs_first_kind",
    "cheb_values",
    "cheb_coeffs2d",
    "chop",
    "eval_row",
    "clenshaw_eval",
    "ultraspherical_eval",
    "WoodburySolver",
    "factorize",
    "solve_almost_banded",
    "assemble_ode",
]


class SingularOperatorError(np.linalg.LinAlgError):
    """Raised when a banded factor or a capacitance matrix is singular."""


@dataclass(frozen=True)
class BasisTag:
    """Basis level: 0 is Chebyshev ``T``, ``lam >= 1`` is ultraspherical ``C^(lam)``."""

    level: int = 0

    def __post_init__(self):
        if self.level < 0:
            raise ValueError(f"basis level must be >= 0, got {self.level}")

    @property
    def is_chebyshev(self) -> bool:
        return self.level == 0

    def __repr__(self):
        return "ChebyshevT" if self.level == 0 else f"Ultraspherical({self.level})"


CHEBYSHEV = BasisTag(0)


def ultraspherical(lam: int) -> BasisTag:
    if lam < 1:
        raise ValueError("ultraspherical parameter must be a positive integer")
    return BasisTag(lam)


@dataclass(frozen=True)
class CoeffVec:
    """Coefficients of a univariate polynomial in a tagged basis."""

    coeffs: np.ndarray
    basis: BasisTag = CHEBYSHEV

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.coeffs))
        if c.ndim != 1 or c.size < 1:
            raise ValueError("CoeffVec needs a non-empty 1-D coefficient array")
        if not np.all(np.isfinite(c)):
            raise ValueError("CoeffVec coefficients must be finite")
        c = c.copy()
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self) -> int:
        return self.coeffs.size - 1

    def __len__(self):
        return self.coeffs.size

    def __call__(self, x):
        if self.basis.is_chebyshev:
            return clenshaw_eval(self, x)
        return ultraspherical_eval(self.coeffs, self.basis.level, x)


@dataclass(frozen=True)
class BandedOp:
    """Square banded operator stored by diagonals.

    ``data[ku + i - j, j]`` holds entry ``(i, j)``, the LAPACK ``gbsv``
    layout without the extra fill rows.
    """

    data: np.ndarray
    kl: int
    ku: int
    basis_in: BasisTag = CHEBYSHEV
    basis_out: BasisTag = CHEBYSHEV

    @property
    def n(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return (self.n, self.n)

    @property
    def bandwidth(self) -> int:
        return max(self.kl, self.ku)

    @classmethod
    def from_sparse(cls, mat, basis_in=CHEBYSHEV, basis_out=CHEBYSHEV, kl=None, ku=None):
        coo = sp.coo_matrix(mat)
        coo.sum_duplicates()
        keep = coo.data != 0
        rows, cols, vals = coo.row[keep], coo.col[keep], coo.data[keep]
        n = mat.shape[0]
        if mat.shape[0] != mat.shape[1]:
            raise ValueError("BandedOp must be square")
        offs = rows - cols
        if kl is None:
            kl = int(max(offs.max(initial=0), 0))
        if ku is None:
            ku = int(max(-offs.min(initial=0), 0))
        if n > 0 and (kl >= n or ku >= n) and n > 1:
            kl, ku = min(kl, n - 1), min(ku, n - 1)
        data = np.zeros((kl + ku + 1, n), dtype=np.result_type(vals.dtype, float))
        data[ku + rows - cols, cols] = vals
        return cls(data, kl, ku, basis_in, basis_out)

    def to_sparse(self) -> sp.csr_matrix:
        n = self.n
        offsets = [self.ku - r for r in range(self.data.shape[0])]
        diags = []
        for r, k in enumerate(offsets):
            if k >= 0:
                diags.append(self.data[r, k:])
            else:
                diags.append(self.data[r, : n + k])
        return sp.diags(diags, offsets, shape=(n, n), format="csr")

    def todense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def matvec(self, x):
        return self.to_sparse() @ x

    @property
    def nnz_stored(self) -> int:
        """Number of stored (in-band) slots."""
        n = self.n
        return sum(n - abs(self.ku - r) for r in range(self.data.shape[0]))


@dataclass(frozen=True)
class AlmostBandedOp:
    """Operator ``A + U C V^T`` with ``A`` banded and a rank-``k`` correction.

    Boundary-bordered systems are stored with the dense rows placed first and
    an identity placeholder on those rows of ``A``; ``U`` selects the placeholder
    rows and ``V^T`` holds the dense rows minus the placeholder.
    """

    A: BandedOp
    U: np.ndarray
    C: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        n, k = self.A.n, self.U.shape[1]
        if self.U.shape != (n, k) or self.V.shape != (n, k) or self.C.shape != (k, k):
            raise ValueError("inconsistent low-rank correction shapes")

    @property
    def n(self) -> int:
        return self.A.n

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def dtype(self):
        return np.result_type(self.A.data, self.U, self.C, self.V)

    def matvec(self, x):
        x = np.asarray(x)
        return self.A.matvec(x) + self.U @ (self.C @ (self.V.T @ x))

    def todense(self) -> np.ndarray:
        return self.A.todense() + self.U @ self.C @ self.V.T

    @classmethod
    def bordered(cls, banded_rows, dense_rows, positions, basis_in=CHEBYSHEV, basis_out=CHEBYSHEV):
        """Build ``L`` whose rows at ``positions`` are ``dense_rows``.

        ``banded_rows`` is an ``n x n`` sparse matrix whose rows at ``positions``
        are ignored; an identity placeholder takes their place inside ``A``.
        """
        banded_rows = sp.csr_matrix(banded_rows)
        n = banded_rows.shape[0]
        positions = np.asarray(positions, dtype=int)
        k = positions.size
        keep = np.ones(n, dtype=bool)
        keep[positions] = False
        mask = sp.diags(keep.astype(float))
        placeholder = sp.csr_matrix((np.ones(k), (positions, positions)), shape=(n, n))
        A = BandedOp.from_sparse(mask @ banded_rows + placeholder, basis_in, basis_out)
        dense_rows = np.asarray(dense_rows)
        U = np.zeros((n, k))
        U[positions, np.arange(k)] = 1.0
        Vt = dense_rows.astype(np.result_type(dense_rows, float), copy=True)
        Vt[np.arange(k), positions] -= 1.0
        return cls(A, U, np.eye(k), Vt.T.copy())


@dataclass(frozen=True)
class OdeSpec:
    """Linear ODE ``sum_l a_l(x) u^(l) = f`` with ``M`` boundary rows ``B u = g``."""

    coeffs: Sequence[CoeffVec]
    boundary_rows: np.ndarray
    boundary_values: np.ndarray
    rhs: CoeffVec

    @property
    def order(self) -> int:
        return len(self.coeffs) - 1

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("ODE order M must be >= 1")
        B = np.atleast_2d(np.asarray(self.boundary_rows))
        g = np.atleast_1d(np.asarray(self.boundary_values))
        if B.shape[0] != self.order:
            raise ValueError(f"expected {self.order} boundary rows, got {B.shape[0]}")
        if g.size != self.order:
            raise ValueError(f"expected {self.order} boundary values, got {g.size}")
        object.__setattr__(self, "boundary_rows", B)
        object.__setattr__(self, "boundary_values", g)


# ---------------------------------------------------------------------------
# sparse operators


def diff_op(lam: int, n: int) -> BandedOp:
    """Differentiation ``T -> C^(lam)`` of order ``lam`` (identity for ``lam = 0``)."""
    if n < 1:
        raise ValueError("operator size must be >= 1")
    if lam < 0:
        raise ValueError("derivative order must be >= 0")
    if lam == 0:
        return BandedOp(np.ones((1, n)), 0, 0, CHEBYSHEV, CHEBYSHEV)
    scale = 2.0 ** (lam - 1) * math.factorial(lam - 1)
    ku = min(lam, n - 1)
    data = np.zeros((ku + 1, n))
    if lam <= n - 1:
        # row 0 of data is the lam-th superdiagonal: entry (j - lam, j) for j >= lam
        data[0, lam:] = scale * np.arange(lam, n)
    return BandedOp(data, 0, ku, CHEBYSHEV, BasisTag(lam))


def conv_op(lam: int, n: int) -> BandedOp:
    """Conversion ``C^(lam) -> C^(lam+1)`` (``T -> C^(1)`` when ``lam = 0``)."""
    if n < 1:
        raise ValueError("operator size must be >= 1")
    j = np.arange(n, dtype=float)
    if lam == 0:
        diag = np.full(n, 0.5)
        diag[0] = 1.0
        sup = np.full(n, -0.5)
    else:
        diag = lam / (lam + j)
        sup = -lam / (lam + j)
    ku = min(2, n - 1)
    data = np.zeros((ku + 1, n))
    data[ku] = diag
    if n > 2:
        # superdiagonal 2 holds entry (j - 2, j) for j >= 2
        data[0, 2:] = sup[2:]
    return BandedOp(data, 0, ku, BasisTag(lam), BasisTag(lam + 1))


def conv_chain(lam_from: int, lam_to: int, n: int) -> sp.csr_matrix:
    """Sparse product ``S_{to-1} ... S_{from}`` (identity when equal)."""
    if lam_to < lam_from:
        raise ValueError("conversion only goes up in basis level")
    out = sp.identity(n, format="csr")
    for lam in range(lam_from, lam_to):
        out = conv_op(lam, n).to_sparse() @ out
    return out


def jacobi_op(lam: int, n: int) -> sp.csr_matrix:
    """Multiplication by ``x`` on ``C^(lam)`` coefficients (``T`` when ``lam = 0``)."""
    k = np.arange(n, dtype=float)
    if lam == 0:
        up = np.full(n - 1, 0.5)  # x T_k contributes 1/2 T_{k+1}
        up[0] = 1.0
        down = np.full(n - 1, 0.5)  # and 1/2 T_{k-1}
    else:
        # x C_k = ((k+1) C_{k+1} + (k + 2 lam - 1) C_{k-1}) / (2 (k + lam))
        up = (k[:-1] + 1) / (2 * (k[:-1] + lam))
        down = (k[1:] + 2 * lam - 1) / (2 * (k[1:] + lam))
    # column k: entry (k+1, k) = up[k], entry (k-1, k) = down[k-1]
    return sp.diags([up, down], [-1, 1], shape=(n, n), format="csr")


def _three_term(level: int):
    """Recurrence ``P_{k+1} = (a_k x) P_k - c_k P_{k-1}`` and ``P_1 = a0 x``."""
    if level == 0:
        return (lambda k: 1.0 if k == 0 else 2.0), (lambda k: 1.0)
    lam = level
    return (lambda k: 2.0 * (k + lam) / (k + 1)), (lambda k: (k + 2 * lam - 1) / (k + 1))


def mult_op(a: CoeffVec, n: int, lam: int = 0) -> BandedOp:
    """Multiplication by ``a(x)`` on ``C^(lam)`` coefficient vectors of length ``n``.

    ``a`` may be given in any basis; it is evaluated as a matrix polynomial in
    the Jacobi operator of level ``lam``. The matrices are built at padded size
    so the returned ``n x n`` block is the exact truncation.
    """
    if not isinstance(a, CoeffVec):
        a = CoeffVec(np.asarray(a))
    m = a.degree
    if n < 1:
        raise ValueError("operator size must be >= 1")
    c = a.coeffs
    tag = BasisTag(lam)
    if m == 0 or not np.any(c[1:]):
        return BandedOp(np.full((1, n), c[0], dtype=np.result_type(c, float)), 0, 0, tag, tag)
    N = n + m + 2
    J = jacobi_op(lam, N)
    alpha, gamma = _three_term(a.basis.level)
    I = sp.identity(N, format="csr")
    prev, cur = I, alpha(0) * J
    if a.basis.level > 0:
        cur = 2.0 * a.basis.level * J
    total = c[0] * I + c[1] * cur
    for k in range(1, m):
        nxt = alpha(k) * (J @ cur) - gamma(k) * prev
        prev, cur = cur, nxt
        total = total + c[k + 1] * cur
    total = sp.csr_matrix(total)[:n, :n]
    bw = min(m, n - 1)
    return BandedOp.from_sparse(total, tag, tag, kl=bw, ku=bw)


# ---------------------------------------------------------------------------
# transforms and evaluation


def cheb_points(n: int) -> np.ndarray:
    """Chebyshev points of the second kind on [-1, 1], ascending."""
    if n == 1:
        return np.zeros(1)
    return -np.cos(np.pi * np.arange(n) / (n - 1))


def cheb_points_first_kind(n: int) -> np.ndarray:
    """Chebyshev points of the first kind (roots of ``T_n``), ascending."""
    return -np.cos(np.pi * (np.arange(n) + 0.5) / n)


def cheb_coeffs(values) -> np.ndarray:
    """Chebyshev coefficients of the interpolant through values at :func:`cheb_points`.

    Works along the last axis; DCT-I based, ``O(n log n)``.
    """
    v = np.asarray(values)
    n = v.shape[-1]
    if n == 1:
        return v.astype(np.result_type(v, float)).copy()
    v = v[..., ::-1]  # cos(pi k/(n-1)) ordering
    if np.iscomplexobj(v):
        c = scipy.fft.dct(v.real, type=1, axis=-1) + 1j * scipy.fft.dct(v.imag, type=1, axis=-1)
    else:
        c = scipy.fft.dct(v, type=1, axis=-1)
    c = c / (n - 1)
    c[..., 0] /= 2
    c[..., -1] /= 2
    return c


def cheb_coeffs_first_kind(values) -> np.ndarray:
    """Chebyshev coefficients from values at :func:`cheb_points_first_kind` (last axis)."""
    v = np.asarray(values)
    n = v.shape[-1]
    v = v[..., ::-1]
    if np.iscomplexobj(v):
        c = scipy.fft.dct(v.real, type=2, axis=-1) + 1j * scipy.fft.dct(v.imag, type=2, axis=-1)
    else:
        c = scipy.fft.dct(v, type=2, axis=-1)
    c = c / n
    c[..., 0] /= 2
    return c


def cheb_values(coeffs, n: int | None = None) -> np.ndarray:
    """Values at ``n`` second-kind points of the Chebyshev series (last axis)."""
    c = np.asarray(coeffs)
    if n is None:
        n = c.shape[-1]
    x = cheb_points(n)
    return np.polynomial.chebyshev.chebval(x, np.moveaxis(c, -1, 0))


def cheb_coeffs2d(values) -> np.ndarray:
    """2-D transform; ``values[i, j]`` sampled at ``(x_j, y_i)`` on second-kind grids."""
    return cheb_coeffs(cheb_coeffs(values).swapaxes(-1, -2)).swapaxes(-1, -2)


def chop(coeffs, tol: float = 1e-14) -> np.ndarray:
    """Drop trailing coefficients below ``tol`` relative to the largest one."""
    c = np.asarray(coeffs)
    scale = np.max(np.abs(c)) if c.size else 0.0
    if scale == 0:
        return c[:1]
    big = np.nonzero(np.abs(c) > tol * scale)[0]
    return c[: big[-1] + 1]


def eval_row(endpoint: int, deriv: int, n: int) -> np.ndarray:
    """Endpoint evaluation row ``B_{+-1}`` (``deriv=0``) or outward derivative row ``D_{+-1}``.

    ``D_{+-1} = +-[T_j'(+-1)]`` with ``T_j'(+-1) = (+-1)^(j+1) j^2``.
    """
    if endpoint not in (-1, 1):
        raise ValueError("endpoint must be -1 or +1")
    j = np.arange(n)
    sign = float(endpoint) ** j
    if deriv == 0:
        return sign
    if deriv == 1:
        return endpoint * (endpoint * sign * j**2)
    raise ValueError("deriv must be 0 or 1")


def deriv_row(endpoint: int, n: int) -> np.ndarray:
    """Plain derivative evaluation row ``[T_j'(endpoint)]``."""
    j = np.arange(n)
    return float(endpoint) ** (j + 1) * j**2


def clenshaw_eval(c, x):
    """Evaluate ``sum_j c_j T_j(x)`` by Clenshaw's backward recurrence."""
    if isinstance(c, CoeffVec):
        if not c.basis.is_chebyshev:
            raise ValueError("clenshaw_eval needs Chebyshev coefficients")
        c = c.coeffs
    c = np.asarray(c)
    x = np.asarray(x)
    b1 = np.zeros(np.broadcast(x, c[0]).shape, dtype=np.result_type(c, x, float))
    b2 = np.zeros_like(b1)
    for ck in c[:0:-1]:
        b1, b2 = 2 * x * b1 - b2 + ck, b1
    return x * b1 - b2 + c[0]


def ultraspherical_eval(c, lam: int, x):
    """Evaluate ``sum_j c_j C^(lam)_j(x)`` via the three-term recurrence."""
    c = np.asarray(c)
    x = np.asarray(x, dtype=float)
    if lam == 0:
        return clenshaw_eval(c, x)
    p_prev = np.ones_like(x)
    total = c[0] * p_prev
    if c.size == 1:
        return total
    p_cur = 2 * lam * x
    total = total + c[1] * p_cur
    for k in range(1, c.size - 1):
        p_next = (2 * (k + lam) * x * p_cur - (k + 2 * lam - 1) * p_prev) / (k + 1)
        p_prev, p_cur = p_cur, p_next
        total = total + c[k + 1] * p_cur
    return total


# ---------------------------------------------------------------------------
# almost-banded solver


_gbtrf = {np.dtype(float): lapack.dgbtrf, np.dtype(complex): lapack.zgbtrf}
_gbtrs = {np.dtype(float): lapack.dgbtrs, np.dtype(complex): lapack.zgbtrs}


class WoodburySolver:
    """Reusable factorization of an :class:`AlmostBandedOp`.

    The banded part is LU-factorized once (LAPACK ``gbtrf``); the correction is
    handled by the Woodbury identity with a dense capacitance matrix
    ``C^-1 + V^T A^-1 U``.
    """

    def __init__(self, op: AlmostBandedOp, refine: int = 1, cond_limit: float = 1e14):
        self.op = op
        self.refine = refine
        self.dtype = np.dtype(complex) if np.iscomplexobj(np.empty(0, op.dtype)) else np.dtype(float)
        A = op.A
        kl, ku = A.kl, A.ku
        ab = np.zeros((2 * kl + ku + 1, A.n), dtype=self.dtype)
        ab[kl:] = A.data
        self._lub, self._piv, info = _gbtrf[self.dtype](ab, kl, ku)
        if info > 0:
            raise SingularOperatorError(f"banded factor is singular (zero pivot at {info - 1})")
        if info < 0:
            raise ValueError(f"illegal argument to gbtrf: {-info}")
        self._kl, self._ku = kl, ku
        self._Z = self._banded_solve(op.U) if op.rank else np.zeros((A.n, 0), self.dtype)
        if op.rank:
            cap = np.linalg.inv(op.C) + op.V.T @ self._Z
            if np.linalg.cond(cap) > cond_limit:
                raise SingularOperatorError("capacitance matrix C^-1 + V^T A^-1 U is singular")
            self._cap = scipy.linalg.lu_factor(cap)

    def _banded_solve(self, B):
        B = np.asarray(B, dtype=np.result_type(B, self.dtype))
        if B.dtype != self.dtype:
            # real factorization applied to complex data: split parts
            return self._banded_solve(B.real) + 1j * self._banded_solve(B.imag)
        x, info = _gbtrs[self.dtype](self._lub, self._kl, self._ku, B, self._piv)
        if info != 0:
            raise ValueError(f"gbtrs failed with info={info}")
        return x

    def _solve_once(self, B):
        y = self._banded_solve(B)
        if self.op.rank == 0:
            return y
        w = scipy.linalg.lu_solve(self._cap, self.op.V.T @ y)
        return y - self._Z @ w

    def solve(self, B) -> np.ndarray:
        B = np.asarray(B)
        vec = B.ndim == 1
        if vec:
            B = B[:, None]
        X = self._solve_once(B)
        for _ in range(self.refine):
            X = X + self._solve_once(B - self.op.matvec(X))
        return X[:, 0] if vec else X

    def solve_boundary(self, W) -> np.ndarray:
        """Solve with a rhs supported only on the dense rows, ``B = U W``.

        Uses ``A^-1 U`` already computed during factorization.
        """
        if self.refine:
            return self.solve(self.op.U @ W)
        return self._Z @ scipy.linalg.lu_solve(self._cap, W)


def factorize(op: AlmostBandedOp, refine: int = 1) -> WoodburySolver:
    return WoodburySolver(op, refine=refine)


def solve_almost_banded(op: AlmostBandedOp, B) -> np.ndarray:
    """Solve ``L X = B`` without forming ``L`` densely."""
    return WoodburySolver(op).solve(B)


# ---------------------------------------------------------------------------
# ODE assembly


def _ode_operator(coeffs: Sequence[CoeffVec], n: int, tol: float = 1e-14) -> sp.csr_matrix:
    """Banded ``M_M[a_M] D_M + sum_l S_{M-1}..S_l M_l[a_l] D_l`` as an exact n x n block."""
    M = len(coeffs) - 1
    mmax = max(chop(a.coeffs, tol).size for a in coeffs)
    N = n + mmax + 2 * M + 2
    total = sp.csr_matrix((N, N))
    for lam, a in enumerate(coeffs):
        a = CoeffVec(chop(a.coeffs, tol), a.basis)
        if not np.any(a.coeffs):
            continue
        term = mult_op(a, N, lam).to_sparse() @ diff_op(lam, N).to_sparse()
        total = total + conv_chain(lam, M, N) @ term
    return sp.csr_matrix(total)[:n, :n]


def assemble_ode(spec: OdeSpec, p: int):
    """Bordered almost-banded system for ``spec`` at polynomial order ``p``.

    Returns ``(L, rhs)``. Row layout: the ``M`` boundary rows come first,
    followed by operator rows ``0..p-M``; this is a row permutation of
    replacing the trailing ``M`` rows and keeps ``A`` banded about the diagonal.
    Accuracy is not guaranteed when coefficient degrees approach ``p``.
    """
    n = p + 1
    M = spec.order
    if spec.boundary_rows.shape[1] != n:
        raise ValueError(f"boundary rows have length {spec.boundary_rows.shape[1]}, expected {n}")
    if n <= M:
        raise ValueError("order p must exceed the ODE order")
    op = _ode_operator(spec.coeffs, n)
    # operator row l goes to position l + M so that D_M lands on the diagonal
    shift = sp.eye(n, n, k=-M, format="csr")
    banded = shift @ op
    L = AlmostBandedOp.bordered(banded, spec.boundary_rows, np.arange(M), CHEBYSHEV, BasisTag(M))
    f = np.zeros(max(n + 2 * M, len(spec.rhs)), dtype=np.result_type(spec.rhs.coeffs, float))
    f[: len(spec.rhs)] = spec.rhs.coeffs
    f_conv = conv_chain(0, M, f.size) @ f
    rhs = np.concatenate([spec.boundary_values.astype(np.result_type(spec.boundary_values, f_conv)), f_conv[: n - M]])
    return L, rhs
