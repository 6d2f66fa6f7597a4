"""Element-level discretization on the reference square.

A solution on an element is stored as a coefficient matrix ``X`` with
``u(r, s) = sum X[i, j] T_i(s) T_j(r)``; flattened in C order so that
``vec(A X B^T) = kron(A, B) vec(X)``. Operators act in the ``y`` (``s``)
direction through the left Kronecker factor and in the ``x`` (``r``) direction
through the right one.

Boundary data for the four sides is ordered left (``r=-1``), right (``r=1``),
bottom (``s=-1``), top (``s=1``); each side carries ``p+1`` Chebyshev
coefficients in its increasing-parameter direction.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.polynomial import chebyshev as C

from . import chebkit as ck
from .geometry import QuadMap, RefPDO, normal_deriv_factors, side_is_degenerate

__all__ = [
    "LeafSingularError",
    "SeparableRankError",
    "CompatProjector",
    "compat_projector",
    "separable_decompose",
    "LeafSystem",
    "assemble_leaf",
    "LeafFactor",
    "SolutionOperator",
    "build_solution_operator",
    "normal_deriv_matrix",
    "dtn_operator",
    "trace_matrix",
]

# derivative orders (in s, in r) of each reference term
TERM_ORDERS = {"rr": (0, 2), "rs": (1, 1), "ss": (2, 0), "r": (0, 1), "s": (1, 0), "1": (0, 0)}


class LeafSingularError(np.linalg.LinAlgError):
    """The bordered leaf system is singular (for example an element resonance)."""


class SeparableRankError(ValueError):
    """A coefficient needs more separable terms than the configured cap."""


# ---------------------------------------------------------------------------
# compatibility projector


@dataclass(frozen=True)
class CompatProjector:
    """Orthogonal projector onto side data that agrees at the four corners."""

    p: int
    B: np.ndarray  # 4 x 4(p+1) corner mismatch matrix
    Vt: np.ndarray  # 4(p+1) x (4(p+1) - 4), orthonormal basis of null(B)

    @property
    def P(self) -> np.ndarray:
        return self.Vt @ self.Vt.T

    def apply(self, c):
        return self.Vt @ (self.Vt.T @ c)


def corner_matrix(p: int) -> np.ndarray:
    n = p + 1
    Bm, Bp = ck.eval_row(-1, 0, n), ck.eval_row(1, 0, n)
    Z = np.zeros(n)
    return np.array(
        [
            np.concatenate([Bm, Z, -Bm, Z]),  # (-1,-1): left start vs bottom start
            np.concatenate([Bp, Z, Z, -Bm]),  # (-1, 1): left end vs top start
            np.concatenate([Z, Bm, -Bp, Z]),  # ( 1,-1): right start vs bottom end
            np.concatenate([Z, Bp, Z, -Bp]),  # ( 1, 1): right end vs top end
        ]
    )


@functools.lru_cache(maxsize=64)
def compat_projector(p: int) -> CompatProjector:
    if p < 0:
        raise ValueError("p must be >= 0")
    B = corner_matrix(p)
    # B has full row rank 4; its null space is spanned by the trailing right singular vectors
    _, _, Vh = np.linalg.svd(B)
    Vt = Vh[4:].T.copy()
    Vt.flags.writeable = False
    B.flags.writeable = False
    return CompatProjector(p, B, Vt)


# ---------------------------------------------------------------------------
# separable assembly


def separable_decompose(coeff2d, tol: float = 1e-14, max_rank: int = 30):
    """Split ``sum C[i, j] T_i(y) T_j(x)`` into rank-one ``(y_coeffs, x_coeffs)`` terms.

    Singular values below ``tol`` times the largest are dropped.
    """
    c = np.atleast_2d(np.asarray(coeff2d))
    if not np.any(c):
        return []
    if c.shape[0] == 1 or c.shape[1] == 1:
        # already rank one
        if c.shape[0] == 1:
            return [(np.array([1.0]), c[0].copy())]
        return [(c[:, 0].copy(), np.array([1.0]))]
    U, s, Vh = np.linalg.svd(c, full_matrices=False)
    k = int(np.sum(s > tol * s[0]))
    if k > max_rank:
        raise SeparableRankError(f"coefficient needs {k} separable terms (cap {max_rank}); is it smooth?")
    return [(U[:, q] * s[q], Vh[q].copy()) for q in range(k)]


def _op1d(coeffs, deriv: int, n_rows: int, n_cols: int, pad: int) -> sp.csr_matrix:
    """``S_{2<-deriv} M_deriv[a] D_deriv`` cut to ``n_rows x n_cols`` (exact truncation)."""
    N = n_cols + pad
    a = ck.CoeffVec(ck.chop(np.asarray(coeffs)))
    M = ck.mult_op(a, N, deriv).to_sparse()
    D = ck.diff_op(deriv, N).to_sparse()
    S = ck.conv_chain(deriv, 2, N)
    return sp.csr_matrix(S @ M @ D)[:n_rows, :n_cols]


def trace_matrix(p: int) -> sp.csr_matrix:
    """Side traces ``[left; right; bottom; top]`` of a coefficient matrix, ``4n x n^2``."""
    n = p + 1
    I = sp.identity(n, format="csr")
    Bm = sp.csr_matrix(ck.eval_row(-1, 0, n)[None, :])
    Bp = sp.csr_matrix(ck.eval_row(1, 0, n)[None, :])
    return sp.vstack([sp.kron(I, Bm), sp.kron(I, Bp), sp.kron(Bm, I), sp.kron(Bp, I)], format="csr")


@functools.lru_cache(maxsize=64)
def _boundary_positions(p: int):
    n = p + 1
    i, j = np.divmod(np.arange(n * n), n)
    pos = np.nonzero((i < 2) | (j < 2))[0]
    interior = np.nonzero((i >= 2) & (j >= 2))[0]
    return pos, interior


@dataclass
class LeafSystem:
    """Bordered almost-banded system for one element.

    Rows at ``positions`` (coefficients with ``i < 2`` or ``j < 2``) hold the
    projected trace conditions ``Vt^T T x = Vt^T c``; the remaining rows hold
    the PDE, output in the ``C^(2) x C^(2)`` basis.
    """

    p: int
    op: ck.AlmostBandedOp
    pde_rows: sp.csr_matrix  # (n-2)^2 x n^2, already normalized
    rhs: np.ndarray  # length n^2; zero on the boundary positions
    scale: float
    projector: CompatProjector
    collapsed_top: bool = False

    @property
    def n(self) -> int:
        return self.p + 1

    def to_sparse(self) -> sp.csr_matrix:
        """Full ``L`` as a sparse matrix (for oracles and fallbacks)."""
        n = self.n
        pos, interior = _boundary_positions(self.p)
        bdy = sp.csr_matrix(self.projector.Vt.T) @ trace_matrix(self.p)
        L = sp.lil_matrix((n * n, n * n), dtype=self.op.dtype)
        L[interior, :] = self.pde_rows
        L[pos, :] = bdy
        return sp.csr_matrix(L)

    @property
    def banded_nnz(self) -> int:
        return int(self.op.A.to_sparse().count_nonzero())

    @property
    def banded_storage(self) -> int:
        return self.op.A.nnz_stored


def _pde_rows(ref: RefPDO, p: int, tol: float, max_rank: int):
    n = p + 1
    m = ref.degree
    pad = m + 6
    rows = sp.csr_matrix((max(n - 2, 0) ** 2, n * n), dtype=np.result_type(*ref.coeffs.values(), float))
    if n < 3:
        return rows
    for term, (dy, dx) in TERM_ORDERS.items():
        coef = ref.coeffs.get(term)
        if coef is None or not np.any(coef):
            continue
        for yc, xc in separable_decompose(coef, tol, max_rank):
            Oy = _op1d(yc, dy, n - 2, n, pad)
            Ox = _op1d(xc, dx, n - 2, n, pad)
            rows = rows + sp.kron(Oy, Ox, format="csr")
    rows.eliminate_zeros()
    return rows


def _convert_rhs(F, p: int):
    """``(S_1 S_0) F (S_1 S_0)^T`` truncated to ``(n-2) x (n-2)``."""
    n = p + 1
    F = np.atleast_2d(np.asarray(F))
    N = max(n + 4, *F.shape)
    Fp = np.zeros((N, N), dtype=np.result_type(F, float))
    Fp[: F.shape[0], : F.shape[1]] = F
    S = ck.conv_chain(0, 2, N)
    out = S @ (S @ Fp).T
    return out.T[: n - 2, : n - 2]


def assemble_leaf(ref: RefPDO, fhat, p: int, tol: float = 1e-14, max_rank: int = 30) -> LeafSystem:
    """Assemble the bordered system for ``ref`` at order ``p``.

    ``fhat`` is the Chebyshev coefficient matrix of the scaled rhs (see
    :meth:`RefPDO.rhs`), or ``None`` for zero.
    """
    if p < 1:
        raise ValueError("leaf order p must be >= 1")
    n = p + 1
    pde = _pde_rows(ref, p, tol, max_rank)
    scale = float(np.abs(pde.data).max()) if pde.nnz else 1.0
    pde = pde / scale
    pos, interior = _boundary_positions(p)
    proj = compat_projector(p)
    banded = sp.lil_matrix((n * n, n * n), dtype=pde.dtype)
    banded[interior, :] = pde
    dense = np.asarray((sp.csr_matrix(proj.Vt.T) @ trace_matrix(p)).todense())
    op = ck.AlmostBandedOp.bordered(sp.csr_matrix(banded), dense, pos, ck.CHEBYSHEV, ck.BasisTag(2))
    rhs = np.zeros(n * n, dtype=np.result_type(pde.dtype, np.asarray(fhat if fhat is not None else 0.0)))
    if fhat is not None and n > 2:
        rhs[interior] = _convert_rhs(fhat, p).ravel() / scale
    collapsed = side_is_degenerate(ref.map, 3)
    return LeafSystem(p, op, sp.csr_matrix(pde), rhs, scale, proj, collapsed)


# ---------------------------------------------------------------------------
# solves


class LeafFactor:
    """Factorization of a :class:`LeafSystem`, reusable for new right-hand sides.

    Uses the banded-plus-low-rank (Woodbury) route; if the banded part with its
    placeholder rows turns out singular or badly conditioned, falls back to a
    sparse LU of the whole system.
    """

    def __init__(self, system: LeafSystem, refine: int = 1):
        self.system = system
        self.method = "woodbury"
        try:
            self._wb = ck.WoodburySolver(system.op, refine=refine, cond_limit=1e12)
            self._lu = None
        except ck.SingularOperatorError:
            self.method = "sparse-lu"
            self._wb = None
            L = sp.csc_matrix(system.to_sparse())
            try:
                self._lu = spla.splu(L)
            except RuntimeError as exc:
                raise LeafSingularError("leaf system is singular") from exc
            # splu rarely hits an exact zero pivot; estimate the 1-norm condition instead
            n = L.shape[0]
            inv = spla.LinearOperator((n, n), matvec=self._lu.solve, rmatvec=lambda b: self._lu.solve(b, "H"),
                                      dtype=L.dtype)
            cond = spla.norm(L, 1) * spla.onenormest(inv)
            if not np.isfinite(cond) or cond > 1e14:
                raise LeafSingularError(f"leaf system is numerically singular (condition ~{cond:.1e})")

    def solve(self, B):
        if self._wb is not None:
            X = self._wb.solve(B)
        else:
            B = np.asarray(B)
            if np.iscomplexobj(B) and not np.iscomplexobj(np.empty(0, self._lu.U.dtype)):
                X = self._lu.solve(B.real) + 1j * self._lu.solve(B.imag)
            else:
                X = self._lu.solve(B)
        if not np.all(np.isfinite(X)):
            raise LeafSingularError("leaf solve produced non-finite values")
        return X

    def boundary_rhs(self, data):
        """Right-hand side with projected trace data ``Vt^T data`` on the bordered rows."""
        sysm = self.system
        pos, _ = _boundary_positions(sysm.p)
        W = sysm.projector.Vt.T @ data
        B = np.zeros((sysm.n ** 2,) + W.shape[1:], dtype=W.dtype)
        B[pos] = W
        return B

    def solve_boundary(self, data):
        return self.solve(self.boundary_rhs(data))

    def particular(self, rhs=None):
        return self.solve(self.system.rhs if rhs is None else rhs)


@dataclass
class SolutionOperator:
    """``S = [S^1 S^2 S^3 S^4 | S^rhs]``, mapping side coefficients (and the rhs
    flag) to the flattened interior coefficient matrix."""

    p: int
    matrix: np.ndarray  # n^2 x (4n + 1)

    @property
    def blocks(self):
        n = self.p + 1
        return [self.matrix[:, k * n : (k + 1) * n] for k in range(4)]

    @property
    def rhs_column(self) -> np.ndarray:
        return self.matrix[:, -1]

    def __call__(self, c, alpha=1.0):
        return self.matrix[:, :-1] @ c + alpha * self.matrix[:, -1]


def build_solution_operator(system: LeafSystem, factor: LeafFactor | None = None) -> SolutionOperator:
    """Solve for all ``4(p+1)`` delta boundary data plus the particular solution."""
    if factor is None:
        factor = LeafFactor(system)
    n = system.n
    B = factor.boundary_rhs(np.eye(4 * n))
    B = np.column_stack([B, system.rhs.astype(np.result_type(B, system.rhs))])
    return SolutionOperator(system.p, factor.solve(B))


# ---------------------------------------------------------------------------
# normal derivatives


@functools.lru_cache(maxsize=64)
def _first_kind_transform(n: int) -> np.ndarray:
    M = ck.cheb_coeffs_first_kind(np.eye(n)).T.copy()
    M.flags.writeable = False
    return M


@functools.lru_cache(maxsize=64)
def _second_kind_transform(n: int) -> np.ndarray:
    M = ck.cheb_coeffs(np.eye(n)).T.copy() if n > 1 else np.ones((1, 1))
    M.flags.writeable = False
    return M


def _side_derivative_values(p: int, side: int, t):
    """Matrices mapping ``vec(X)`` to ``u_r`` and ``u_s`` values on ``side`` at ``t``."""
    n = p + 1
    V = C.chebvander(t, p)  # T_i(t)
    dV = np.column_stack([C.chebval(t, C.chebder(np.eye(n)[k])) if k else np.zeros_like(t) for k in range(n)])
    if side in (0, 1):
        e = -1 if side == 0 else 1
        Er = np.kron(V, ck.deriv_row(e, n)[None, :])
        Es = np.kron(dV, ck.eval_row(e, 0, n)[None, :])
    else:
        e = -1 if side == 2 else 1
        Er = np.kron(ck.eval_row(e, 0, n)[None, :], dV)
        Es = np.kron(ck.deriv_row(e, n)[None, :], V)
    return Er, Es


def normal_deriv_matrix(m: QuadMap, p: int) -> np.ndarray:
    """``D_E``: per-side Chebyshev coefficients of the outward unit-normal derivative.

    Rows are ordered left, right, bottom, top with ``p+1`` rows each. The
    rational metric factors are applied at Chebyshev points and interpolated,
    which is exact for parallelograms. Quads use second-kind points so the
    flux is exact at the corners, where the merge consistency of cross points
    lives. Triangles use first-kind points to stay away from the apex, where
    the factors are singular. A collapsed side gets zero rows.
    """
    n = p + 1
    if m.collapsed:
        t = ck.cheb_points_first_kind(n)
        F = _first_kind_transform(n)
    else:
        t = ck.cheb_points(n)
        F = _second_kind_transform(n)
    out = np.zeros((4 * n, n * n))
    for side in range(4):
        if side_is_degenerate(m, side):
            continue
        alpha, beta = normal_deriv_factors(m, side)(t)
        Er, Es = _side_derivative_values(p, side, t)
        out[side * n : (side + 1) * n] = F @ (alpha[:, None] * Er + beta[:, None] * Es)
    return out


def dtn_operator(S: SolutionOperator | np.ndarray, D: np.ndarray) -> np.ndarray:
    """``Sigma = D S``; the last column is the flux of the particular solution."""
    mat = S.matrix if isinstance(S, SolutionOperator) else S
    return D @ mat
