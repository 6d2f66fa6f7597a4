"""Hierarchical Poincaré–Steklov direct solver on a conforming mesh.

Each leaf turns its element discretization into a solution operator ``S``
and a Dirichlet-to-Neumann operator ``Sigma`` expressed in the coefficient
spaces of its exterior edges. Parents eliminate the shared interface by a
Schur complement, so the root ends up with a DtN map on the mesh boundary.
Solving walks back down, recovering interface data and then element
coefficients.

Edge spaces follow the minimum rule: an edge shared by elements of orders
``p_a`` and ``p_b`` carries ``min(p_a, p_b) + 1`` Chebyshev coefficients in
the edge's global direction. Every operator column block has one trailing
column for the particular (right-hand side) part.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from . import chebkit as ck
from .geometry import PDOCoeffs, RefPDO, as_field, transform_pdo
from .leaf import (
    LeafFactor,
    LeafSingularError,
    SeparableRankError,
    _boundary_positions,
    _convert_rhs,
    assemble_leaf,
    normal_deriv_matrix,
)
from .mesh import Mesh, MergeTree, build_merge_tree

__all__ = [
    "HPSError",
    "InterfaceResidualWarning",
    "LeafNode",
    "ParentNode",
    "Hierarchy",
    "Solution",
    "interface_restrict",
    "interface_interpolate",
    "initialize",
    "merge",
    "build",
    "solve",
    "update_rhs",
    "timestep_backward_euler",
]


class HPSError(RuntimeError):
    """Failure in a leaf or merge, naming the element or node involved."""


class InterfaceResidualWarning(RuntimeWarning):
    """A minimum-norm interface solve left a residual above tolerance."""


def interface_restrict(coeffs, p_from: int, p_to: int) -> np.ndarray:
    """Zero-pad or truncate a Chebyshev coefficient vector from order ``p_from`` to ``p_to``."""
    c = np.asarray(coeffs)
    if c.shape[0] != p_from + 1:
        raise ValueError(f"expected {p_from + 1} coefficients, got {c.shape[0]}")
    if p_to + 1 <= c.shape[0]:
        return c[: p_to + 1].copy()
    out = np.zeros((p_to + 1,) + c.shape[1:], dtype=c.dtype)
    out[: c.shape[0]] = c
    return out


interface_interpolate = interface_restrict


def _pad_matrix(d: int, n: int) -> np.ndarray:
    """``n x d`` zero-padding (or truncation when ``d > n``)."""
    return np.eye(n, d)


def _flip(n: int) -> np.ndarray:
    return (-1.0) ** np.arange(n)


# ---------------------------------------------------------------------------
# nodes


@dataclass
class LeafNode:
    element: int
    p: int
    edges: list  # exterior edge ids, one per non-collapsed side
    dims: list  # coefficient count per exterior edge
    data_map: np.ndarray  # 4n x n_ext: edge coefficients -> leaf side data
    flux_map: np.ndarray  # n_ext x 4n: leaf side fluxes -> edge coefficients
    D: np.ndarray  # 4n x n^2 normal-derivative matrix
    sigma: np.ndarray  # n_ext x (n_ext + 1)
    S: np.ndarray | None = None  # n^2 x (n_ext + 1), None in lean storage
    factor: LeafFactor | None = None
    ref: RefPDO | None = None
    rhs_col: np.ndarray | None = None  # particular solution, kept in lean mode too

    @property
    def id(self) -> int:
        return self.element


@dataclass
class ParentNode:
    id: int
    children: tuple
    gamma: list  # interface edge ids
    edges: list  # exterior edge ids: L_i then L_j
    dims: list
    idx_gamma_i: np.ndarray
    idx_gamma_j: np.ndarray
    idx_L_i: np.ndarray
    idx_L_j: np.ndarray
    S_gamma: np.ndarray
    sigma: np.ndarray
    cross_points: int = 0
    method: str = "lu"
    rank_deficiency: int = 0
    residual: float = 0.0
    cond: float = 0.0
    data_residual: float = 0.0
    _fact: tuple = field(default=None, repr=False)

    def solve_interface(self, rhs):
        if self.method == "lu":
            return scipy.linalg.lu_solve(self._fact, rhs)
        U, s, Vh = self._fact
        return Vh.conj().T @ ((U.conj().T @ rhs) / s[:, None] if np.ndim(rhs) == 2 else (U.conj().T @ rhs) / s)


def _offsets(dims):
    return np.concatenate([[0], np.cumsum(dims)]).astype(int)


def _edge_index(edges, dims, subset):
    """Indices into a node's coefficient vector for the edges in ``subset`` (in that order)."""
    off = _offsets(dims)
    pos = {e: k for k, e in enumerate(edges)}
    parts = [np.arange(off[pos[e]], off[pos[e] + 1]) for e in subset]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=int)


# ---------------------------------------------------------------------------
# hierarchy


class Hierarchy:
    """Direct solver for ``L u = f`` on a mesh with Dirichlet data.

    Parameters
    ----------
    mesh : Mesh
    pdo : PDOCoeffs
        Non-divergence-form operator.
    f : scalar field, optional
        Right-hand side (constant, callable ``f(x, y)`` or coefficient field).
    p : int, optional
        Default element order for elements without one in the mesh.
    tree : MergeTree or list of pairs, optional
    storage : {"full", "lean"}
        ``"lean"`` keeps only DtN maps at the leaves and recomputes element
        interiors during :meth:`solve`.
    threads : int
        Worker threads for the leaf stage and same-level merges.
    strict : bool
        Raise instead of warn when a cross-point interface residual exceeds
        ``residual_tol`` relative to its right-hand side during :meth:`solve`.
    """

    def __init__(self, mesh: Mesh, pdo: PDOCoeffs, f=None, p: int | None = None, tree=None,
                 storage: str = "full", threads: int = 1, max_rank: int = 30, strict: bool = False,
                 residual_tol: float = 1e-8):
        if storage not in ("full", "lean"):
            raise ValueError("storage must be 'full' or 'lean'")
        self.mesh = mesh
        self.pdo = pdo
        self.f = _as_rhs(f)
        self.orders = [mesh.order_of(k, p) for k in range(mesh.n_elem)]
        if min(self.orders) < 1:
            raise ValueError("element orders must be >= 1")
        self.storage = storage
        self.threads = max(1, int(threads))
        self.max_rank = max_rank
        self.strict = strict
        self.residual_tol = residual_tol
        if isinstance(tree, MergeTree):
            self.tree = tree
        else:
            self.tree = build_merge_tree(mesh, tree)
        self.edge_dims = self._edge_dims()
        self.nodes: dict = {}
        self.timings = {"local": 0.0, "global": 0.0, "solve": 0.0}
        self.built = False

    # -- setup -----------------------------------------------------------

    def _edge_dims(self):
        dims = {}
        for e in self.mesh.edges:
            dims[e.id] = min(self.orders[k] for k, _, _ in e.incidences) + 1
        return dims

    @property
    def n_dof(self) -> int:
        return int(sum((p + 1) ** 2 for p in self.orders))

    @property
    def root(self):
        return self.nodes[self.tree.root]

    def _map(self, fn, items):
        if self.threads == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.threads) as ex:
            return list(ex.map(fn, items))

    def initialize(self):
        t0 = time.perf_counter()
        leaves = self._map(self._make_leaf, list(range(self.mesh.n_elem)))
        for leaf in leaves:
            self.nodes[leaf.id] = leaf
        self.timings["local"] = time.perf_counter() - t0
        return leaves

    def _leaf_maps(self, k: int, n: int):
        sides = self.mesh.element_edges[k]
        edges, dims, blocks = [], [], []
        for side, rec in enumerate(sides):
            if rec is None:
                continue
            eid, flip = rec
            edges.append(eid)
            dims.append(self.edge_dims[eid])
            blocks.append((side, flip))
        n_ext = sum(dims)
        off = _offsets(dims)
        R = np.zeros((4 * n, n_ext))
        F = np.zeros((n_ext, 4 * n))
        for q, (side, flip) in enumerate(blocks):
            d = dims[q]
            pad = _pad_matrix(d, n)
            if flip:
                pad = _flip(n)[:, None] * pad
            R[side * n : (side + 1) * n, off[q] : off[q + 1]] = pad
            F[off[q] : off[q + 1], side * n : (side + 1) * n] = pad.T
        if sides[3] is None:
            # collapsed top: constant data equal to the apex value seen from left and right
            Bp = ck.eval_row(1, 0, n)
            R[3 * n] = 0.5 * (Bp @ R[0:n] + Bp @ R[n : 2 * n])
        return edges, dims, R, F

    def _leaf_rhs(self, ref: RefPDO, p: int, f):
        if f is None:
            return None
        if isinstance(f, np.ndarray):  # coefficient matrix of f on the reference square
            return _scaled_coeff_rhs(ref, f)
        return ref.rhs(f)

    def _make_leaf(self, k: int, f=...) -> LeafNode:
        f = self.f if f is ... else f
        p = self.orders[k]
        n = p + 1
        try:
            m = self.mesh.maps[k]
            ref = transform_pdo(self.pdo, m)
            system = assemble_leaf(ref, self._leaf_rhs(ref, p, _element_rhs(f, k)), p, max_rank=self.max_rank)
            factor = LeafFactor(system)
            edges, dims, R, F = self._leaf_maps(k, n)
            B = factor.boundary_rhs(R)
            cols = factor.solve(np.column_stack([B, system.rhs.astype(np.result_type(B, system.rhs))]))
        except (LeafSingularError, ck.SingularOperatorError, SeparableRankError, np.linalg.LinAlgError) as exc:
            raise HPSError(f"element {k}: {exc}") from exc
        D = normal_deriv_matrix(m, p)
        sigma = F @ (D @ cols)
        if self.storage == "lean":
            return LeafNode(k, p, edges, dims, R, F, D, sigma, None, None, ref, cols[:, -1].copy())
        return LeafNode(k, p, edges, dims, R, F, D, sigma, cols, factor, ref, None)

    def build(self):
        if not any(k < self.tree.n_leaves for k in self.nodes):
            self.initialize()
        t0 = time.perf_counter()
        for level in self.tree.schedule():
            parents = self._map(self._merge_node, level)
            for par in parents:
                self.nodes[par.id] = par
        self.timings["global"] = time.perf_counter() - t0
        self.built = True
        return self

    def _merge_node(self, node_id: int) -> ParentNode:
        a, b = self.tree.children(node_id)
        try:
            return merge(self.nodes[a], self.nodes[b], node_id, self.mesh)
        except (np.linalg.LinAlgError, HPSError, ValueError) as exc:
            raise HPSError(f"merge node {node_id} (children {a}, {b}): {exc}") from exc

    # -- boundary data ---------------------------------------------------

    def boundary_coeffs(self, g) -> np.ndarray:
        """Root exterior coefficients from a constant, callable ``g(x, y)``, dict or flat vector."""
        root = self.root if self.tree.merges else self.nodes[0]
        edges, dims = root.edges, root.dims
        total = int(sum(dims))
        if g is None:
            return np.zeros(total)
        if np.isscalar(g):
            g = (lambda x, y, c=g: np.full(np.shape(x), c))
        if callable(g):
            parts = []
            v = self.mesh.vertices
            for eid, d in zip(edges, dims):
                e = self.mesh.edges[eid]
                t = ck.cheb_points(d)
                a, b = v[e.start], v[e.end]
                x = a[0] + (t + 1) / 2 * (b[0] - a[0])
                y = a[1] + (t + 1) / 2 * (b[1] - a[1])
                parts.append(ck.cheb_coeffs(np.broadcast_to(g(x, y), x.shape)))
            return np.concatenate(parts)
        if isinstance(g, dict):
            parts = []
            for eid, d in zip(edges, dims):
                c = np.asarray(g[eid])
                parts.append(interface_restrict(c, c.shape[0] - 1, d - 1))
            return np.concatenate(parts)
        g = np.asarray(g)
        if g.shape != (total,):
            raise ValueError(f"boundary data has {g.shape[0] if g.ndim else 0} coefficients, expected {total}")
        return g

    # -- solve -----------------------------------------------------------

    def solve(self, g=None, alpha: float = 1.0) -> "Solution":
        if not self.built:
            self.build()
        t0 = time.perf_counter()
        coeffs = {}
        data = {self.tree.root: self.boundary_coeffs(g)}
        for node_id in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[node_id]
            u = data.pop(node_id)
            if isinstance(node, ParentNode):
                phi = node.S_gamma @ np.append(u, alpha)
                ci, cj = (self.nodes[c] for c in node.children)
                ni = len(node.idx_L_i)
                if node.method == "min-norm":
                    self._check_interface(node, ci, cj, u, phi, alpha)
                ui = np.zeros(int(sum(ci.dims)), dtype=np.result_type(u, phi))
                uj = np.zeros(int(sum(cj.dims)), dtype=ui.dtype)
                ui[node.idx_L_i] = u[:ni]
                uj[node.idx_L_j] = u[ni:]
                ui[node.idx_gamma_i] = phi
                uj[node.idx_gamma_j] = phi
                data[ci.id] = ui
                data[cj.id] = uj
            else:
                coeffs[node.element] = self._leaf_interior(node, u, alpha)
        self.timings["solve"] = time.perf_counter() - t0
        return Solution(self.mesh, [coeffs[k] for k in range(self.mesh.n_elem)], [self.nodes[k].ref for k in range(self.mesh.n_elem)])

    def _check_interface(self, node, ci, cj, u, phi, alpha):
        gi, gj, li, lj = node.idx_gamma_i, node.idx_gamma_j, node.idx_L_i, node.idx_L_j
        A = -(ci.sigma[np.ix_(gi, gi)] + cj.sigma[np.ix_(gj, gj)])
        ni = len(li)
        rhs = ci.sigma[np.ix_(gi, li)] @ u[:ni] + cj.sigma[np.ix_(gj, lj)] @ u[ni:] + alpha * (ci.sigma[gi, -1] + cj.sigma[gj, -1])
        scale = np.linalg.norm(rhs)
        res = float(np.linalg.norm(A @ phi - rhs) / scale) if scale > 0 else float(np.linalg.norm(A @ phi))
        node.data_residual = res
        if res > self.residual_tol:
            msg = f"node {node.id}: cross-point interface residual {res:.2e} exceeds {self.residual_tol:.0e}"
            if self.strict:
                raise HPSError(msg)
            warnings.warn(msg, InterfaceResidualWarning, stacklevel=3)

    def _leaf_interior(self, leaf: LeafNode, u, alpha):
        n = leaf.p + 1
        if leaf.S is not None:
            x = leaf.S @ np.append(u, alpha)
        else:
            system = assemble_leaf(leaf.ref, None, leaf.p, max_rank=self.max_rank)
            factor = LeafFactor(system)
            x = factor.solve(factor.boundary_rhs(leaf.data_map @ u)) + alpha * leaf.rhs_col
        return x.reshape(n, n)

    # -- right-hand side updates -----------------------------------------

    def update_rhs(self, f_new) -> "Hierarchy":
        """Replace ``f`` by recomputing only the particular-solution columns.

        ``f_new`` is a scalar field, or a list of per-element Chebyshev
        coefficient matrices of ``f`` on the reference square.
        """
        if not self.built:
            raise HPSError("update_rhs needs a built hierarchy")
        self.f = _as_rhs(f_new)
        t0 = time.perf_counter()

        def leaf_update(k):
            leaf = self.nodes[k]
            p = leaf.p
            fk = _element_rhs(self.f, k)
            fhat = self._leaf_rhs(leaf.ref, p, fk)
            if leaf.factor is not None:
                rhs = _rhs_vector(leaf.factor.system, fhat)
                col = leaf.factor.solve(rhs)
            else:
                system = assemble_leaf(leaf.ref, fhat, p, max_rank=self.max_rank)
                col = LeafFactor(system).solve(system.rhs)
            flux = leaf.flux_map @ (leaf.D @ col)
            return k, col, flux

        for k, col, flux in self._map(leaf_update, list(range(self.mesh.n_elem))):
            leaf = self.nodes[k]
            if leaf.S is not None:
                leaf.S[:, -1] = col
            else:
                leaf.rhs_col = col
            leaf.sigma[:, -1] = flux
        t1 = time.perf_counter()
        for level in self.tree.schedule():
            for node_id in level:
                _update_parent(self.nodes[node_id], self.nodes)
        self.timings["local"] = t1 - t0
        self.timings["global"] = time.perf_counter() - t1
        return self


def _as_rhs(f):
    if f is None or isinstance(f, (list, tuple)):
        return f
    return as_field(f)


def _element_rhs(f, k):
    if isinstance(f, (list, tuple)):
        return np.asarray(f[k])
    return f


def _rhs_vector(system, fhat):
    n = system.n
    rhs = np.zeros(n * n, dtype=np.result_type(system.pde_rows.dtype, np.asarray(fhat if fhat is not None else 0.0)))
    if fhat is not None and n > 2:
        _, interior = _boundary_positions(system.p)
        rhs[interior] = _convert_rhs(fhat, system.p).ravel() / system.scale
    return rhs


def _scaled_coeff_rhs(ref: RefPDO, X):
    """Chebyshev coefficients of ``rhs_scale * u`` where ``u`` has coefficients ``X``."""
    from numpy.polynomial import chebyshev as C

    from .geometry import _peval

    X = np.atleast_2d(X)
    deg = max(np.atleast_2d(ref.rhs_scale).shape) - 1
    N = max(X.shape) + deg + 1
    t = ck.cheb_points(N)
    R, S = np.meshgrid(t, t)
    vals = C.chebval2d(S, R, X) * _peval(ref.rhs_scale, R, S)
    return ck.cheb_coeffs2d(vals)


# ---------------------------------------------------------------------------
# merging


def _count_cross_points(mesh: Mesh, gamma, exterior) -> tuple[int, int]:
    """Return the number of cross points and how many of them have even valence."""
    if mesh is None:
        return 0, 0
    E = mesh.edges
    gv = {v for e in gamma for v in (E[e].start, E[e].end)}
    xv = {v for e in exterior for v in (E[e].start, E[e].end)}
    cross = gv - xv
    valence = {v: 0 for v in cross}
    for e in E:
        for v in (e.start, e.end):
            if v in valence:
                valence[v] += 1
    return len(cross), sum(1 for v in cross if valence[v] % 2 == 0)


def _rcond(A, lu_piv):
    lu, _ = lu_piv
    anorm = np.linalg.norm(A, 1)
    gecon = scipy.linalg.lapack.get_lapack_funcs("gecon", (lu,))
    rc, _ = gecon(lu, anorm, norm="1")
    return float(rc)


def merge(ni, nj, node_id: int = -1, mesh: Mesh | None = None, rank_tol: float = 1e-11,
          cross_tol: float = 1e-4) -> ParentNode:
    """Eliminate the interface shared by ``ni`` and ``nj``.

    Without cross points the interface system is LU-factorized. With cross
    points it is rank deficient and solved in the minimum-norm least-squares
    sense; the null-space dimension is recorded next to the cross-point count.
    Singular values below ``rank_tol * s_max`` are dropped, and so are up to
    one per even-valence cross point below ``cross_tol * s_max``. Odd-valence
    cross points carry no null vector, so nothing extra is dropped for them.
    """
    set_i, set_j = set(ni.edges), set(nj.edges)
    gamma = [e for e in ni.edges if e in set_j]
    if not gamma:
        raise HPSError(f"nodes {ni.id} and {nj.id} share no edge")
    dims_i = dict(zip(ni.edges, ni.dims))
    dims_j = dict(zip(nj.edges, nj.dims))
    for e in gamma:
        if dims_i[e] != dims_j[e]:
            raise HPSError(f"interface edge {e} has {dims_i[e]} vs {dims_j[e]} coefficients")
    L_i = [e for e in ni.edges if e not in set_j]
    L_j = [e for e in nj.edges if e not in set_i]
    gi = _edge_index(ni.edges, ni.dims, gamma)
    gj = _edge_index(nj.edges, nj.dims, gamma)
    li = _edge_index(ni.edges, ni.dims, L_i)
    lj = _edge_index(nj.edges, nj.dims, L_j)
    Si, Sj = ni.sigma, nj.sigma
    A = -(Si[np.ix_(gi, gi)] + Sj[np.ix_(gj, gj)])
    rhs = np.column_stack([Si[np.ix_(gi, li)], Sj[np.ix_(gj, lj)], Si[gi, -1] + Sj[gj, -1]])
    exterior = L_i + L_j
    n_cross, n_even = _count_cross_points(mesh, gamma, exterior)
    fact = None
    if n_cross == 0:
        fact = scipy.linalg.lu_factor(A)
        cond = 1.0 / max(_rcond(A, fact), 1e-300)
        if cond > 1e12:
            fact = None  # numerically singular without a cross point: fall back to min-norm
    if fact is not None:
        S_gamma = scipy.linalg.lu_solve(fact, rhs)
        method, deficiency = "lu", 0
    else:
        # minimum-norm least squares: the interface system is rank deficient at cross points
        U, s, Vh = np.linalg.svd(A)
        keep = s > rank_tol * s[0]
        # corner modes at mixed-order cross points are only nearly null; treat the
        # smallest few as null when they sit below the cross-point gap
        r = int(np.sum(keep))
        for k in range(r - 1, max(r - n_even, 0) - 1, -1):
            if s[k] < cross_tol * s[0]:
                keep[k] = False
        U, s, Vh = U[:, keep], s[keep], Vh[keep]
        fact = (U, s, Vh)
        S_gamma = Vh.conj().T @ ((U.conj().T @ rhs) / s[:, None])
        method, deficiency = "min-norm", int(np.sum(~keep))
        cond = float(s[0] / s[-1])
    # residual of the particular column; data columns for unit (corner-incompatible)
    # data need not be consistent, so they are only checked at solve time
    r_end = rhs[:, -1]
    res = float(np.linalg.norm(A @ S_gamma[:, -1] - r_end) / max(np.linalg.norm(r_end), 1e-300)) if np.any(r_end) else 0.0
    K = np.vstack([Si[np.ix_(li, gi)], Sj[np.ix_(lj, gj)]])
    nli, nlj = len(li), len(lj)
    sigma = np.zeros((nli + nlj, nli + nlj + 1), dtype=np.result_type(Si, Sj, S_gamma))
    sigma[:nli, :nli] = Si[np.ix_(li, li)]
    sigma[nli:, nli : nli + nlj] = Sj[np.ix_(lj, lj)]
    sigma[:nli, -1] = Si[li, -1]
    sigma[nli:, -1] = Sj[lj, -1]
    sigma += K @ S_gamma
    dims = [dims_i[e] for e in L_i] + [dims_j[e] for e in L_j]
    return ParentNode(node_id, (ni.id, nj.id), gamma, exterior, dims, gi, gj, li, lj, S_gamma, sigma,
                      cross_points=n_cross, method=method, rank_deficiency=deficiency,
                      residual=float(res), cond=cond, _fact=fact)


def _update_parent(node: ParentNode, nodes: dict):
    ci, cj = (nodes[c] for c in node.children)
    gi, gj, li, lj = node.idx_gamma_i, node.idx_gamma_j, node.idx_L_i, node.idx_L_j
    r = ci.sigma[gi, -1] + cj.sigma[gj, -1]
    col = node.solve_interface(r)
    node.S_gamma[:, -1] = col
    K = np.vstack([ci.sigma[np.ix_(li, gi)], cj.sigma[np.ix_(lj, gj)]])
    node.sigma[:, -1] = np.concatenate([ci.sigma[li, -1], cj.sigma[lj, -1]]) + K @ col


# ---------------------------------------------------------------------------
# functional entry points


def initialize(mesh: Mesh, pdo: PDOCoeffs, f=None, orders=None, **kw) -> Hierarchy:
    h = Hierarchy(mesh if orders is None else mesh.with_orders(orders), pdo, f, **kw)
    h.initialize()
    return h


def build(h: Hierarchy) -> Hierarchy:
    return h.build()


def solve(h: Hierarchy, g=None) -> "Solution":
    return h.solve(g)


def update_rhs(h: Hierarchy, f_new) -> Hierarchy:
    return h.update_rhs(f_new)


# ---------------------------------------------------------------------------
# solutions


class Solution:
    """Per-element coefficient matrices with evaluation and error norms."""

    def __init__(self, mesh: Mesh, coeffs: list, refs: list | None = None):
        self.mesh = mesh
        self.coeffs = coeffs
        self.refs = refs

    def element_values(self, k: int, r, s):
        from numpy.polynomial import chebyshev as C

        return C.chebval2d(s, r, self.coeffs[k])

    def __call__(self, x, y, fill=np.nan):
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        out = np.full(x.shape, fill, dtype=np.result_type(*self.coeffs, float))
        todo = np.ones(x.shape, dtype=bool)
        for k, m in enumerate(self.mesh.maps):
            if not todo.any():
                break
            xs, ys = x[todo], y[todo]
            vx = m.vertices
            box = (xs >= vx[:, 0].min() - 1e-12) & (xs <= vx[:, 0].max() + 1e-12) & (ys >= vx[:, 1].min() - 1e-12) & (ys <= vx[:, 1].max() + 1e-12)
            if not box.any():
                continue
            r, s = m.inverse(xs[box], ys[box])
            inside = (np.abs(r) <= 1 + 1e-10) & (np.abs(s) <= 1 + 1e-10)
            if not inside.any():
                continue
            vals = self.element_values(k, np.clip(r[inside], -1, 1), np.clip(s[inside], -1, 1))
            idx = np.flatnonzero(todo)[np.flatnonzero(box)[inside]]
            out.flat[idx] = vals
            todo.flat[idx] = False
        return out

    def l2_error(self, exact: Callable, q: int | None = None, relative: bool = True) -> float:
        """``||u - exact||_2`` by tensor Gauss–Legendre quadrature on every element."""
        err2 = ref2 = 0.0
        for k, m in enumerate(self.mesh.maps):
            nq = q or (self.coeffs[k].shape[0] + 10)
            t, w = np.polynomial.legendre.leggauss(nq)
            R, S = np.meshgrid(t, t)
            W = np.outer(w, w) * np.abs(m.det(R, S))
            ue = exact(*m(R, S))
            uh = self.element_values(k, R, S)
            err2 += np.sum(W * np.abs(uh - ue) ** 2)
            ref2 += np.sum(W * np.abs(ue) ** 2)
        if relative:
            return float(np.sqrt(err2 / ref2)) if ref2 > 0 else float(np.sqrt(err2))
        return float(np.sqrt(err2))

    def element_errors(self, exact: Callable, q: int | None = None):
        """Absolute squared L2 error per element (and squared norm of ``exact``)."""
        out = []
        for k, m in enumerate(self.mesh.maps):
            nq = q or (self.coeffs[k].shape[0] + 10)
            t, w = np.polynomial.legendre.leggauss(nq)
            R, S = np.meshgrid(t, t)
            W = np.outer(w, w) * np.abs(m.det(R, S))
            ue = exact(*m(R, S))
            out.append((float(np.sum(W * np.abs(self.element_values(k, R, S) - ue) ** 2)), float(np.sum(W * np.abs(ue) ** 2))))
        return out

    def integral(self, q: int | None = None) -> float:
        total = 0.0
        for k, m in enumerate(self.mesh.maps):
            nq = q or (self.coeffs[k].shape[0] + 4)
            t, w = np.polynomial.legendre.leggauss(nq)
            R, S = np.meshgrid(t, t)
            total += np.sum(np.outer(w, w) * np.abs(m.det(R, S)) * self.element_values(k, R, S))
        return float(np.real(total))

    def max_abs(self, n: int = 40) -> float:
        t = np.linspace(-1, 1, n)
        R, S = np.meshgrid(t, t)
        return float(max(np.abs(self.element_values(k, R, S)).max() for k in range(len(self.coeffs))))

    def sample_grid(self, nx: int, ny: int):
        x0, x1, y0, y1 = self.mesh.bbox
        X, Y = np.meshgrid(np.linspace(x0, x1, nx), np.linspace(y0, y1, ny))
        return X, Y, self(X, Y)


# ---------------------------------------------------------------------------
# implicit time stepping


def timestep_backward_euler(mesh: Mesh, u0, kappa: float, velocity, dt: float, t_final: float, p: int | None = None,
                            div_velocity=None, use_update: bool = True, snapshot_times=(), storage: str = "full",
                            threads: int = 1):
    """Backward Euler for ``u_t = kappa lap(u) - div(b u)`` with zero Dirichlet data.

    Each step solves ``u - dt kappa lap(u) + dt div(b u) = u_prev``. With
    ``use_update`` the operators are built once and only the right-hand side
    is refreshed per step; otherwise the hierarchy is rebuilt every step.

    Returns ``(solution, snapshots, step_times)`` where ``snapshots`` maps each
    requested time to a :class:`Solution`.
    """
    b1, b2 = velocity if velocity is not None else (0.0, 0.0)
    b1, b2 = as_field(b1), as_field(b2)
    divb = as_field(div_velocity if div_velocity is not None else 0.0)
    pdo = PDOCoeffs(
        uxx=-dt * kappa, uyy=-dt * kappa,
        ux=_scaled(b1, dt), uy=_scaled(b2, dt),
        b=_affine(divb, dt),
    )
    nsteps = int(round(t_final / dt))
    if not np.isclose(nsteps * dt, t_final, rtol=1e-12, atol=1e-14):
        raise ValueError("t_final must be a whole number of steps")
    orders = [mesh.order_of(k, p) for k in range(mesh.n_elem)]
    u_coeffs = _project_initial(mesh, u0, orders)
    snaps = {}
    want = {int(round(t / dt)): t for t in snapshot_times}
    if 0 in want:
        snaps[want[0]] = Solution(mesh, [c.copy() for c in u_coeffs])
    h = None
    step_times = []
    sol = Solution(mesh, u_coeffs)
    for step in range(1, nsteps + 1):
        t0 = time.perf_counter()
        try:
            if h is None or not use_update:
                h = Hierarchy(mesh, pdo, list(u_coeffs), p=p, storage=storage, threads=threads)
                h.build()
            else:
                h.update_rhs(list(u_coeffs))
            sol = h.solve(None)
        except HPSError as exc:
            raise HPSError(f"time step {step}: {exc}") from exc
        step_times.append(time.perf_counter() - t0)
        u_coeffs = sol.coeffs
        if step in want:
            snaps[want[step]] = sol
    return sol, snaps, step_times


def _scaled(field, c):
    from .geometry import CallableField, Constant

    if isinstance(field, Constant):
        return Constant(field.value * c)
    return CallableField(lambda x, y, f=field: c * f(x, y))


def _affine(field, c):
    from .geometry import CallableField, Constant

    if isinstance(field, Constant):
        return Constant(1.0 + c * field.value)
    return CallableField(lambda x, y, f=field: 1.0 + c * f(x, y))


def _project_initial(mesh: Mesh, u0, orders):
    out = []
    for k, m in enumerate(mesh.maps):
        n = orders[k] + 1
        t = ck.cheb_points(n)
        R, S = np.meshgrid(t, t)
        out.append(ck.cheb_coeffs2d(np.broadcast_to(u0(*m(R, S)), R.shape).astype(float)))
    return out
