"""Conforming quadrilateral/triangle meshes, refinement and merge schedules.

Elements are stored as tuples of vertex indices in counterclockwise order:
four for quadrilaterals, three for triangles. Element sides use the leaf
ordering left, right, bottom, top (see :mod:`sparsesem.leaf`); a triangle
``(a, b, c)`` is the quad ``(a, b, c, c)`` whose top side collapses.

Every edge has a global direction from its lexicographically smaller
endpoint to the larger one. An element side that runs the other way is
recorded as flipped.
"""

from __future__ import annotations

import math
import re
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .geometry import GeometryError, bilinear_map, duffy_map

__all__ = [
    "MeshError",
    "Edge",
    "Mesh",
    "MergeTree",
    "make_rectangle",
    "make_quad",
    "make_triangle",
    "make_polygon",
    "make_lshape",
    "refine_uniform",
    "refine_corner",
    "refine_point",
    "build_merge_tree",
    "edge_flip_matrix",
    "read_mesh",
    "write_mesh",
    "parse_mesh",
    "format_mesh",
]

# local (start, end) vertex slots of each side, in the quad numbering
_SIDE_SLOTS = ((0, 3), (1, 2), (0, 1), (3, 2))


class MeshError(ValueError):
    """Invalid mesh, refinement target, merge schedule or mesh file."""


@dataclass(frozen=True)
class Edge:
    """A mesh edge running from vertex ``start`` to vertex ``end``.

    ``incidences`` holds ``(element, side, flip)`` for the one or two elements
    that own the edge.
    """

    id: int
    start: int
    end: int
    incidences: tuple

    @property
    def is_boundary(self) -> bool:
        return len(self.incidences) == 1


def edge_flip_matrix(p: int) -> np.ndarray:
    """``diag((-1)^j)``: reverses the parameter of a Chebyshev series."""
    if p < 0:
        raise ValueError("p must be >= 0")
    return np.diag((-1.0) ** np.arange(p + 1))


def _lex_less(a, b) -> bool:
    return (a[0], a[1]) < (b[0], b[1])


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    elements: tuple
    orders: tuple = ()
    source_tokens: tuple | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        v = v + 0.0  # normalize negative zeros
        v.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        els = tuple(tuple(int(i) for i in e) for e in self.elements)
        object.__setattr__(self, "elements", els)
        orders = tuple(self.orders) if self.orders else (None,) * len(els)
        if len(orders) != len(els):
            raise MeshError("one order per element is required")
        object.__setattr__(self, "orders", tuple(None if o is None else int(o) for o in orders))
        if not els:
            raise MeshError("mesh has no elements")
        for e in els:
            if len(e) not in (3, 4):
                raise MeshError(f"element {e} must have 3 or 4 vertices")
            if min(e) < 0 or max(e) >= len(v):
                raise MeshError(f"element {e} references a missing vertex")
            if len(set(e)) != len(e):
                raise MeshError(f"element {e} repeats a vertex")
        self.edges  # validates conformity

    # -- geometry ---------------------------------------------------------

    @property
    def n_elem(self) -> int:
        return len(self.elements)

    def element_vertices(self, k: int) -> np.ndarray:
        return self.vertices[list(self.elements[k])]

    @cached_property
    def maps(self) -> tuple:
        out = []
        for k, e in enumerate(self.elements):
            try:
                out.append(bilinear_map(self.vertices[list(e)]) if len(e) == 4 else duffy_map(self.vertices[list(e)]))
            except GeometryError as exc:
                raise MeshError(f"element {k}: {exc}") from exc
        return tuple(out)

    @property
    def h(self) -> float:
        """Smallest element diameter."""
        return min(m.diameter for m in self.maps)

    @property
    def area(self) -> float:
        return float(sum(m.area for m in self.maps))

    @property
    def bbox(self):
        v = self.vertices
        return (v[:, 0].min(), v[:, 0].max(), v[:, 1].min(), v[:, 1].max())

    def with_orders(self, orders) -> "Mesh":
        if np.isscalar(orders):
            orders = [int(orders)] * self.n_elem
        return Mesh(self.vertices, self.elements, tuple(orders), self.source_tokens)

    def order_of(self, k: int, default: int | None = None) -> int:
        p = self.orders[k]
        if p is None:
            if default is None:
                raise MeshError(f"element {k} has no order and no default was given")
            return int(default)
        return p

    # -- topology ---------------------------------------------------------

    def sides(self, k: int):
        """Vertex pairs of the element's sides (``None`` for a collapsed side)."""
        e = self.elements[k]
        q = e if len(e) == 4 else (e[0], e[1], e[2], e[2])
        return [None if q[a] == q[b] else (q[a], q[b]) for a, b in _SIDE_SLOTS]

    @cached_property
    def edges(self) -> tuple:
        table = {}
        for k in range(self.n_elem):
            for side, pair in enumerate(self.sides(k)):
                if pair is None:
                    continue
                key = tuple(sorted(pair))
                # counterclockwise traversal runs against the parameter on left and top
                ccw_start = pair[1] if side in (0, 3) else pair[0]
                table.setdefault(key, []).append((k, side, pair[0], ccw_start))
        edges = []
        v = self.vertices
        for key, inc in table.items():
            if len(inc) > 2:
                raise MeshError(f"edge {key} is shared by more than two elements")
            a, b = key
            start, end = (a, b) if _lex_less(v[a], v[b]) else (b, a)
            recs = tuple((k, side, local_start != start) for k, side, local_start, _ in inc)
            if len(inc) == 2 and inc[0][3] == inc[1][3]:
                raise MeshError(f"elements {recs[0][0]} and {recs[1][0]} overlap along edge {key} (orientation)")
            edges.append(Edge(len(edges), start, end, recs))
        self._check_hanging(edges)
        return tuple(edges)

    def _check_hanging(self, edges):
        v = self.vertices
        scale = max(np.ptp(v[:, 0]), np.ptp(v[:, 1]), 1e-300)
        for e in edges:
            if not e.is_boundary:
                continue
            a, b = v[e.start], v[e.end]
            d = b - a
            L2 = d @ d
            w = v - a
            t = (w @ d) / L2
            dist = np.abs(w[:, 0] * d[1] - w[:, 1] * d[0]) / math.sqrt(L2)
            inside = (t > 1e-12) & (t < 1 - 1e-12) & (dist < 1e-12 * scale)
            if np.any(inside):
                raise MeshError(f"hanging node at vertex {int(np.nonzero(inside)[0][0])} on edge {e.start}-{e.end}")

    @cached_property
    def element_edges(self) -> tuple:
        """Per element, per side: ``(edge id, flip)`` or ``None`` for a collapsed side."""
        out = [[None] * 4 for _ in range(self.n_elem)]
        for e in self.edges:
            for k, side, flip in e.incidences:
                out[k][side] = (e.id, flip)
        return tuple(tuple(r) for r in out)

    @property
    def boundary_edges(self):
        return [e for e in self.edges if e.is_boundary]

    @property
    def interior_edges(self):
        return [e for e in self.edges if not e.is_boundary]

    @cached_property
    def adjacency(self) -> tuple:
        nb = [set() for _ in range(self.n_elem)]
        for e in self.interior_edges:
            (i, _, _), (j, _, _) = e.incidences
            nb[i].add(j)
            nb[j].add(i)
        return tuple(frozenset(s) for s in nb)

    def is_connected(self, subset: Iterable[int] | None = None) -> bool:
        subset = set(range(self.n_elem)) if subset is None else set(subset)
        if not subset:
            return True
        start = next(iter(subset))
        seen, queue = {start}, deque([start])
        while queue:
            k = queue.popleft()
            for j in self.adjacency[k]:
                if j in subset and j not in seen:
                    seen.add(j)
                    queue.append(j)
        return len(seen) == len(subset)

    def locate(self, x: float, y: float, tol: float = 1e-10) -> int:
        """Index of an element containing ``(x, y)``; raises if none does."""
        for k, m in enumerate(self.maps):
            if m.contains(x, y, tol):
                return k
        raise MeshError(f"point ({x}, {y}) lies outside the mesh")

    def vertex_index(self, point, tol: float = 1e-12) -> int:
        d = np.hypot(*(self.vertices - np.asarray(point, dtype=float)).T)
        k = int(np.argmin(d))
        if d[k] > tol * max(1.0, np.abs(self.vertices).max()):
            raise MeshError(f"{tuple(point)} is not a mesh vertex")
        return k


# ---------------------------------------------------------------------------
# constructors


def make_rectangle(bounds=(0.0, 1.0, 0.0, 1.0), nx: int = 1, ny: int = 1, p: int | None = None) -> Mesh:
    x0, x1, y0, y1 = map(float, bounds)
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be >= 1")
    if not (x1 > x0 and y1 > y0):
        raise MeshError("rectangle bounds must satisfy x0 < x1 and y0 < y1")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel()])
    idx = lambda i, j: j * (nx + 1) + i  # noqa: E731
    els = [(idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)) for j in range(ny) for i in range(nx)]
    return Mesh(verts, els, (p,) * len(els))


def make_quad(vertices, p: int | None = None) -> Mesh:
    m = bilinear_map(vertices)
    return Mesh(m.vertices, [(0, 1, 2, 3)], (p,))


def make_triangle(vertices, p: int | None = None) -> Mesh:
    m = duffy_map(vertices)
    return Mesh(m.vertices[:3], [(0, 1, 2)], (p,))


def make_polygon(n: int, side: float = 1.0, p: int | None = None, center=(0.0, 0.0)) -> Mesh:
    """Regular ``n``-gon split into ``n`` quads from the centroid to edge midpoints.

    The first vertex points along ``+y``, so the mesh is symmetric under ``x -> -x``.
    """
    if n < 3:
        raise MeshError("a polygon needs at least 3 sides")
    R = side / (2 * math.sin(math.pi / n))
    ang = math.pi / 2 + 2 * math.pi * np.arange(n) / n
    cx, cy = center
    v = np.column_stack([cx + R * np.cos(ang), cy + R * np.sin(ang)])
    mid = (v + np.roll(v, -1, axis=0)) / 2  # mid[k] between v[k] and v[k+1]
    verts = np.vstack([[cx, cy], v, mid])
    V = lambda k: 1 + k % n  # noqa: E731
    M = lambda k: 1 + n + k % n  # noqa: E731
    els = [(0, M(k - 1), V(k), M(k)) for k in range(n)]
    return Mesh(verts, els, (p,) * n)


def make_lshape(p: int | None = None) -> Mesh:
    """``[-1, 1]^2`` minus ``[0, 1] x [-1, 0]`` as three unit squares."""
    verts = [(-1, -1), (0, -1), (-1, 0), (0, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
    els = [(0, 1, 3, 2), (2, 3, 6, 5), (3, 4, 7, 6)]
    return Mesh(np.array(verts, dtype=float), els, (p,) * 3)


# ---------------------------------------------------------------------------
# refinement


class _VertexPool:
    """Vertex list with exact-coordinate deduplication."""

    def __init__(self, vertices):
        self.coords = [tuple(map(float, v)) for v in np.asarray(vertices)]
        self.index = {c: k for k, c in enumerate(self.coords)}

    def add(self, pt) -> int:
        key = (float(pt[0]) + 0.0, float(pt[1]) + 0.0)
        k = self.index.get(key)
        if k is None:
            k = len(self.coords)
            self.coords.append(key)
            self.index[key] = k
        return k

    def mid(self, a: int, b: int) -> int:
        # sort so both neighbours compute bit-identical midpoints
        pa, pb = sorted((self.coords[a], self.coords[b]))
        return self.add(((pa[0] + pb[0]) / 2, (pa[1] + pb[1]) / 2))

    def array(self):
        return np.array(self.coords, dtype=float)


def _uniform_children(pool: _VertexPool, e):
    if len(e) == 4:
        v0, v1, v2, v3 = e
        m01, m12, m23, m30 = pool.mid(v0, v1), pool.mid(v1, v2), pool.mid(v2, v3), pool.mid(v3, v0)
        c = pool.add(np.mean([pool.coords[i] for i in e], axis=0))
        return [(v0, m01, c, m30), (m01, v1, m12, c), (c, m12, v2, m23), (m30, c, m23, v3)]
    a, b, c = e
    mab, mbc, mca = pool.mid(a, b), pool.mid(b, c), pool.mid(c, a)
    return [(a, mab, mca), (mab, b, mbc), (mca, mbc, c), (mab, mbc, mca)]


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every quad into 4 at its edge midpoints and centroid, every triangle into 4."""
    pool = _VertexPool(mesh.vertices)
    els, orders = [], []
    for e, p in zip(mesh.elements, mesh.orders):
        kids = _uniform_children(pool, e)
        els += kids
        orders += [p] * len(kids)
    return Mesh(pool.array(), els, orders)


def _rotate_to(e, v):
    k = e.index(v)
    return e[k:] + e[:k]


def refine_corner(mesh: Mesh, vertex) -> Mesh:
    """Grade toward a mesh vertex: each element touching it gets 3 children.

    ``vertex`` is a vertex index or coordinates. A quad ``(v0, v1, v2, v3)``
    with target ``v0`` becomes a corner quad ``(v0, m01, c, m30)`` plus two
    quads filling the rest; a triangle becomes a corner triangle and a quad.
    """
    if np.ndim(vertex) == 0:
        vi = int(vertex)
        if not 0 <= vi < len(mesh.vertices):
            raise MeshError(f"vertex {vi} does not exist")
    else:
        vi = mesh.vertex_index(vertex)
    pool = _VertexPool(mesh.vertices)
    els, orders = [], []
    touched = False
    for e, p in zip(mesh.elements, mesh.orders):
        if vi not in e:
            els.append(e)
            orders.append(p)
            continue
        touched = True
        r = _rotate_to(e, vi)
        if len(r) == 4:
            v0, v1, v2, v3 = r
            m01, m30 = pool.mid(v0, v1), pool.mid(v3, v0)
            c = pool.add(np.mean([pool.coords[i] for i in r], axis=0))
            kids = [(v0, m01, c, m30), (m01, v1, v2, c), (m30, c, v2, v3)]
        else:
            v0, v1, v2 = r
            m01, m20 = pool.mid(v0, v1), pool.mid(v2, v0)
            kids = [(v0, m01, m20), (m01, v1, v2, m20)]
        els += kids
        orders += [p] * len(kids)
    if not touched:
        raise MeshError(f"vertex {vi} belongs to no element")
    return Mesh(pool.array(), els, orders)


def refine_point(mesh: Mesh, point) -> Mesh:
    """Grade toward an interior point: the element containing it gets 5 children.

    The inner child has vertices halfway between the parent's vertices and
    the point; the outer children are trapezoids on the parent's sides.
    """
    pt = np.asarray(point, dtype=float)
    k = mesh.locate(*pt, tol=0.0)
    pool = _VertexPool(mesh.vertices)
    e = mesh.elements[k]
    q = [pool.add((np.asarray(pool.coords[v]) + pt) / 2) for v in e]
    nv = len(e)
    kids = [tuple(q)] + [(e[i], e[(i + 1) % nv], q[(i + 1) % nv], q[i]) for i in range(nv)]
    els = list(mesh.elements[:k]) + kids + list(mesh.elements[k + 1 :])
    orders = list(mesh.orders[:k]) + [mesh.orders[k]] * len(kids) + list(mesh.orders[k + 1 :])
    return Mesh(pool.array(), els, orders)


# ---------------------------------------------------------------------------
# merge trees


@dataclass(frozen=True)
class MergeTree:
    """Pairwise merge schedule.

    Leaves are node ids ``0..n_leaves-1``; ``merges[k]`` creates node
    ``n_leaves + k`` from two earlier nodes. The last merge is the root.
    """

    n_leaves: int
    merges: tuple

    @property
    def root(self) -> int:
        return self.n_leaves + len(self.merges) - 1 if self.merges else 0

    def children(self, node: int):
        if node < self.n_leaves:
            return None
        return self.merges[node - self.n_leaves]

    @cached_property
    def levels(self) -> tuple:
        """Height of every node (leaves 0)."""
        h = [0] * (self.n_leaves + len(self.merges))
        for k, (a, b) in enumerate(self.merges):
            h[self.n_leaves + k] = 1 + max(h[a], h[b])
        return tuple(h)

    @property
    def depth(self) -> int:
        return self.levels[-1] if self.merges else 0

    def leaves_of(self, node: int) -> list:
        if node < self.n_leaves:
            return [node]
        a, b = self.children(node)
        return self.leaves_of(a) + self.leaves_of(b)

    def schedule(self):
        """Merge indices grouped by level, bottom-up (independent within a level)."""
        out = {}
        for k in range(len(self.merges)):
            out.setdefault(self.levels[self.n_leaves + k], []).append(self.n_leaves + k)
        return [out[lv] for lv in sorted(out)]


def _split(mesh: Mesh, ids: list):
    """Split an edge-connected set into two edge-connected halves, as balanced as possible."""
    cent = np.array([mesh.element_vertices(k).mean(axis=0) for k in ids])
    span = np.ptp(cent, axis=0)
    half = len(ids) // 2
    for axis in np.argsort(-span, kind="stable"):
        order = np.lexsort((cent[:, 1 - axis], cent[:, axis]))
        for off in sorted(range(-half + 1, len(ids) - half), key=abs)[: 2 * len(ids)]:
            k = half + off
            if not 0 < k < len(ids):
                continue
            a = [ids[i] for i in order[:k]]
            b = [ids[i] for i in order[k:]]
            if mesh.is_connected(a) and mesh.is_connected(b):
                return a, b
            if abs(off) > 2:
                break
    return _tree_cut(mesh, ids)


def _tree_cut(mesh: Mesh, ids: list):
    """Cut a BFS spanning tree at the edge whose subtree size is closest to half."""
    subset = set(ids)
    root = ids[0]
    parent, order = {root: None}, [root]
    queue = deque([root])
    while queue:
        k = queue.popleft()
        for j in sorted(mesh.adjacency[k]):
            if j in subset and j not in parent:
                parent[j] = k
                order.append(j)
                queue.append(j)
    size = {k: 1 for k in order}
    for k in reversed(order[1:]):
        size[parent[k]] += size[k]
    best = min(order[1:], key=lambda k: abs(2 * size[k] - len(ids)))
    inside = {best}
    for k in order:
        if parent.get(k) in inside:
            inside.add(k)
    a = [k for k in ids if k in inside]
    b = [k for k in ids if k not in inside]
    return a, b


def _bisection_tree(mesh: Mesh, ids=None) -> MergeTree:
    n = mesh.n_elem
    merges = []

    def rec(sub):
        if len(sub) == 1:
            return sub[0]
        a, b = _split(mesh, sub)
        na, nb = rec(a), rec(b)
        merges.append((na, nb))
        return n + len(merges) - 1

    rec(list(range(n)) if ids is None else list(ids))
    return MergeTree(n, tuple(merges))


def _check_user_tree(mesh: Mesh, pairs) -> MergeTree:
    n = mesh.n_elem
    pairs = [tuple(int(x) for x in pr) for pr in pairs]
    if len(pairs) != n - 1:
        raise MeshError(f"expected {n - 1} merges, got {len(pairs)}")
    used = set()
    members = {k: {k} for k in range(n)}
    for k, (a, b) in enumerate(pairs):
        node = n + k
        for c in (a, b):
            if not 0 <= c < node:
                raise MeshError(f"merge {k} refers to node {c}, which does not exist yet")
            if c in used:
                raise MeshError(f"node {c} is merged twice")
        if a == b:
            raise MeshError(f"merge {k} joins node {a} with itself")
        used.update((a, b))
        A, B = members[a], members[b]
        if not any(j in B for i in A for j in mesh.adjacency[i]):
            raise MeshError(f"merge {k}: nodes {a} and {b} share no edge")
        members[node] = A | B
    return MergeTree(n, tuple(pairs))


def build_merge_tree(mesh: Mesh, user_indices: Sequence | None = None) -> MergeTree:
    """Merge schedule by recursive coordinate bisection, or a checked user schedule.

    A user schedule deeper than ``ceil(log2 n) + 2`` is replaced by the
    bisection tree.
    """
    n = mesh.n_elem
    if not mesh.is_connected():
        raise MeshError("mesh is not edge-connected")
    if user_indices is None:
        return _bisection_tree(mesh)
    tree = _check_user_tree(mesh, user_indices)
    limit = math.ceil(math.log2(n)) + 2 if n > 1 else 0
    if tree.depth > limit:
        return _bisection_tree(mesh)
    return tree


# ---------------------------------------------------------------------------
# mesh files

HEADER = "SPARSESEM-MESH 1"


def _num_token(x: float) -> str:
    return repr(float(x))


def format_mesh(mesh: Mesh) -> str:
    """Text form of a mesh; tokens read from a file are written back unchanged."""
    lines = [HEADER, f"V {len(mesh.vertices)}"]
    toks = mesh.source_tokens
    for k, (x, y) in enumerate(mesh.vertices):
        if toks is not None and k < len(toks) and (float(toks[k][0]), float(toks[k][1])) == (x, y):
            lines.append(f"{toks[k][0]} {toks[k][1]}")
        else:
            lines.append(f"{_num_token(x)} {_num_token(y)}")
    quads = [(e, p) for e, p in zip(mesh.elements, mesh.orders) if len(e) == 4]
    tris = [(e, p) for e, p in zip(mesh.elements, mesh.orders) if len(e) == 3]
    for tag, group in (("Q", quads), ("T", tris)):
        if not group and tag == "T":
            continue
        lines.append(f"{tag} {len(group)}")
        for e, p in group:
            lines.append(" ".join(map(str, e)) + ("" if p is None else f" {p}"))
    return "\n".join(lines) + "\n"


def parse_mesh(text: str) -> Mesh:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0] != HEADER:
        raise MeshError(f"mesh file must start with '{HEADER}'")
    pos = 1
    verts, toks, els, orders = [], [], [], []
    seen = set()

    def count(tag):
        nonlocal pos
        m = re.fullmatch(rf"{tag}\s+(\d+)", lines[pos]) if pos < len(lines) else None
        if m is None:
            raise MeshError(f"expected '{tag} <count>' at line {pos + 1}")
        pos += 1
        return int(m.group(1))

    while pos < len(lines):
        tag = lines[pos].split()[0]
        if tag in seen or tag not in ("V", "Q", "T"):
            raise MeshError(f"unexpected section '{lines[pos]}'")
        seen.add(tag)
        k = count(tag)
        if pos + k > len(lines):
            raise MeshError(f"section {tag} is truncated")
        for ln in lines[pos : pos + k]:
            parts = ln.split()
            try:
                if tag == "V":
                    if len(parts) != 2:
                        raise ValueError
                    verts.append((float(parts[0]), float(parts[1])))
                    toks.append((parts[0], parts[1]))
                else:
                    nv = 4 if tag == "Q" else 3
                    if len(parts) not in (nv, nv + 1):
                        raise ValueError
                    els.append(tuple(int(x) for x in parts[:nv]))
                    orders.append(int(parts[nv]) if len(parts) > nv else None)
            except ValueError:
                raise MeshError(f"malformed {tag} line: '{ln}'") from None
        pos += k
    if "V" not in seen:
        raise MeshError("mesh file has no vertex section")
    # keep quads before triangles, as written
    return Mesh(np.array(verts, dtype=float), els, orders, tuple(toks))


def read_mesh(path) -> Mesh:
    with open(path, encoding="utf-8") as fh:
        return parse_mesh(fh.read())


def write_mesh(mesh: Mesh, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_mesh(mesh))
