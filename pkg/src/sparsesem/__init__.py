"""Sparse ultraspherical spectral elements with a hierarchical direct solver.

Elements are discretized in Chebyshev coefficient space, where differential
operators are almost banded. Element Dirichlet-to-Neumann maps are glued
pairwise by Schur complements into a reusable direct solver.

>>> from sparsesem import make_rectangle, PDOCoeffs, Hierarchy
>>> mesh = make_rectangle((0, 1, 0, 1), 2, 2, p=8)
>>> sol = Hierarchy(mesh, PDOCoeffs.laplace()).build().solve(lambda x, y: x * y)
>>> round(float(sol(0.3, 0.6)), 12)
0.18
"""

from .chebkit import assemble_ode, cheb_coeffs, clenshaw_eval, solve_almost_banded
from .config import ConfigError, ProblemConfig, dump_config, load_config, parse_config
from .geometry import GeometryError, PDOCoeffs, bilinear_map, duffy_map, jacobian_factors, transform_pdo
from .hps import (Hierarchy, HPSError, InterfaceResidualWarning, Solution, build, initialize, merge, solve,
                  timestep_backward_euler, update_rhs)
from .leaf import assemble_leaf, build_solution_operator, compat_projector, dtn_operator
from .mesh import (Mesh, MeshError, build_merge_tree, make_lshape, make_polygon, make_quad, make_rectangle,
                   make_triangle, read_mesh, refine_corner, refine_uniform, write_mesh)

__version__ = "0.1.0"

__all__ = [
    "assemble_ode", "cheb_coeffs", "clenshaw_eval", "solve_almost_banded",
    "ConfigError", "ProblemConfig", "dump_config", "load_config", "parse_config",
    "GeometryError", "PDOCoeffs", "bilinear_map", "duffy_map", "jacobian_factors", "transform_pdo",
    "Hierarchy", "HPSError", "InterfaceResidualWarning", "Solution", "build", "initialize", "merge", "solve",
    "timestep_backward_euler", "update_rhs",
    "assemble_leaf", "build_solution_operator", "compat_projector", "dtn_operator",
    "Mesh", "MeshError", "build_merge_tree", "make_lshape", "make_polygon", "make_quad", "make_rectangle",
    "make_triangle", "read_mesh", "refine_corner", "refine_uniform", "write_mesh",
]
