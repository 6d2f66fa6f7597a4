"""Two squares glued along x = 0, Laplace's equation, harmonic boundary data.

For any harmonic polynomial of degree at most p the discrete solution is the
polynomial itself, so the interface trace and both interiors come back to
rounding error. Run: ``python demos/glued_squares.py``.
"""

import numpy as np

from sparsesem import chebkit as ck
from sparsesem.geometry import PDOCoeffs
from sparsesem.hps import Hierarchy
from sparsesem.mesh import make_rectangle

p = 8
h = Hierarchy(make_rectangle((-2, 2, -1, 1), 2, 1, p), PDOCoeffs.laplace()).build()
print(f"{h.mesh.n_elem} elements, N = {h.n_dof}, root merge via {h.root.method}")

t = ck.cheb_points(p + 1)
for k in range(p + 1):
    u = lambda x, y, k=k: ((x + 1j * y) ** k).real + 0 * x
    sol = h.solve(u)
    worst = 0.0
    for c, m in zip(sol.coeffs, h.mesh.maps):
        R, S = np.meshgrid(t, t)
        worst = max(worst, np.abs(c - ck.cheb_coeffs2d(u(*m(R, S)))).max())
    print(f"Re (x + iy)^{k}: max coefficient error {worst:.1e}")
