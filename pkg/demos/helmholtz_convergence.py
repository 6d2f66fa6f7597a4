"""h-convergence for lap u + 2 w^2 u = 0 with u = cos(w x) cos(w y), w = p.

Prints the relative L2 error per mesh and the fitted slope of log(error)
against log(h).
"""

import sys

import numpy as np

from sparsesem.hps import Hierarchy
from sparsesem.mesh import make_rectangle
from sparsesem.problems import helmholtz_cos

p = int(sys.argv[1]) if len(sys.argv) > 1 else 5
sizes = [2, 4, 8, 16] if p <= 6 else [2, 4, 8]
ex = helmholtz_cos(float(p))
hs, errs = [], []
for n in sizes:
    h = Hierarchy(make_rectangle((-1, 1, -1, 1), n, n, p), ex.pdo).build()
    err = h.solve(ex.u).l2_error(ex.u)
    hs.append(2 / n)
    errs.append(err)
    print(f"{n:3d} x {n:<3d} N = {h.n_dof:7d}  error {err:.3e}  build {h.timings['local'] + h.timings['global']:.2f} s")
print(f"slope {np.polyfit(np.log(hs), np.log(errs), 1)[0]:.2f}")
