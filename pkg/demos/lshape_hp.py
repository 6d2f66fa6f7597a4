"""hp refinement for the L-shape corner singularity u = r^(2/3) sin(2 theta / 3).

Elements touching the reentrant corner are split toward it, the rest gain
polynomial degree. Each pass prints N, the relative L2 error, the grading
depth and the range of orders.
"""

from sparsesem.problems import lshape_hp


def show(step):
    print(f"N = {step.n_dof:6d}  error {step.error:.2e}  levels {step.levels:2d}  "
          f"p {step.p_min}..{step.p_max}  elements {step.n_elem}")


met, history, mesh = lshape_hp(callback=show)
print()
for tol, n, err in met:
    print(f"tolerance {tol:.0e} first met at N = {n} (error {err:.2e})")
