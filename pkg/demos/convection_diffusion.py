"""Backward Euler for a Gaussian pulse carried by Kovasznay flow.

The operator does not change between steps, so after one build each step only
refreshes the right-hand side. The script times that against rebuilding the
solver for the first few steps and prints the pulse mass at each snapshot.
"""

import time

import numpy as np

from sparsesem.problems import convection_diffusion

t0 = time.perf_counter()
sol, snaps, steps = convection_diffusion(p=16, snapshot_times=[1.0, 2.5, 5.0])
t_update = time.perf_counter() - t0
for t, s in sorted(snaps.items()):
    print(f"t = {t:3.1f}: mass {s.integral():.6f}, max {s.max_abs():.4f}")

_, _, rebuild = convection_diffusion(p=16, t_final=0.3, use_update=False)
print(f"first step (build) {steps[0]:.2f} s, later steps {np.mean(steps[1:]):.3f} s")
print(f"update run {t_update:.1f} s; rebuilding every step ~{np.mean(rebuild) * len(steps):.0f} s")
