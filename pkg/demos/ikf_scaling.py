"""
Covariance products in linear time
==================================

Build a Matern-2.5 covariance on sorted random inputs, multiply it by a
vector with the inverse Kalman filter, and compare against the dense matrix
where that is still affordable.  Then time the filter up to a million inputs.
"""

import time

import numpy as np

from ikfcg.ikf import IkfOperator
from ikfcg.matern import MaternParams, SortedInputs, build_dlm, kernel_matrix

rng = np.random.default_rng(0)
params = MaternParams(variance=1.0, range=0.1, roughness=2.5)

# %%
# Exactness against the dense kernel matrix.  The model has no noise, so a
# jitter is added inside the filter and removed again afterwards.
x = SortedInputs.from_unordered(rng.uniform(0, 1, 1000)).values
u = rng.standard_normal(x.size)
op = IkfOperator(build_dlm(params, x))
dense = kernel_matrix(params, x) @ u
print(f"jitter {op.jitter:.3g}, max abs error {np.abs(op.sigma_matvec(u) - dense).max():.2e}")

# %%
# Timing: filter construction plus one product, best of three.
for n in (10_000, 100_000, 1_000_000):
    x = SortedInputs.from_unordered(rng.uniform(0, 1, n)).values
    spec = build_dlm(params, x)
    u = rng.standard_normal(n)
    best = np.inf
    for _ in range(3):
        t0 = time.perf_counter()
        IkfOperator(spec).sigma_matvec(u)
        best = min(best, time.perf_counter() - t0)
    print(f"N = {n:>9,d}: {best:.3f} s")
