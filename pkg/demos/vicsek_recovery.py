"""
Recovering the alignment function of a Vicsek model
===================================================

Simulate 100 particles for 10 steps, pick the interaction radius and kernel
parameters by cross-validation, and compare the predicted interaction
function with the true one, z(d) = d.
"""

import numpy as np

from ikfcg.estimation import SearchSpace, cv_search, fit, metrics, schema_builder
from ikfcg.particles import SimConfig, build_design, simulate
from ikfcg.svgplot import Figure

traj = simulate(SimConfig(n_p=100, n_tau=10, sigma0=0.1, radius=0.5, seed=0))

# %%
# Candidate radii 0.25, 0.5 and 1.0; the simulation used 0.5.
search = SearchSpace.default([(0.25,), (0.5,), (1.0,)])
res = cv_search(schema_builder("unnormalized_vicsek"), traj, search, seed=0)
k = res.params.kernels[0]
print(f"radius {res.params.radii[0]}, range {k.range:.3g}, variance {k.variance:.3g}, "
      f"noise {res.params.nugget:.3g}")

# %%
# Posterior of z on 200 evenly spaced velocities.
d_star = np.linspace(-1, 1, 200)
pred = fit(build_design(traj, res.params.schema()), res.params).predict(0, d_star)
m = metrics(pred, d_star)
print(f"NRMSE {m.nrmse:.4f}, 95% interval length {m.interval_length_95:.4f}, coverage {m.coverage_95:.2f}")

fig = Figure(title="alignment function", xlabel="neighbor velocity", ylabel="z(d)")
fig.band(d_star, pred.ci_lower, pred.ci_upper, label="95% interval")
fig.line(d_star, pred.mean, label="posterior mean")
fig.line(d_star, d_star, label="truth", dashed=True)
fig.save("vicsek_recovery.svg")
