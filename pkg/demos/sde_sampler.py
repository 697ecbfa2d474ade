"""
Stochastic sampling with the same marginals
===========================================

The SDE sampler injects noise but keeps every intermediate marginal of the
deterministic ODE. We check that on the analytic Gaussian field, then look at the
per-step transition log-density that policy-gradient training uses.
"""

import numpy as np
from scipy import stats

from flowgrpo import flow_matching as fm
from flowgrpo.samplers import TimeGrid, WindowSpec, ode_step, rollout, sde_step, sigma, stored_logpdf

field = lambda x, c, t: fm.analytic_gaussian_velocity(x, t, 2.0, 0.5)
grid = TimeGrid(200)
cond = np.zeros((5000, 1))

ode = rollout(None, cond, grid, seed=1, velocity=field).final[:, 0]
print(f"ODE samples: mean {ode.mean():.3f}, std {ode.std():.3f}")

# noise level a scales sigma_t = a * sqrt((1 - t) / t)
for a in (0.1, 0.3, 0.7):
    sde = rollout(None, cond, grid, WindowSpec.full(grid), a, seed=2, velocity=field).final[:, 0]
    p = stats.ks_2samp(sde, ode).pvalue
    print(f"a={a}: sigma(0.5)={sigma(0.5, a):.3f}  SDE mean {sde.mean():.3f} std {sde.std():.3f}  KS p={p:.3f}")

# with a = 0 the stochastic update is the Euler step, bit for bit
x, v, eps = np.array([0.3, -1.2]), np.array([1.0, 0.5]), np.array([0.7, -0.1])
print("a=0 matches Euler:", np.array_equal(sde_step(x, v, 0.4, 0.1, 0.0, eps), ode_step(x, v, 0.1)))

# a short trajectory with a two-step SDE window: only those steps carry a log-density
traj = rollout(None, np.zeros((3, 1)), TimeGrid(8), WindowSpec(2, 2), 0.7, seed=3, velocity=field)
print("SDE steps:", traj.sde_steps)
for rec in traj.sde_records():
    print(f"  step {rec.k}: t={rec.t:.3f} std {rec.std:.3f} log p per sample {np.round(stored_logpdf(rec), 3)}")
