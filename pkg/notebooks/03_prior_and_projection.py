"""
Two sanity checks: the sampler without data, and the knot projection
====================================================================

With the likelihood switched off the chain should return the priors.
Projecting a field from its knots onto the knots themselves is exact.
"""

import numpy as np

from farmgp.gp import KernelParams, build_covariance, build_projector, sample_prior
from farmgp.validate import prior_chain, prior_marginal_check

# knots spaced on the scale of the prior mean length scale (100 km)
trace = prior_chain(seed=1, sweeps=50000, d_bar=(0.0, 100.0, 200.0))
for name, x in (("gamma", trace.gamma), ("l", trace.l), ("-i_omega", -trace.i_omega)):
    err, ks, crit, ess = prior_marginal_check(x, 0.01)
    print("%-9s mean %.1f  KS %.4f (1%% critical %.4f)  ESS %.0f" % (name, x.mean(), ks, crit, ess))

# a draw on 100 knots, projected back onto the same knots
rng = np.random.default_rng(2)
knots = np.sort(rng.uniform(0, 30, 100))
params = KernelParams(9.0, 3.0)
g = sample_prior(build_covariance(knots, params), rng)
P = build_projector(knots, knots, params)
print("max |P g - g| =", np.abs(P @ g - g).max())

# between knots the projection is the GP conditional mean
mid = 0.5 * (knots[:-1] + knots[1:])
print(np.round((build_projector(mid, knots, params) @ g)[:5], 3))
