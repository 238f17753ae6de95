"""
Comparing culling policies through the posterior predictive
===========================================================

Fit a chain to a simulated outbreak, then replay new outbreaks from the
same first case under capped ring culls of different radii.  Every policy
sees the same random numbers, so differences come from the policy alone.
"""

import numpy as np

from farmgp.data import build_pseudo_grid, uniform_layout
from farmgp.likelihood import ExponentialRate, InfectiousPeriodParams
from farmgp.mcmc import FitOptions, PriorConfig, TuningConfig, run_chain
from farmgp.posterior import posterior_predictive
from farmgp.simulate import CullingPolicy, export_observed, simulate_study, table4_policy

farms = uniform_layout(150, 10.0, np.random.default_rng(3), flocks=True)
outbreak = simulate_study(farms, ExponentialRate(0.6, 2.0), InfectiousPeriodParams(4.0, 0.8),
                          CullingPolicy("simple_ring", 1.0), seed=5, replicates=1,
                          min_infected=25)[0]
observed = export_observed(outbreak)

grid = build_pseudo_grid(count=128, max_distance=observed.distances.max_distance())
trace = run_chain(observed, grid, TuningConfig(iterations=1500, burn_in=500),
                  PriorConfig(alpha=9.0), FitOptions(length=3.0, fix_l=True, initial_gamma=0.5),
                  np.random.default_rng(4))

# radius 0 means no pre-emptive culling at all
policies = [CullingPolicy("none")] + [table4_policy(r) for r in (1.0, 2.0, 3.0)]
summary = posterior_predictive(trace, observed, policies, np.random.default_rng(6),
                               replicates=2, draws=200)

print("radius  infected          culled            compensation (EUR)")
for label, inf, cul, cost in zip(summary.labels, summary.infected, summary.culled, summary.cost):
    print("%4.1f   %4d (%d, %d)   %4d (%d, %d)   %10.0f (%.0f, %.0f)"
          % (label, inf[1], inf[0], inf[2], cul[1], cul[0], cul[2], cost[1], cost[0], cost[2]))
