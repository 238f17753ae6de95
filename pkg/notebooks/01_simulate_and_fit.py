"""
Simulate an outbreak and recover the infection-rate curve
=========================================================

A small version of the simulation study: farms on a square, an
exponentially decaying infection rate, gamma infectious periods and a 1 km
ring cull.  The fit only sees culling times and pre-emptive flags.
"""

import numpy as np

from farmgp.data import build_pseudo_grid, uniform_layout
from farmgp.likelihood import ExponentialRate, InfectiousPeriodParams
from farmgp.mcmc import FitOptions, PriorConfig, TuningConfig, run_chain
from farmgp.posterior import i_tilde, mean_infectious_period, summarize_curve
from farmgp.simulate import CullingPolicy, export_observed, simulate_study

rng = np.random.default_rng(1)
farms = uniform_layout(300, 16.0, rng)
true_rate = ExponentialRate(0.6, 2.0)
outbreak = simulate_study(farms, true_rate, InfectiousPeriodParams(4.0, 0.8),
                          CullingPolicy("simple_ring", 1.0), seed=7, replicates=1,
                          min_infected=40)[0]
print({k: len(v) for k, v in outbreak.sets.items()})

# what an analyst would have: day 0 is the first natural cull
observed = export_observed(outbreak)

# 256 equally spaced knots up to the largest distance, l and alpha fixed
grid = build_pseudo_grid(count=256, max_distance=observed.distances.max_distance())
trace = run_chain(observed, grid,
                  TuningConfig(iterations=3000, burn_in=1000, moves_per_iteration=20),
                  PriorConfig(alpha=9.0, shape=4.0),
                  FitOptions(length=3.0, fix_l=True, initial_gamma=0.5),
                  np.random.default_rng(2))

# 3000 sweeps keep this quick; the acceptance runs use 20,000 per dataset and
# the curve at short and long range is noticeably rougher here
d = np.array([0.5, 1.0, 2.0, 3.0])
curve = summarize_curve(trace, d)
for row in zip(d, true_rate(d), curve.median, curve.lower, curve.upper):
    print("d=%.1f  true %.4f  posterior %.4f (%.4f, %.4f)" % row)

lo, med, hi = mean_infectious_period(trace)
print("mean infectious period %.2f (%.2f, %.2f)" % (med, lo, hi))

# relative error of the summed infection times, truth on the same time axis
truth = np.sum(outbreak.infection_times[outbreak.infected] - outbreak.first_natural_cull())
print("i~ = %.1f%%" % i_tilde(truth, trace))
