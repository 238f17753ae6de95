"""Slow reference evaluators used to cross-check the optimised code paths.

Everything here is written from the model definition with plain loops and
scipy.stats, sharing no code with :mod:`farmgp.likelihood`.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import stats


def naive_log_likelihood(inf, r_c, r_p, omega, beta_of, shape, rate):
    """Augmented log-likelihood by direct enumeration.

    Parameters
    ----------
    inf, r_c, r_p : sequences of float
        Infection, natural and pre-emptive culling times per farm.
    omega : int
        Position of the initial case.
    beta_of : callable
        ``beta_of(j, k)`` gives the rate between farms ``j`` and ``k``.
    """
    n = len(inf)
    r = [min(a, b) for a, b in zip(r_c, r_p)]
    infected = [j for j in range(n) if math.isfinite(inf[j])]
    in_D = [math.isfinite(r_p[k]) and not math.isfinite(inf[k]) for k in range(n)]

    log_avoid = 0.0
    for j in infected:
        for k in range(n):
            if k == j:
                continue
            if in_D[k]:
                window = min(r[j], r[k]) - min(inf[j], r[k])
            else:
                window = min(r[j], inf[k]) - min(inf[j], inf[k])
            log_avoid -= beta_of(j, k) * window

    log_hazard = 0.0
    for j in infected:
        if j == omega:
            continue
        phi = sum(beta_of(k, j) for k in range(n) if k != j and inf[k] < inf[j] < r[k])
        if phi == 0.0:
            return -math.inf
        log_hazard += math.log(phi)

    dist = stats.gamma(a=shape, scale=1.0 / rate)
    log_removal = 0.0
    for j in infected:
        period = r[j] - inf[j]
        if math.isfinite(r_p[j]):
            log_removal += dist.logsf(period)
        else:
            log_removal += dist.logpdf(period)
    total = log_avoid + log_hazard + log_removal
    return -math.inf if math.isnan(total) else total


def random_instance(rng, n_max=6, infected_max=4):
    """A random valid augmented state on at most ``n_max`` farms.

    Returns ``(inf, r_c, r_p, omega, beta)`` with ``beta`` a symmetric
    positive matrix (zero diagonal).
    """
    n = int(rng.integers(2, n_max + 1))
    n_inf = int(rng.integers(1, min(infected_max, n) + 1))
    order = rng.permutation(n)
    infected = order[:n_inf]
    rest = order[n_inf:]
    inf = np.full(n, np.inf)
    r_c = np.full(n, np.inf)
    r_p = np.full(n, np.inf)
    # most infections land inside an earlier farm's infectious window; a few
    # are placed freely so that zero-density states also occur
    for rank, j in enumerate(infected):
        if rank == 0 or rng.random() < 0.15:
            t = rng.uniform(-5.0, 10.0) if rank else -5.0 * rng.random()
        else:
            a = infected[rng.integers(rank)]
            t = rng.uniform(inf[a], min(r_c[a], r_p[a]))
        inf[j] = t
        period = rng.gamma(2.0, 2.0) + 1e-3
        if rank and rng.random() < 0.3:
            r_p[j] = t + period
        else:
            r_c[j] = t + period
    omega = int(infected[np.argmin(inf[infected])])
    for k in rest:
        if rng.random() < 0.4:
            r_p[k] = rng.uniform(-2.0, 15.0)
    b = rng.lognormal(-1.0, 1.0, size=(n, n))
    beta = np.triu(b, 1)
    beta = beta + beta.T
    return inf, r_c, r_p, omega, beta


def random_perturbation(rng, inf, r_c, r_p, omega, shape=2.0, rate=0.5):
    """One random single-farm change usable by the sampler.

    Moves an infected farm's time to ``r - T`` (``T`` gamma), gives an
    uninfected pre-emptively culled farm a time, or removes the time of an
    infected pre-emptively culled farm.  Returns ``(j, new_time)``.
    """
    n = len(inf)
    infected = [j for j in range(n) if math.isfinite(inf[j])]
    spare = [j for j in range(n) if math.isfinite(r_p[j]) and not math.isfinite(inf[j])]
    culled_c = [j for j in infected if math.isfinite(r_p[j]) and j != omega]
    kinds = ["move"] + (["add"] if spare else []) + (["delete"] if culled_c else [])
    kind = kinds[rng.integers(len(kinds))]
    if kind == "delete":
        return int(culled_c[rng.integers(len(culled_c))]), math.inf
    pool = infected if kind == "move" else spare
    j = int(pool[rng.integers(len(pool))])
    r = min(r_c[j], r_p[j])
    return j, float(r - rng.gamma(shape, 1.0 / rate))
