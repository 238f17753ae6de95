"""Summaries of fitted chains and posterior-predictive policy comparison.

All quantiles are type-1 (inverse empirical CDF): the ``q`` quantile of a
sorted sample ``x_1..x_n`` is ``x_ceil(q n)``, always an observed value.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gp import KernelParams, build_projector
from .likelihood import InfectiousPeriodParams
from .simulate import CompensationTable, CullingPolicy, compensation, simulate_outbreak

LOWER, UPPER = 0.025, 0.975


def quantile(x, q, axis=None):
    """Type-1 quantile(s) of ``x``."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("quantile of an empty sample")
    return np.quantile(x, q, axis=axis, method="inverted_cdf")


def interval(x, axis=None):
    """``(lower, median, upper)`` with the central 95% band."""
    lo, med, hi = quantile(x, [LOWER, 0.5, UPPER], axis=axis)
    return lo, med, hi


@dataclass
class CurveSummary:
    knots: np.ndarray
    lower: np.ndarray
    median: np.ndarray
    upper: np.ndarray


def log_rate_at(trace, knots):
    """Projected ``g`` at ``knots`` for every retained sweep (sweeps x knots)."""
    knots = np.asarray(knots, dtype=float)
    out = np.empty((len(trace), len(knots)))
    for l in np.unique(trace.l):
        rows = trace.l == l
        P = build_projector(knots, trace.d_bar, KernelParams(trace.alpha, float(l)))
        out[rows] = trace.g_bar[rows] @ P.T
    return out


def summarize_curve(trace, knots) -> CurveSummary:
    """Pointwise median and 95% band of ``beta(d) = exp(g(d))`` at ``knots``."""
    if len(trace) == 0:
        raise ValueError("cannot summarise an empty trace")
    beta = np.exp(log_rate_at(trace, knots))
    lo, med, hi = interval(beta, axis=0)
    return CurveSummary(np.asarray(knots, float), lo, med, hi)


def aggregate_medians(curves):
    """Median and 95% band, across datasets, of per-dataset posterior medians."""
    meds = np.array([c.median for c in curves])
    lo, med, hi = interval(meds, axis=0)
    return CurveSummary(curves[0].knots, lo, med, hi)


def infection_probabilities(trace):
    """``{farm id: share of sweeps in which the pre-emptively culled farm was infected}``."""
    if len(trace) == 0:
        raise ValueError("cannot summarise an empty trace")
    share = trace.c_membership.mean(axis=0)
    return dict(zip(trace.preemptive_ids.tolist(), share.tolist()))


def infection_sum_median(trace):
    return float(quantile(trace.infection_sums(), 0.5))


def i_tilde(truth_sum, trace):
    """Relative error (percent) of the posterior-median infection-time sum.

    ``truth_sum`` is the true sum of infection times on the dataset's time
    axis.  Positive values mean the chain places infections too early on
    aggregate.
    """
    if truth_sum == 0:
        raise ValueError("true infection-time sum is zero; the relative error is undefined")
    estimate = infection_sum_median(trace)
    return (truth_sum - estimate) / truth_sum * 100.0


def mean_infectious_period(trace, shape=None):
    """``(lower, median, upper)`` of ``shape / gamma`` over the retained sweeps."""
    if len(trace) == 0:
        raise ValueError("cannot summarise an empty trace")
    shape = trace.shape if shape is None else shape
    return interval(shape / trace.gamma)


def scalar_summary(trace):
    """Quantile rows for gamma, mean infectious period, length scale and ``-i_omega``."""
    rows = {
        "gamma": trace.gamma,
        "mean_infectious_period": trace.shape / trace.gamma,
        "length_scale": trace.l,
        "neg_i_omega": -trace.i_omega,
    }
    return {k: interval(v) for k, v in rows.items()}


# -- posterior predictive -------------------------------------------------------------

@dataclass
class PredictiveSummary:
    """Per policy: ``(lower, median, upper)`` of infected, culled and euros,
    plus the raw replicate pool (policies x replicates).  ``sources[k]`` is
    the retained-sweep index and seed behind replicate column ``k``, enough
    to replay it."""

    labels: list
    infected: list
    culled: list
    cost: list
    pool: dict
    sources: list = field(default_factory=list)


class _PairRates:
    """``beta`` for every farm pair from one retained sweep, reusing the
    projector while the length scale stays the same."""

    def __init__(self, dataset, d_bar, alpha):
        self.upper = np.triu_indices(dataset.N, 1)
        self.d = dataset.distances.matrix()[self.upper]
        self.N = dataset.N
        self.d_bar = d_bar
        self.alpha = alpha
        self._l = None
        self._P = None

    def __call__(self, g_bar, l):
        if l != self._l:
            self._P = build_projector(self.d, self.d_bar, KernelParams(self.alpha, l))
            self._l = l
        beta = np.zeros((self.N, self.N))
        with np.errstate(over="ignore"):
            beta[self.upper] = np.exp(self._P @ g_bar)
        return beta + beta.T


_worker = {}


def _init_worker(dataset, d_bar, alpha, shape, omega, policies, table):
    _worker.update(dataset=dataset, rates=_PairRates(dataset, d_bar, alpha), shape=shape,
                   omega=omega, policies=policies, table=table)


def _run_draw(job):
    g_bar, l, gamma, seeds = job
    w = _worker
    beta = w["rates"](g_bar, l)
    params = InfectiousPeriodParams(w["shape"], gamma)
    out = []
    for seed in seeds:
        row = []
        for policy in w["policies"]:
            # every policy replays the same stream, so comparisons are paired
            rng = np.random.default_rng(seed)
            res = simulate_outbreak(w["dataset"], beta, params, w["omega"], policy, rng)
            row.append((res.n_infected, res.n_culled, compensation(res, w["dataset"], w["table"])))
        out.append(row)
    return out


def posterior_predictive(trace, dataset, policies, rng, replicates=1, draws=None,
                         table: CompensationTable | None = None, workers=1,
                         labels=None) -> PredictiveSummary:
    """Simulate future outbreaks under each policy from the fitted posterior.

    For each of ``draws`` retained sweeps (all by default, otherwise chosen
    uniformly with replacement) the rate function and gamma rate of that
    same sweep drive ``replicates`` outbreaks per policy, all started by the
    earliest naturally culled farm.  Every replicate has its own seed and
    each policy restarts from it, so policies are compared on common
    random numbers.

    Parameters
    ----------
    policies : list of CullingPolicy
    table : CompensationTable, optional
        Defaults to the standard euro-per-bird rates.
    workers : int
        Process count; the output does not depend on it.
    """
    if len(trace) == 0:
        raise ValueError("cannot predict from an empty trace")
    table = table or CompensationTable()
    missing = [f.id for f in dataset.farms if f.flock_type is None or f.flock_size is None]
    if missing:
        raise ValueError(f"no flock data for farms {missing[:20]}"
                         + (" ..." if len(missing) > 20 else ""))
    omega = int(dataset.ids[dataset.first_culled()])
    if draws is None:
        picks = np.arange(len(trace))
    else:
        picks = np.sort(rng.integers(len(trace), size=draws))
    seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(len(picks) * replicates)
    jobs = [(trace.g_bar[n], float(trace.l[n]), float(trace.gamma[n]),
             seeds[a * replicates:(a + 1) * replicates]) for a, n in enumerate(picks)]
    init = (dataset, trace.d_bar, trace.alpha, trace.shape, omega, list(policies), table)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=init) as ex:
            chunks = list(ex.map(_run_draw, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        _init_worker(*init)
        chunks = [_run_draw(job) for job in jobs]
    results = [row for chunk in chunks for row in chunk]

    pool = {k: np.array([[r[p][i] for r in results] for p in range(len(policies))])
            for i, k in enumerate(("infected", "culled", "cost"))}
    labels = labels or [_label(p) for p in policies]
    sources = [(int(picks[k // replicates]), seeds[k]) for k in range(len(seeds))]
    summary = PredictiveSummary(labels, [], [], [], pool, sources)
    for p in range(len(policies)):
        summary.infected.append(interval(pool["infected"][p]))
        summary.culled.append(interval(pool["culled"][p]))
        summary.cost.append(interval(pool["cost"][p]))
    return summary


def _label(policy: CullingPolicy):
    return policy.radius if policy.mode != "none" else 0.0
