"""Augmented-data log-likelihood of the spatial SIR model with culling.

Farm sets: A never infected and never culled; B infected and naturally
culled; C infected and pre-emptively culled; D uninfected and pre-emptively
culled.  Times use ``numpy.inf`` for "never".

Internally farms are addressed by their position in the dataset; the rate
table ``beta`` holds ``beta(d)`` for a set of *rows* (farms that are, or may
become, infected) against every farm, with self-pairs zeroed so that a farm
never exerts pressure on itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .gp import KernelParams, build_projector


class InvalidStateError(ValueError):
    """The augmented state breaks a structural invariant (not merely zero density)."""


@dataclass(frozen=True)
class InfectiousPeriodParams:
    """Gamma infectious period with ``shape`` (lambda) and ``rate`` (gamma); mean shape / rate days."""

    shape: float
    rate: float

    def __post_init__(self):
        if not self.shape > 0 or not self.rate > 0:
            raise ValueError(f"gamma shape and rate must be positive, got {self.shape}, {self.rate}")

    @property
    def mean(self):
        return self.shape / self.rate


def _check_nonneg(x):
    if np.any(np.asarray(x) < 0):
        raise ValueError("infectious period must be non-negative")


def gamma_logpdf(x, shape, rate):
    x = np.asarray(x, dtype=float)
    return shape * np.log(rate) + special.xlogy(shape - 1.0, x) - rate * x - special.gammaln(shape)


def gamma_logsf(x, shape, rate):
    with np.errstate(divide="ignore"):
        return np.log(special.gammaincc(shape, rate * np.asarray(x, dtype=float)))


def gamma_pdf(x, params: InfectiousPeriodParams):
    _check_nonneg(x)
    return np.exp(gamma_logpdf(x, params.shape, params.rate))


def gamma_survivor(x, params: InfectiousPeriodParams):
    """Upper tail ``P(T > x)`` of the infectious period."""
    _check_nonneg(x)
    return special.gammaincc(params.shape, params.rate * np.asarray(x, dtype=float))


# -- rate functions ----------------------------------------------------------

def parametric_rate(kernel_id, d, beta0, beta1=None, beta2=None):
    """The five parametric distance kernels used as baselines.

    1: ``b0``; 2: ``b0 / (1 + d)``; 3: ``b0 / (1 + d^2)``;
    4: ``b0 / (1 + d^b1)``; 5: ``b0 / (1 + (d / b2)^b1)``.
    """
    d = np.asarray(d, dtype=float)
    if kernel_id == 1:
        return np.full_like(d, float(beta0))
    if kernel_id == 2:
        return beta0 / (1.0 + d)
    if kernel_id == 3:
        return beta0 / (1.0 + d * d)
    if kernel_id == 4:
        _need(beta1, "beta1")
        return beta0 / (1.0 + d ** beta1)
    if kernel_id == 5:
        _need(beta1, "beta1")
        _need(beta2, "beta2")
        return beta0 / (1.0 + (d / beta2) ** beta1)
    raise ValueError(f"unknown parametric kernel {kernel_id!r}; expected 1-5")


def _need(value, name):
    if value is None or not value > 0:
        raise ValueError(f"{name} must be given and positive")


@dataclass(frozen=True)
class ParametricRate:
    kernel_id: int
    beta0: float
    beta1: float | None = None
    beta2: float | None = None

    def __post_init__(self):
        parametric_rate(self.kernel_id, 0.0, self.beta0, self.beta1, self.beta2)
        if not self.beta0 > 0:
            raise ValueError("beta0 must be positive")

    def __call__(self, d):
        return parametric_rate(self.kernel_id, d, self.beta0, self.beta1, self.beta2)


@dataclass(frozen=True)
class ExponentialRate:
    """``scale * exp(-decay * d)``; the rate used in the simulation study."""

    scale: float
    decay: float

    def __call__(self, d):
        return self.scale * np.exp(-self.decay * np.asarray(d, dtype=float))


@dataclass(frozen=True)
class ConstantRate:
    value: float

    def __call__(self, d):
        return np.full(np.shape(d), float(self.value))


class GpRate:
    """``exp(g)`` where ``g`` is the projection of grid values ``g_bar``."""

    def __init__(self, g_bar, d_bar, params: KernelParams):
        self.g_bar = np.asarray(g_bar, dtype=float)
        self.d_bar = np.asarray(d_bar, dtype=float)
        self.params = params

    def log_rate(self, d):
        d = np.asarray(d, dtype=float)
        P = build_projector(d.ravel(), self.d_bar, self.params)
        return (P @ self.g_bar).reshape(d.shape)

    def __call__(self, d):
        return np.exp(self.log_rate(d))


def rate_table(rates, index, rows):
    """``beta`` for ``rows`` against every farm, self-pairs zeroed.

    ``rates`` is a callable on distance arrays; ``index`` a DistanceIndex.
    """
    rows = np.asarray(rows, dtype=np.int64)
    table = np.array(rates(index.rows(rows)), dtype=float)
    table[np.arange(len(rows)), rows] = 0.0
    return table


# -- state ---------------------------------------------------------------------

@dataclass
class AugmentedState:
    """Observed culling times plus the latent infection times.

    ``inf[k]`` is farm ``k``'s infection time (``inf`` if never infected) and
    ``omega`` the position of the initial case.  Pre-emptively culled farms
    with a finite infection time form set C.
    """

    inf: np.ndarray
    r_c: np.ndarray
    r_p: np.ndarray
    omega: int

    @classmethod
    def from_dataset(cls, dataset, inf, omega):
        r_c = np.where(dataset.natural, dataset.cull_times, np.inf)
        r_p = np.where(dataset.preemptive, dataset.cull_times, np.inf)
        return cls(np.array(inf, dtype=float), r_c, r_p, int(omega))

    @property
    def r(self):
        return np.minimum(self.r_c, self.r_p)

    @property
    def i_omega(self):
        return float(self.inf[self.omega])

    @property
    def N(self):
        return len(self.inf)

    def sets(self):
        infected = np.isfinite(self.inf)
        pre = np.isfinite(self.r_p)
        natural = np.isfinite(self.r_c) & ~pre
        return {
            "A": np.flatnonzero(~infected & ~natural & ~pre),
            "B": np.flatnonzero(natural),
            "C": np.flatnonzero(pre & infected),
            "D": np.flatnonzero(pre & ~infected),
        }

    def membership(self):
        """Infected flag for each pre-emptively culled farm (True means set C)."""
        pre = np.flatnonzero(np.isfinite(self.r_p))
        return dict(zip(pre.tolist(), np.isfinite(self.inf[pre]).tolist()))

    def check(self):
        check_state(self.inf, self.r_c, self.r_p, self.omega)


def check_state(inf, r_c, r_p, omega):
    r = np.minimum(r_c, r_p)
    infected = np.isfinite(inf)
    natural = np.isfinite(r_c) & ~np.isfinite(r_p)
    if not infected[omega]:
        raise InvalidStateError("the initial case has no infection time")
    if np.any(natural & ~infected):
        raise InvalidStateError("a naturally culled farm has no infection time")
    if np.any(infected & ~np.isfinite(r)):
        raise InvalidStateError("an infected farm is never removed")
    if np.any(inf[infected] > r[infected]):
        bad = np.flatnonzero(infected & (inf > r))
        raise InvalidStateError(f"infection after removal at positions {bad.tolist()}")


# -- single terms ----------------------------------------------------------------

def avoidance_exponent(beta_d, infector, target, target_in_D=False):
    """Exposure ``beta(d) * Delta`` of ``target`` to ``infector``.

    ``infector`` and ``target`` are ``(infection_time, removal_time)`` pairs;
    ``exp(-exposure)`` is the probability the target escapes this infector.
    For a target in D the exposure window ends at its pre-emptive cull.
    """
    i_j, r_j = infector
    i_k, r_k = target
    if not math.isfinite(i_j):
        raise ValueError("the infector must have a finite infection time")
    if target_in_D:
        span = min(r_j, r_k) - min(i_j, r_k)
    else:
        span = min(r_j, i_k) - min(i_j, i_k)
    if span < 0:
        raise InvalidStateError(f"negative exposure window {span}")
    if span == 0:
        return 0.0
    return float(beta_d) * span


class LikelihoodEngine:
    """Full and incremental evaluation for one dataset's culling times.

    Parameters
    ----------
    r_c, r_p : ndarray
        Natural and pre-emptive culling times (``inf`` where absent).
    rows : array_like
        Farm positions with a row in the rate tables passed to the methods.
    shape : float
        Gamma shape of the infectious period (fixed).
    """

    def __init__(self, r_c, r_p, rows, shape):
        self.r_c = np.asarray(r_c, dtype=float)
        self.r_p = np.asarray(r_p, dtype=float)
        self.r = np.minimum(self.r_c, self.r_p)
        self.natural = np.isfinite(self.r_c) & ~np.isfinite(self.r_p)
        self.rows = np.asarray(rows, dtype=np.int64)
        self.pos = np.full(len(self.r), -1, dtype=np.int64)
        self.pos[self.rows] = np.arange(len(self.rows))
        self.shape = float(shape)

    def _rows_for(self, farms):
        p = self.pos[farms]
        if np.any(p < 0):
            raise ValueError("rate table lacks a row for an infected farm")
        return p

    def pressure(self, inf, beta):
        infected = np.flatnonzero(np.isfinite(inf))
        if infected.size == 0:
            return 0.0
        e = np.minimum(inf, self.r)
        ii = inf[infected][:, None]
        ri = self.r[infected][:, None]
        expo = np.minimum(ri, e) - np.minimum(ii, e)
        return float(np.einsum("ij,ij->", beta[self._rows_for(infected)], expo))

    def hazards(self, inf, beta):
        """``phi`` for every infected farm, in position order."""
        infected = np.flatnonzero(np.isfinite(inf))
        ii = inf[infected]
        ri = self.r[infected]
        sub = beta[np.ix_(self._rows_for(infected), infected)]
        can = (ii[:, None] < ii[None, :]) & (ii[None, :] < ri[:, None])
        return infected, np.where(can, sub, 0.0).sum(axis=0)

    def removal_terms(self, inf, rate):
        infected = np.flatnonzero(np.isfinite(inf))
        periods = self.r[infected] - inf[infected]
        nat = self.natural[infected]
        return (float(np.sum(gamma_logpdf(periods[nat], self.shape, rate)))
                + float(np.sum(gamma_logsf(periods[~nat], self.shape, rate))))

    def full(self, inf, omega, beta, rate):
        check_state(inf, self.r_c, self.r_p, omega)
        psi = self.pressure(inf, beta)
        infected, phi = self.hazards(inf, beta)
        phi = phi[infected != omega]
        if np.any(phi <= 0):
            return -math.inf
        total = -psi + float(np.sum(np.log(phi))) + self.removal_terms(inf, rate)
        return total if not math.isnan(total) else -math.inf

    def delta(self, inf, omega, j, new_time, beta, rate):
        """Change in log-likelihood when farm ``j``'s infection time becomes
        ``new_time`` (``inf`` deletes it), with everything else fixed.

        Only terms that involve ``j`` are evaluated.  Returns ``-inf`` when the
        new state has zero density; raises if the current state does.
        """
        old_time = float(inf[j])
        new_time = float(new_time)
        if old_time == new_time:
            return 0.0
        r = self.r
        r_j = r[j]
        if math.isfinite(new_time) and new_time > r_j:
            raise InvalidStateError("proposed infection after removal")
        if math.isfinite(new_time) and not math.isfinite(r_j):
            raise InvalidStateError("an infected farm is never removed")
        if self.natural[j] and not math.isfinite(new_time):
            raise InvalidStateError("a naturally culled farm has no infection time")
        if j == omega and not math.isfinite(new_time):
            raise InvalidStateError("the initial case has no infection time")

        infected = np.flatnonzero(np.isfinite(inf))
        others = infected[infected != j]
        i_o = inf[others]
        r_o = r[others]
        rows_o = self._rows_for(others)
        j_row = self._rows_for(np.array([j]))[0]
        col = beta[rows_o, j]
        e = np.minimum(inf, r)
        row = beta[j_row]

        def local(t):
            e_j = min(t, r_j)
            value = -float(col @ (np.minimum(r_o, e_j) - np.minimum(i_o, e_j)))
            if not math.isfinite(t):
                return value
            value -= float(row @ (np.minimum(r_j, e) - np.minimum(t, e)))
            if j != omega:
                phi = float(col[(i_o < t) & (t < r_o)].sum())
                if phi <= 0:
                    return -math.inf
                value += math.log(phi)
            x = r_j - t
            if self.natural[j]:
                value += float(gamma_logpdf(x, self.shape, rate))
            else:
                value += float(gamma_logsf(x, self.shape, rate))
            return value

        old = local(old_time)
        if old == -math.inf:
            raise ValueError("delta is undefined from a zero-density state")
        new = local(new_time)
        if new == -math.inf:
            return -math.inf
        total = new - old

        # hazards of other infected farms that j may or may not be able to reach
        ks = others[others != omega]
        if ks.size:
            i_k = inf[ks]
            was = (old_time < i_k) & (i_k < r_j)
            now = (new_time < i_k) & (i_k < r_j)
            changed = was != now
            if np.any(changed):
                kk = ks[changed]
                t_k = inf[kk]
                can = (i_o[:, None] < t_k[None, :]) & (t_k[None, :] < r_o[:, None])
                base = np.where(can, beta[np.ix_(rows_o, kk)], 0.0).sum(axis=0)
                b_jk = row[kk]
                before = base + b_jk * was[changed]
                after = base + b_jk * now[changed]
                if np.any(before <= 0):
                    raise ValueError("delta is undefined from a zero-density state")
                if np.any(after <= 0):
                    return -math.inf
                total += float(np.sum(np.log(after)) - np.sum(np.log(before)))
        return total


# -- public wrappers ---------------------------------------------------------------

def _engine_for(state: AugmentedState, rates, index, params=None, extra_rows=()):
    infected = np.flatnonzero(np.isfinite(state.inf))
    rows = np.union1d(infected, np.asarray(extra_rows, dtype=np.int64))
    shape = params.shape if params is not None else 1.0
    engine = LikelihoodEngine(state.r_c, state.r_p, rows, shape)
    return engine, rate_table(rates, index, rows)


def total_pressure(state: AugmentedState, rates, index) -> float:
    """Total infectious pressure: summed exposure of every farm to every infective."""
    state.check()
    engine, beta = _engine_for(state, rates, index)
    return engine.pressure(state.inf, beta)


def hazard_at_infection(state: AugmentedState, rates, j, index) -> float:
    """Summed rate from the farms infectious at farm ``j``'s infection time.

    ``j`` is a farm id.  Returns 0 when nobody was infectious then, which
    makes the log-likelihood ``-inf``.
    """
    k = index.index(j)
    if k == state.omega:
        raise ValueError("the initial case has no infection-event term")
    t = state.inf[k]
    if not math.isfinite(t):
        raise ValueError(f"farm {j} is not infected")
    r = state.r
    infectors = np.flatnonzero((state.inf < t) & (t < r))
    infectors = infectors[infectors != k]
    if infectors.size == 0:
        return 0.0
    d = index.rows(infectors)[:, k]
    return float(np.sum(rates(d)))


def log_likelihood(state: AugmentedState, rates, params: InfectiousPeriodParams, index) -> float:
    """Augmented log-likelihood of a fully specified epidemic.

    Sum of minus the total pressure, the log hazards at each infection other
    than the initial case, gamma log densities of completed infectious
    periods (set B) and log survivor terms of censored ones (set C).  Returns
    ``-inf`` for zero-density configurations and raises
    :class:`InvalidStateError` for structurally impossible ones.
    """
    engine, beta = _engine_for(state, rates, index, params)
    return engine.full(state.inf, state.omega, beta, params.rate)


def delta_log_likelihood(state: AugmentedState, j, new_time, rates,
                         params: InfectiousPeriodParams, index) -> float:
    """Log-likelihood change when farm position ``j`` moves to ``new_time``."""
    engine, beta = _engine_for(state, rates, index, params, extra_rows=[j])
    return engine.delta(state.inf, state.omega, j, new_time, beta, params.rate)
