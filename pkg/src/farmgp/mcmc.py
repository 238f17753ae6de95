"""Data-augmentation MCMC for the GP transmission model.

One sweep updates, in order: the grid log-rates ``g_bar`` (underrelaxed block
proposal), the length scale, the gamma rate, the initial-case label, the
initial infection time, and then a batch of infection-time moves each chosen
uniformly among *move*, *add* and *delete*.

Every update returns ``(accepted, log_alpha)`` so that tests can compare the
logged acceptance ratio against a brute-force evaluation.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .gp import (FactorizationError, KernelParams, build_covariance, build_projector,
                 log_density, sample_prior, underrelaxed_propose)
from .likelihood import LikelihoodEngine, check_state, gamma_logpdf

log = logging.getLogger(__name__)

TRACE_SCHEMA = "farmgp.trace"
TRACE_VERSION = 1

UPDATES = ("g", "l", "gamma", "omega", "i_omega")
MOVE_KINDS = ("move", "add", "delete")


class InitializationError(RuntimeError):
    pass


class AuditError(RuntimeError):
    """Cached and freshly evaluated log-likelihoods disagree."""


@dataclass
class TuningConfig:
    """Proposal scales and run length.

    ``sigma_l``, ``sigma_gamma`` and ``sigma_i_omega`` are random-walk
    standard deviations; ``delta`` the underrelaxation of the block update.
    With ``adapt`` on, the four are tuned during burn-in and frozen after.
    """

    delta: float = 0.1
    sigma_l: float = 1.0
    sigma_gamma: float = 0.05
    sigma_i_omega: float = 1.0
    moves_per_iteration: int = 10
    iterations: int = 1000
    burn_in: int = 100
    thinning: int = 1
    seed: int | None = None
    adapt: bool = True

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must lie in (0, 1]")
        for name in ("sigma_l", "sigma_gamma", "sigma_i_omega"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.moves_per_iteration < 0 or self.iterations < 0 or self.burn_in < 0:
            raise ValueError("counts must be non-negative")
        if self.thinning < 1:
            raise ValueError("thinning must be at least 1")
        if self.iterations and self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")

    @property
    def retained(self):
        return max(self.iterations - self.burn_in, 0) // self.thinning


@dataclass
class PriorConfig:
    """Exponential prior rates on ``l``, ``gamma`` and ``-i_omega``; fixed
    GP scale ``alpha`` and gamma shape."""

    l_rate: float = 0.01
    gamma_rate: float = 0.01
    i_omega_rate: float = 0.01
    alpha: float = 9.0
    shape: float = 4.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class FitOptions:
    """Switches that change what the chain samples.

    Parameters
    ----------
    length : float, optional
        Starting length scale; drawn from its prior when omitted.  Required
        when ``fix_l`` is set.
    fixed : tuple of str
        Parameter blocks held at their initial values (names from ``UPDATES``).
    move_kinds : tuple of str
        Which infection-time moves are proposed.
    prior_only : bool
        Drop the likelihood so the chain targets the prior.
    fixed_rate : callable, optional
        Use this rate function of distance instead of the GP (``g`` is then
        not sampled).
    initial_gamma : float, optional
        Starting gamma rate; drawn from its prior when omitted.
    initial_field : {"constant", "prior"}
        Starting log-rate field.  ``constant`` puts every knot at the log of
        the constant rate that best explains the initial infection times;
        ``prior`` draws it from the GP prior, which with a large ``alpha``
        starts from rates many orders of magnitude off and needs a long
        burn-in.  Chains without a likelihood always start from a prior draw.
    """

    length: float | None = None
    fix_l: bool = False
    fixed: tuple = ()
    move_kinds: tuple = MOVE_KINDS
    prior_only: bool = False
    fixed_rate: object = None
    initial_gamma: float | None = None
    initial_field: str = "constant"
    audit_interval: int = 1000
    checkpoint_interval: int = 1000
    init_retries: int = 1000

    def __post_init__(self):
        unknown = set(self.fixed) - set(UPDATES)
        if unknown:
            raise ValueError(f"unknown update names {sorted(unknown)}")
        bad = set(self.move_kinds) - set(MOVE_KINDS)
        if bad:
            raise ValueError(f"unknown move kinds {sorted(bad)}")
        if self.fix_l and self.length is None:
            raise ValueError("fix_l needs a length")
        if self.length is not None and not self.length > 0:
            raise ValueError("length must be positive")
        if self.initial_field not in ("constant", "prior"):
            raise ValueError(f"initial_field must be 'constant' or 'prior', got {self.initial_field!r}")

    @property
    def frozen(self):
        out = set(self.fixed)
        if self.fix_l:
            out.add("l")
        if self.fixed_rate is not None:
            out.update(("g", "l"))
        return out


@dataclass
class ChainState:
    """Current values of every sampled quantity.

    ``inf`` is indexed by dataset position; ``omega`` is a position too.
    """

    g_bar: np.ndarray
    l: float
    gamma: float
    omega: int
    inf: np.ndarray
    loglik: float
    m: int
    m_tilde: int

    @property
    def i_omega(self):
        return float(self.inf[self.omega])


@dataclass
class ChainTrace:
    """Retained samples of one chain.

    ``inf`` holds infection times for the ``active_ids`` columns (naturally
    and pre-emptively culled farms) with ``inf`` for uninfected farms.
    """

    d_bar: np.ndarray
    alpha: float
    shape: float
    active_ids: np.ndarray
    preemptive_ids: np.ndarray
    iteration: np.ndarray
    g_bar: np.ndarray
    l: np.ndarray
    gamma: np.ndarray
    omega: np.ndarray
    i_omega: np.ndarray
    inf: np.ndarray
    loglik: np.ndarray
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.l)

    @property
    def c_membership(self):
        """Boolean matrix (sweeps x pre-emptive farms), columns follow ``preemptive_ids``."""
        col_of = {int(fid): c for c, fid in enumerate(self.active_ids)}
        cols = np.array([col_of[int(fid)] for fid in self.preemptive_ids], dtype=np.int64)
        return np.isfinite(self.inf[:, cols])

    def infection_sums(self):
        """Per-sweep sum of finite infection times (initial case included)."""
        return np.where(np.isfinite(self.inf), self.inf, 0.0).sum(axis=1)

    @classmethod
    def empty(cls, d_bar, alpha, shape, active_ids, preemptive_ids, n):
        K, A = len(d_bar), len(active_ids)
        return cls(np.asarray(d_bar, float), float(alpha), float(shape),
                   np.asarray(active_ids, np.int64), np.asarray(preemptive_ids, np.int64),
                   np.zeros(n, np.int64), np.zeros((n, K)), np.zeros(n), np.zeros(n),
                   np.zeros(n, np.int64), np.zeros(n), np.full((n, A), np.inf), np.zeros(n))

    def truncated(self, n):
        names = ("iteration", "g_bar", "l", "gamma", "omega", "i_omega", "inf", "loglik")
        kw = {k: getattr(self, k)[:n] for k in names}
        return ChainTrace(self.d_bar, self.alpha, self.shape, self.active_ids,
                          self.preemptive_ids, stats=self.stats, **kw)


class _Adaptive:
    """Robbins-Monro step sizes kept on the log scale."""

    targets = {"delta": 0.23, "sigma_l": 0.44, "sigma_gamma": 0.44, "sigma_i_omega": 0.44}

    def __init__(self, tuning: TuningConfig):
        self.log = {k: math.log(getattr(tuning, k)) for k in self.targets}

    def value(self, name):
        return math.exp(self.log[name])

    def step(self, name, accepted, t):
        self.log[name] += (float(accepted) - self.targets[name]) / (t + 1) ** 0.6
        if name == "delta":
            self.log[name] = min(max(self.log[name], math.log(1e-6)), 0.0)


class Sampler:
    """Holds one chain's state and performs the individual updates.

    Parameters
    ----------
    dataset : Dataset
    d_bar : array_like
        Pseudo grid for the GP.
    tuning, prior, options
        See :class:`TuningConfig`, :class:`PriorConfig`, :class:`FitOptions`.
    rng : numpy.random.Generator
    state : ChainState, optional
        Start from this state instead of initialising one.
    """

    def __init__(self, dataset, d_bar, tuning: TuningConfig, prior: PriorConfig,
                 options: FitOptions | None = None, rng=None, state=None):
        self.dataset = dataset
        self.d_bar = np.asarray(d_bar, dtype=float)
        self.tuning = tuning
        self.prior = prior
        self.options = options or FitOptions()
        self.rng = rng if rng is not None else np.random.default_rng(tuning.seed)
        self.adaptive = _Adaptive(tuning)
        self.frozen = self.options.frozen

        N = dataset.N
        self.N = N
        cull = dataset.cull_times
        pre = dataset.preemptive
        self.r_c = np.where(dataset.natural, cull, np.inf)
        self.r_p = np.where(pre, cull, np.inf)
        self.r = np.minimum(self.r_c, self.r_p)
        self.natural_pos = np.flatnonzero(dataset.natural)
        self.pre_pos = np.flatnonzero(pre)
        self.rows = np.flatnonzero(np.isfinite(cull))
        self.engine = LikelihoodEngine(self.r_c, self.r_p, self.rows, prior.shape)
        self._row_dist = dataset.distances.rows(self.rows)
        # each unordered pair is projected once and scattered into the table
        lo = np.minimum(self.rows[:, None], np.arange(N)[None, :])
        hi = np.maximum(self.rows[:, None], np.arange(N)[None, :])
        _, first, self._pair_of = np.unique((lo * N + hi).ravel(), return_index=True,
                                            return_inverse=True)
        self._pair_dist = self._row_dist.ravel()[first]
        self._self = (np.arange(len(self.rows)), self.rows)

        if self.options.fixed_rate is not None:
            self._fixed_beta = self._zero_self(np.array(self.options.fixed_rate(self._row_dist), float))
        else:
            self._fixed_beta = None
        self._projected = self._fixed_beta is None and not self.options.prior_only
        self.counts = {k: [0, 0] for k in UPDATES + MOVE_KINDS}

        if state is None:
            state = self.init_chain()
        self.state = state
        self._set_length(state.l)
        self.beta = self._beta(state.g_bar)

    # -- rates ----------------------------------------------------------------------

    def _zero_self(self, table):
        table[self._self] = 0.0
        return table

    def _set_length(self, l):
        params = KernelParams(self.prior.alpha, l)
        self.cov = build_covariance(self.d_bar, params)
        if self._projected:
            self.projector = build_projector(self._pair_dist, self.d_bar, params, self.cov)

    def _beta_with(self, projector, g_bar):
        if self._fixed_beta is not None:
            return self._fixed_beta
        with np.errstate(over="ignore"):
            values = np.exp(projector @ g_bar)
        table = values[self._pair_of].reshape(self._row_dist.shape)
        return self._zero_self(table)

    def _beta(self, g_bar):
        if self._fixed_beta is not None:
            return self._fixed_beta
        if not self._projected:
            return None  # rates are never used without a likelihood
        return self._beta_with(self.projector, g_bar)

    # -- likelihood -------------------------------------------------------------------

    def full_loglik(self, inf=None, omega=None, beta=None, gamma=None):
        s = getattr(self, "state", None)
        if self.options.prior_only:
            if inf is not None or omega is not None:  # only a changed state needs checking
                check_state(s.inf if inf is None else inf, self.r_c, self.r_p,
                            s.omega if omega is None else omega)
            return 0.0
        inf = s.inf if inf is None else inf
        omega = s.omega if omega is None else omega
        beta = self.beta if beta is None else beta
        gamma = s.gamma if gamma is None else gamma
        return self.engine.full(inf, omega, beta, gamma)

    def _delta(self, j, new_time):
        if self.options.prior_only:
            return 0.0
        s = self.state
        return self.engine.delta(s.inf, s.omega, j, new_time, self.beta, s.gamma)

    def _period_logpdf(self, x, gamma=None):
        gamma = self.state.gamma if gamma is None else gamma
        return float(gamma_logpdf(x, self.prior.shape, gamma))

    def _draw_period(self, gamma=None):
        gamma = self.state.gamma if gamma is None else gamma
        return float(self.rng.gamma(self.prior.shape, 1.0 / gamma))

    # -- initialisation -----------------------------------------------------------------

    def init_chain(self) -> ChainState:
        """Starting state with a finite log-likelihood.

        ``g_bar``, ``gamma`` (unless given) and ``l`` (unless given) come from
        their priors.  The initial case is the earliest natural cull.  Other
        naturally culled farms, in order of culling, get ``r - T`` with ``T`` a
        gamma draw, redrawn until some earlier farm is infectious at that time;
        after ``init_retries`` failures the time is put midway through the
        infectious window of the latest-culled farm already placed.
        """
        rng = self.rng
        opts = self.options
        if self.natural_pos.size == 0:
            raise InitializationError("dataset has no naturally culled farm")
        l = opts.length if opts.length is not None else rng.exponential(1.0 / self.prior.l_rate)
        gamma = opts.initial_gamma
        if gamma is None:
            gamma = rng.exponential(1.0 / self.prior.gamma_rate)
        cov = build_covariance(self.d_bar, KernelParams(self.prior.alpha, l))
        g_bar = sample_prior(cov, rng)

        omega = self.dataset.first_culled()
        inf = np.full(self.N, np.inf)
        # the initial time has negative prior support
        inf[omega] = min(self.r[omega], 0.0) - self._draw_period(gamma)
        placed = [omega]
        order = self.natural_pos[np.lexsort((self.dataset.ids[self.natural_pos],
                                             self.r[self.natural_pos]))]
        for j in order:
            if j == omega:
                continue
            placed_arr = np.asarray(placed)
            for _ in range(opts.init_retries):
                t = self.r[j] - self._draw_period(gamma)
                if t > inf[omega] and np.any((inf[placed_arr] < t) & (t < self.r[placed_arr])):
                    break
            else:
                k = placed_arr[np.argmax(self.r[placed_arr])]
                t = 0.5 * (inf[k] + self.r[k])
            inf[j] = t
            placed.append(j)

        if self._projected and opts.initial_field == "constant":
            g_bar = np.full(self.d_bar.size, self._constant_log_rate(inf))
        m = int(self.pre_pos.size)
        state = ChainState(g_bar, float(l), float(gamma), int(omega), inf, 0.0, m, 0)
        self.state = state
        self._set_length(l)
        self.beta = self._beta(g_bar)
        ll = self.full_loglik()
        if not math.isfinite(ll):
            raise InitializationError(
                "initial state has zero density; try a smaller initial gamma rate "
                "(longer infectious periods)")
        state.loglik = ll
        return state

    def _constant_log_rate(self, inf):
        # maximiser of -b * pressure(1) + (n - 1) log b for a constant rate b
        unit = self._zero_self(np.ones(self._row_dist.shape))
        exposure = self.engine.pressure(inf, unit)
        n = int(np.sum(np.isfinite(inf)))
        if n < 2 or exposure <= 0:
            return 0.0
        return math.log((n - 1) / exposure)

    # -- parameter updates ----------------------------------------------------------------

    def update_g(self):
        s = self.state
        delta = self.adaptive.value("delta")
        proposal = underrelaxed_propose(s.g_bar, delta, self.cov, self.rng)
        beta = self._beta(proposal)
        ll = self.full_loglik(beta=beta)
        log_alpha = ll - s.loglik
        ok = self._accept(log_alpha)
        if ok:
            s.g_bar, s.loglik, self.beta = proposal, ll, beta
        return ok, log_alpha

    def update_l(self):
        s = self.state
        new = s.l + self.adaptive.value("sigma_l") * self.rng.standard_normal()
        if new <= 0:
            return False, -math.inf
        try:
            cov = build_covariance(self.d_bar, KernelParams(self.prior.alpha, new))
        except FactorizationError as err:
            log.warning("rejecting length %.4g: %s", new, err)
            return False, -math.inf
        log_alpha = (log_density(s.g_bar, cov) - log_density(s.g_bar, self.cov)
                     - self.prior.l_rate * (new - s.l))
        ll = s.loglik
        projector = None
        if self._projected:
            projector = build_projector(self._pair_dist, self.d_bar, cov.params, cov)
            beta = self._beta_with(projector, s.g_bar)
            ll = self.full_loglik(beta=beta)
            log_alpha += ll - s.loglik
        ok = self._accept(log_alpha)
        if ok:
            s.l, s.loglik, self.cov = new, ll, cov
            if projector is not None:
                self.projector, self.beta = projector, beta
        return ok, log_alpha

    def _gamma_delta(self, new):
        # only the infectious-period terms depend on gamma
        if self.options.prior_only:
            return 0.0
        s = self.state
        return self.engine.removal_terms(s.inf, new) - self.engine.removal_terms(s.inf, s.gamma)

    def gamma_log_ratio(self, new):
        """Log acceptance ratio of a move from the current gamma rate to ``new``."""
        return self._gamma_delta(new) - self.prior.gamma_rate * (new - self.state.gamma)

    def update_gamma(self):
        s = self.state
        new = s.gamma + self.adaptive.value("sigma_gamma") * self.rng.standard_normal()
        if new <= 0:
            return False, -math.inf
        d = self._gamma_delta(new)
        log_alpha = d - self.prior.gamma_rate * (new - s.gamma)
        ok = self._accept(log_alpha)
        if ok:
            s.loglik += d
            s.gamma = new
        return ok, log_alpha

    def update_omega(self):
        """Swap the initial-case label (and times) with the second-earliest farm.

        Only naturally culled farms carry the label, so the swap is abandoned
        when the second-earliest infection belongs to a pre-emptively culled
        farm.  Returns ``(False, nan)`` when abandoned.
        """
        s = self.state
        infected = np.flatnonzero(np.isfinite(s.inf))
        if infected.size < 2:
            return False, math.nan
        others = infected[infected != s.omega]
        k = int(others[np.argmin(s.inf[others])])
        if not self.dataset.natural[k]:
            return False, math.nan
        inf = s.inf.copy()
        inf[k], inf[s.omega] = s.inf[s.omega], s.inf[k]
        if inf[s.omega] >= self.r[s.omega]:
            return False, -math.inf
        ll = self.full_loglik(inf=inf, omega=k)
        log_alpha = ll - s.loglik
        ok = self._accept(log_alpha)
        if ok:
            s.inf, s.omega, s.loglik = inf, k, ll
        return ok, log_alpha

    def update_i_omega(self):
        s = self.state
        j = s.omega
        new = s.i_omega + self.adaptive.value("sigma_i_omega") * self.rng.standard_normal()
        infected = np.flatnonzero(np.isfinite(s.inf))
        earliest_other = np.min(s.inf[infected[infected != j]], initial=np.inf)
        if new >= earliest_other or new >= self.r[j] or new > 0:
            return False, -math.inf
        d = self._delta(j, new)
        log_alpha = d + self.prior.i_omega_rate * (new - s.i_omega)
        ok = self._accept(log_alpha)
        if ok:
            s.inf[j] = new
            s.loglik += d
        return ok, log_alpha

    # -- infection-time moves ----------------------------------------------------------

    def move_infection_time(self):
        s = self.state
        cand = np.flatnonzero(np.isfinite(s.inf))
        cand = cand[cand != s.omega]
        if cand.size == 0:
            return False, math.nan
        j = int(cand[self.rng.integers(cand.size)])
        t = self._draw_period()
        new = self.r[j] - t
        if new <= s.i_omega:
            return False, -math.inf
        d = self._delta(j, new)
        log_alpha = self._period_logpdf(self.r[j] - s.inf[j]) - self._period_logpdf(t) + d
        return self._commit(j, new, d, log_alpha), log_alpha

    def add_infection_time(self):
        s = self.state
        if s.m_tilde == s.m:
            return False, math.nan
        cand = self.pre_pos[~np.isfinite(s.inf[self.pre_pos])]
        j = int(cand[self.rng.integers(cand.size)])
        t = self._draw_period()
        new = self.r[j] - t
        log_dim = math.log(s.m - s.m_tilde) - math.log(s.m_tilde + 1) - self._period_logpdf(t)
        if new <= s.i_omega:
            return False, -math.inf
        d = self._delta(j, new)
        log_alpha = log_dim + d
        ok = self._commit(j, new, d, log_alpha)
        if ok:
            s.m_tilde += 1
        return ok, log_alpha

    def delete_infection_time(self):
        s = self.state
        if s.m_tilde == 0:
            return False, math.nan
        cand = self.pre_pos[np.isfinite(s.inf[self.pre_pos])]
        j = int(cand[self.rng.integers(cand.size)])
        log_dim = (self._period_logpdf(self.r[j] - s.inf[j]) + math.log(s.m_tilde)
                   - math.log(s.m - s.m_tilde + 1))
        d = self._delta(j, math.inf)
        log_alpha = log_dim + d
        ok = self._commit(j, math.inf, d, log_alpha)
        if ok:
            s.m_tilde -= 1
        return ok, log_alpha

    def _commit(self, j, new, d, log_alpha):
        ok = self._accept(log_alpha)
        if ok:
            self.state.inf[j] = new
            self.state.loglik += d
        return ok

    def _accept(self, log_alpha):
        if math.isnan(log_alpha) or log_alpha == -math.inf:
            return False
        return log_alpha >= 0 or math.log(self.rng.random()) < log_alpha

    # -- sweeps -----------------------------------------------------------------------

    def sweep(self, t=None):
        """One pass of every update; ``t`` (burn-in sweep index) drives adaptation."""
        adapt = t is not None and self.tuning.adapt
        steps = (("g", self.update_g, "delta"), ("l", self.update_l, "sigma_l"),
                 ("gamma", self.update_gamma, "sigma_gamma"), ("omega", self.update_omega, None),
                 ("i_omega", self.update_i_omega, "sigma_i_omega"))
        for name, fn, scale in steps:
            if name in self.frozen:
                continue
            ok, log_alpha = fn()
            if not (isinstance(log_alpha, float) and math.isnan(log_alpha)):
                self.counts[name][0] += ok
                self.counts[name][1] += 1
                if adapt and scale is not None:
                    self.adaptive.step(scale, ok, t)
        kinds = self.options.move_kinds
        moves = {"move": self.move_infection_time, "add": self.add_infection_time,
                 "delete": self.delete_infection_time}
        for _ in range(self.tuning.moves_per_iteration if kinds else 0):
            kind = kinds[int(self.rng.integers(len(kinds)))]
            ok, log_alpha = moves[kind]()
            if not math.isnan(log_alpha):
                self.counts[kind][0] += ok
                self.counts[kind][1] += 1

    def audit(self, tol=1e-6):
        """Compare the cached log-likelihood with a fresh evaluation and resync."""
        s = self.state
        fresh = self.full_loglik()
        if abs(fresh - s.loglik) > tol * max(1.0, abs(fresh)):
            raise AuditError(f"cached log-likelihood {s.loglik!r} but fresh value {fresh!r}")
        flagged = int(np.sum(np.isfinite(s.inf[self.pre_pos])))
        if flagged != s.m_tilde:
            raise AuditError(f"infected pre-emptive count {s.m_tilde} but {flagged} flagged")
        s.loglik = fresh
        return fresh

    def acceptance_rates(self):
        return {k: (a / n if n else None) for k, (a, n) in self.counts.items()}

    def scales(self):
        return {k: self.adaptive.value(k) for k in self.adaptive.targets}


# -- running and persistence ---------------------------------------------------------------

def _state_record(sampler, it):
    s = sampler.state
    ids = sampler.dataset.ids
    finite = np.flatnonzero(np.isfinite(s.inf))
    return {
        "it": int(it),
        "g": [float(v) for v in s.g_bar],
        "l": float(s.l),
        "gamma": float(s.gamma),
        "omega": int(ids[s.omega]),
        "i_omega": s.i_omega,
        "inf": [[int(ids[k]), float(s.inf[k])] for k in finite],
        "ll": float(s.loglik),
    }


def _header(sampler):
    ds = sampler.dataset
    return {
        "schema": TRACE_SCHEMA,
        "version": TRACE_VERSION,
        "d_bar": [float(v) for v in sampler.d_bar],
        "alpha": sampler.prior.alpha,
        "shape": sampler.prior.shape,
        "active_ids": [int(i) for i in ds.ids[sampler.rows]],
        "preemptive_ids": [int(i) for i in ds.ids[sampler.pre_pos]],
    }


def _dump(obj):
    return json.dumps(obj, separators=(",", ":"))


def _atomic_write(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _state_from_record(rec, dataset, m):
    index = dataset.index_of
    inf = np.full(dataset.N, np.inf)
    for fid, t in rec["inf"]:
        inf[index[fid]] = t
    pre = dataset.preemptive
    m_tilde = int(np.sum(np.isfinite(inf) & pre))
    return ChainState(np.array(rec["g"], float), rec["l"], rec["gamma"], index[rec["omega"]],
                      inf, rec["ll"], m, m_tilde)


def _store(trace, n, rec, col_of):
    trace.iteration[n] = rec["it"]
    trace.g_bar[n] = rec["g"]
    trace.l[n] = rec["l"]
    trace.gamma[n] = rec["gamma"]
    trace.omega[n] = rec["omega"]
    trace.i_omega[n] = rec["i_omega"]
    row = trace.inf[n]
    for fid, t in rec["inf"]:
        row[col_of[fid]] = t
    trace.loglik[n] = rec["ll"]


def _store_state(trace, n, sampler, it, cols):
    s = sampler.state
    trace.iteration[n] = it
    trace.g_bar[n] = s.g_bar
    trace.l[n] = s.l
    trace.gamma[n] = s.gamma
    trace.omega[n] = sampler.dataset.ids[s.omega]
    trace.i_omega[n] = s.i_omega
    trace.inf[n] = s.inf[cols]
    trace.loglik[n] = s.loglik


def run_chain(dataset, d_bar, tuning: TuningConfig, prior: PriorConfig,
              options: FitOptions | None = None, rng=None, trace_path=None,
              checkpoint_path=None, resume=False) -> ChainTrace:
    """Run one chain and return its retained samples.

    With ``trace_path`` every retained sweep is appended to a JSON-lines file
    (a header line then one record per sweep, finite infection times only).
    With ``checkpoint_path`` the full chain state, adaptation and generator
    state are saved every ``options.checkpoint_interval`` sweeps, atomically;
    ``resume=True`` continues from that checkpoint and truncates the trace to
    the records it vouches for, so an interrupted run ends identical to an
    uninterrupted one.
    """
    options = options or FitOptions()
    if rng is None:
        rng = np.random.default_rng(tuning.seed)
    start = 0
    written = 0
    sampler = None
    if resume:
        if checkpoint_path is None or not Path(checkpoint_path).exists():
            raise FileNotFoundError(f"no checkpoint to resume from at {checkpoint_path}")
        ck = json.loads(Path(checkpoint_path).read_text())
        rng.bit_generator.state = ck["rng"]
        m = int(np.sum(dataset.preemptive))
        state = _state_from_record(ck["state"], dataset, m)
        sampler = Sampler(dataset, d_bar, tuning, prior, options, rng, state=state)
        sampler.adaptive.log = ck["adaptive"]
        sampler.counts = {k: list(v) for k, v in ck["counts"].items()}
        start = ck["next"]
        written = ck["written"]
    else:
        sampler = Sampler(dataset, d_bar, tuning, prior, options, rng)

    cols = sampler.rows
    header = _header(sampler)
    trace = ChainTrace.empty(sampler.d_bar, prior.alpha, prior.shape, header["active_ids"],
                             header["preemptive_ids"], tuning.retained)
    fh = None
    if trace_path is not None:
        trace_path = Path(trace_path)
        if resume:
            lines = trace_path.read_text().splitlines()[: written + 1]
            col_of = {fid: c for c, fid in enumerate(header["active_ids"])}
            for n, line in enumerate(lines[1:]):
                _store(trace, n, json.loads(line), col_of)
            _atomic_write(trace_path, "".join(x + "\n" for x in lines))
        else:
            _atomic_write(trace_path, _dump(header) + "\n")
        fh = open(trace_path, "a")
    elif resume and written:
        raise ValueError("resuming a chain with retained samples needs its trace file")

    n = written
    audit = options.audit_interval
    ck_every = options.checkpoint_interval
    try:
        for it in range(start, tuning.iterations):
            burning = it < tuning.burn_in
            sampler.sweep(it if burning else None)
            if audit and (it + 1) % audit == 0:
                sampler.audit()
            if not burning and (it - tuning.burn_in + 1) % tuning.thinning == 0:
                _store_state(trace, n, sampler, it, cols)
                if fh is not None:
                    fh.write(_dump(_state_record(sampler, it)) + "\n")
                n += 1
            if checkpoint_path is not None and ck_every and (it + 1) % ck_every == 0:
                if fh is not None:
                    fh.flush()
                _write_checkpoint(checkpoint_path, sampler, it + 1, n)
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path is not None:
        _write_checkpoint(checkpoint_path, sampler, tuning.iterations, n)
    trace.stats = {"acceptance": sampler.acceptance_rates(), "scales": sampler.scales()}
    return trace.truncated(n)


def _write_checkpoint(path, sampler, next_it, written):
    payload = {
        "next": next_it,
        "written": written,
        "state": _state_record(sampler, next_it - 1),
        "m_tilde": sampler.state.m_tilde,
        "adaptive": sampler.adaptive.log,
        "counts": sampler.counts,
        "rng": sampler.rng.bit_generator.state,
    }
    _atomic_write(path, _dump(payload) + "\n")


def read_trace(path) -> ChainTrace:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty trace file")
    header = json.loads(lines[0])
    if header.get("schema") != TRACE_SCHEMA:
        raise ValueError(f"{path}: not a trace file")
    if header.get("version") != TRACE_VERSION:
        raise ValueError(f"{path}: unsupported trace version {header.get('version')}")
    records = lines[1:]
    trace = ChainTrace.empty(header["d_bar"], header["alpha"], header["shape"],
                             header["active_ids"], header["preemptive_ids"], len(records))
    col_of = {fid: c for c, fid in enumerate(header["active_ids"])}
    for n, line in enumerate(records):
        _store(trace, n, json.loads(line), col_of)
    return trace


def concat_traces(traces):
    """Pool retained samples from chains fitted to the same dataset and grid."""
    traces = list(traces)
    if not traces:
        raise ValueError("no traces to combine")
    first = traces[0]
    for t in traces[1:]:
        if (not np.array_equal(t.d_bar, first.d_bar) or t.alpha != first.alpha
                or t.shape != first.shape or not np.array_equal(t.active_ids, first.active_ids)):
            raise ValueError("traces come from different datasets or model settings")
    names = ("iteration", "g_bar", "l", "gamma", "omega", "i_omega", "inf", "loglik")
    kw = {k: np.concatenate([getattr(t, k) for t in traces]) for k in names}
    return ChainTrace(first.d_bar, first.alpha, first.shape, first.active_ids,
                      first.preemptive_ids, **kw)
