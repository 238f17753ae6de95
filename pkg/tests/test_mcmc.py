import copy
import math

import numpy as np
import pytest
from scipy import stats

from farmgp import oracles
from farmgp.data import uniform_layout
from farmgp.gp import KernelParams, build_covariance, log_density, underrelaxed_propose
from farmgp.likelihood import GpRate, InfectiousPeriodParams, ParametricRate
from farmgp.mcmc import (AuditError, FitOptions, PriorConfig, Sampler, TuningConfig, concat_traces,
                         read_trace, run_chain)
from farmgp.simulate import CullingPolicy, export_observed, simulate_outbreak

D_BAR = np.linspace(0.0, 12.0, 9)
PRIOR = PriorConfig(alpha=3.0, shape=4.0)


@pytest.fixture(scope="module")
def observed():
    pop = uniform_layout(30, 8.0, np.random.default_rng(5))
    for seed in range(200):
        res = simulate_outbreak(pop, ParametricRate(2, 0.08), InfectiousPeriodParams(4, 0.8), 1,
                                CullingPolicy("simple_ring", 1.0), np.random.default_rng(seed))
        sets = res.sets
        if all(len(sets[k]) >= 2 for k in "ABCD"):
            return export_observed(res)
    raise AssertionError("no outbreak with every set present")


def tuning(**kw):
    base = dict(delta=0.3, sigma_l=0.5, sigma_gamma=0.1, sigma_i_omega=1.0, moves_per_iteration=5,
                iterations=40, burn_in=10, seed=7)
    base.update(kw)
    return TuningConfig(**base)


def make_sampler(observed, seed=1, **opts):
    opts.setdefault("initial_gamma", 0.8)
    opts.setdefault("length", 3.0)
    return Sampler(observed, D_BAR, tuning(), PRIOR, FitOptions(**opts), np.random.default_rng(seed))


def naive(sampler, inf=None, omega=None, g_bar=None, l=None, gamma=None):
    s = sampler.state
    g_bar = s.g_bar if g_bar is None else g_bar
    l = s.l if l is None else l
    beta = GpRate(g_bar, D_BAR, KernelParams(PRIOR.alpha, l))(sampler.dataset.distances.matrix())
    np.fill_diagonal(beta, 0.0)
    return oracles.naive_log_likelihood(s.inf if inf is None else inf, sampler.r_c, sampler.r_p,
                                        s.omega if omega is None else omega,
                                        lambda a, b: beta[a, b], PRIOR.shape,
                                        s.gamma if gamma is None else gamma)


def expected_ratio(sampler, kind, rng):
    """Replay the proposal of ``kind`` on a copy of the generator and score it
    with the brute-force likelihood."""
    s = sampler.state
    old = naive(sampler)
    logp = lambda x, g=s.gamma: stats.gamma(PRIOR.shape, scale=1 / g).logpdf(x)
    r = sampler.r
    if kind == "g":
        new_g = underrelaxed_propose(s.g_bar, sampler.adaptive.value("delta"), sampler.cov, rng)
        return naive(sampler, g_bar=new_g) - old
    if kind == "l":
        new = s.l + sampler.adaptive.value("sigma_l") * rng.standard_normal()
        if new <= 0:
            return -math.inf
        ratio = (log_density(s.g_bar, build_covariance(D_BAR, KernelParams(PRIOR.alpha, new)))
                 - log_density(s.g_bar, sampler.cov) - PRIOR.l_rate * (new - s.l))
        return ratio + naive(sampler, l=new) - old
    if kind == "gamma":
        new = s.gamma + sampler.adaptive.value("sigma_gamma") * rng.standard_normal()
        if new <= 0:
            return -math.inf
        return naive(sampler, gamma=new) - old - PRIOR.gamma_rate * (new - s.gamma)
    if kind == "i_omega":
        new = s.i_omega + sampler.adaptive.value("sigma_i_omega") * rng.standard_normal()
        others = [t for k, t in enumerate(s.inf) if k != s.omega and math.isfinite(t)]
        if new >= min(others, default=math.inf) or new >= r[s.omega] or new > 0:
            return -math.inf
        inf = s.inf.copy()
        inf[s.omega] = new
        return naive(sampler, inf=inf) - old + PRIOR.i_omega_rate * (new - s.i_omega)
    if kind == "omega":
        infected = [k for k in range(len(s.inf)) if math.isfinite(s.inf[k]) and k != s.omega]
        k = min(infected, key=lambda q: s.inf[q])
        if not sampler.dataset.natural[k]:
            return math.nan
        inf = s.inf.copy()
        inf[k], inf[s.omega] = s.inf[s.omega], s.inf[k]
        if inf[s.omega] >= r[s.omega]:
            return -math.inf
        return naive(sampler, inf=inf, omega=k) - old
    pre = sampler.pre_pos
    m = len(pre)
    m_tilde = sum(math.isfinite(s.inf[k]) for k in pre)
    if kind == "move":
        cand = [k for k in range(len(s.inf)) if math.isfinite(s.inf[k]) and k != s.omega]
        j = cand[rng.integers(len(cand))]
        t = rng.gamma(PRIOR.shape, 1 / s.gamma)
        if r[j] - t <= s.i_omega:
            return -math.inf
        inf = s.inf.copy()
        inf[j] = r[j] - t
        return naive(sampler, inf=inf) - old + logp(r[j] - s.inf[j]) - logp(t)
    if kind == "add":
        if m_tilde == m:
            return math.nan
        cand = [k for k in pre if not math.isfinite(s.inf[k])]
        j = cand[rng.integers(len(cand))]
        t = rng.gamma(PRIOR.shape, 1 / s.gamma)
        if r[j] - t <= s.i_omega:
            return -math.inf
        inf = s.inf.copy()
        inf[j] = r[j] - t
        return naive(sampler, inf=inf) - old + math.log((m - m_tilde) / (m_tilde + 1)) - logp(t)
    if kind == "delete":
        if m_tilde == 0:
            return math.nan
        cand = [k for k in pre if math.isfinite(s.inf[k])]
        j = cand[rng.integers(len(cand))]
        inf = s.inf.copy()
        inf[j] = math.inf
        return (naive(sampler, inf=inf) - old + logp(r[j] - s.inf[j])
                + math.log(m_tilde / (m - m_tilde + 1)))
    raise ValueError(kind)


UPDATE_FN = {"g": "update_g", "l": "update_l", "gamma": "update_gamma", "omega": "update_omega",
             "i_omega": "update_i_omega", "move": "move_infection_time",
             "add": "add_infection_time", "delete": "delete_infection_time"}


@pytest.mark.parametrize("kind", list(UPDATE_FN))
def test_logged_ratio_matches_brute_force(observed, kind):
    sampler = make_sampler(observed, seed=3)
    checked = 0
    for step in range(40):
        replay = copy.deepcopy(sampler.rng)
        want = expected_ratio(sampler, kind, replay)
        ok, got = getattr(sampler, UPDATE_FN[kind])()
        if math.isnan(want):
            assert math.isnan(got)
        elif want == -math.inf:
            assert got == -math.inf and not ok
        else:
            assert got == pytest.approx(want, abs=1e-8 * max(1.0, abs(want)))
            checked += 1
        # the cached value follows the accepted state
        assert sampler.state.loglik == pytest.approx(naive(sampler), abs=1e-8)
        sampler.sweep()
    assert checked > 0


def test_gamma_ratio_closed_form(observed):
    sampler = make_sampler(observed)
    s = sampler.state
    inf, r = s.inf, sampler.r
    B = [k for k in np.flatnonzero(np.isfinite(inf)) if math.isfinite(sampler.r_c[k])]
    C = [k for k in np.flatnonzero(np.isfinite(inf)) if math.isfinite(sampler.r_p[k])]
    for new in (0.3, 0.8, 1.7):
        a = stats.gamma(PRIOR.shape, scale=1 / new)
        b = stats.gamma(PRIOR.shape, scale=1 / s.gamma)
        want = (sum(a.logpdf(r[k] - inf[k]) - b.logpdf(r[k] - inf[k]) for k in B)
                + sum(a.logsf(r[k] - inf[k]) - b.logsf(r[k] - inf[k]) for k in C)
                - PRIOR.gamma_rate * (new - s.gamma))
        assert sampler.gamma_log_ratio(new) == pytest.approx(want, abs=1e-9)


def test_add_delete_reversibility(observed):
    # adding then deleting the same time: the two log ratios cancel exactly
    sampler = make_sampler(observed, seed=4)
    s = sampler.state
    d_farms = [k for k in sampler.pre_pos if not math.isfinite(s.inf[k])]
    j = d_farms[0]
    t = s.i_omega
    new = sampler.r[j] - 0.5 * (sampler.r[j] - max(t, sampler.r[j] - 8))
    m, mt = s.m, s.m_tilde
    logp = lambda x: stats.gamma(PRIOR.shape, scale=1 / s.gamma).logpdf(x)
    d_add = sampler._delta(j, new)
    fwd = math.log((m - mt) / (mt + 1)) - logp(sampler.r[j] - new) + d_add
    s.inf[j] = new
    s.m_tilde += 1
    s.loglik += d_add
    d_del = sampler._delta(j, math.inf)
    back = logp(sampler.r[j] - new) + math.log((mt + 1) / (m - mt)) + d_del
    assert fwd + back == pytest.approx(0.0, abs=1e-9)


def test_bookkeeping_and_audit(observed):
    sampler = make_sampler(observed, seed=5)
    for _ in range(30):
        sampler.sweep()
        s = sampler.state
        assert s.m_tilde == int(np.sum(np.isfinite(s.inf[sampler.pre_pos])))
        assert s.m == len(sampler.pre_pos)
        sampler.audit()
    sampler.state.loglik += 1.0
    with pytest.raises(AuditError):
        sampler.audit()


def test_no_op_moves(observed):
    sampler = make_sampler(observed, seed=6)
    s = sampler.state
    for k in sampler.pre_pos:
        s.inf[k] = math.inf
    s.m_tilde = 0
    s.loglik = sampler.full_loglik()
    assert math.isnan(sampler.delete_infection_time()[1])
    s.m_tilde = s.m
    assert math.isnan(sampler.add_infection_time()[1])
    assert not sampler._accept(-math.inf)
    assert not sampler._accept(math.nan)


def test_initial_state_is_valid_and_reproducible(observed):
    a = make_sampler(observed, seed=9).state
    b = make_sampler(observed, seed=9).state
    assert math.isfinite(a.loglik)
    assert np.array_equal(a.inf, b.inf) and np.array_equal(a.g_bar, b.g_bar)
    assert a.omega == observed.first_culled()
    assert a.i_omega < 0
    assert a.m_tilde == 0


def test_init_draws_unset_parameters_from_prior(observed):
    s = Sampler(observed, D_BAR, tuning(), PriorConfig(alpha=3.0, gamma_rate=2.0),
                FitOptions(), np.random.default_rng(0)).state
    assert s.l > 0 and s.gamma > 0


def test_zero_iterations_gives_empty_trace(observed, tmp_path):
    trace = run_chain(observed, D_BAR, tuning(iterations=0, burn_in=0), PRIOR,
                      FitOptions(length=3.0, initial_gamma=0.8), np.random.default_rng(0),
                      trace_path=tmp_path / "t.jsonl")
    assert len(trace) == 0
    assert len(read_trace(tmp_path / "t.jsonl")) == 0


def test_tuning_validation():
    with pytest.raises(ValueError):
        TuningConfig(delta=0.0)
    with pytest.raises(ValueError):
        TuningConfig(iterations=10, burn_in=10)
    with pytest.raises(ValueError):
        FitOptions(fix_l=True)
    with pytest.raises(ValueError):
        FitOptions(fixed=("beta",))
    assert TuningConfig(iterations=100, burn_in=10, thinning=3).retained == 30


def test_tiny_block_step_is_almost_always_accepted(observed):
    sampler = Sampler(observed, D_BAR, tuning(delta=1e-6, adapt=False), PRIOR,
                      FitOptions(length=3.0, initial_gamma=0.8, fixed=("l", "gamma", "omega", "i_omega"),
                                 move_kinds=()), np.random.default_rng(2))
    for _ in range(200):
        sampler.sweep()
    assert sampler.acceptance_rates()["g"] > 0.97


def test_fixed_blocks_stay_put(observed):
    opts = FitOptions(length=3.0, fix_l=True, initial_gamma=0.8, fixed=("gamma",))
    trace = run_chain(observed, D_BAR, tuning(), PRIOR, opts, np.random.default_rng(1))
    assert np.all(trace.l == 3.0)
    assert np.all(trace.gamma == 0.8)


def test_trace_file_matches_returned_trace(observed, tmp_path):
    opts = FitOptions(length=3.0, initial_gamma=0.8)
    trace = run_chain(observed, D_BAR, tuning(thinning=3), PRIOR, opts, np.random.default_rng(1),
                      trace_path=tmp_path / "t.jsonl")
    back = read_trace(tmp_path / "t.jsonl")
    assert len(trace) == 10
    for name in ("iteration", "g_bar", "l", "gamma", "omega", "i_omega", "inf", "loglik"):
        assert np.array_equal(getattr(trace, name), getattr(back, name)), name
    both = concat_traces([trace, back])
    assert len(both) == 20
    assert both.c_membership.shape == (20, len(trace.preemptive_ids))


def test_resume_reproduces_uninterrupted_run(observed, tmp_path, monkeypatch):
    opts = FitOptions(length=3.0, initial_gamma=0.8, checkpoint_interval=10)
    full = run_chain(observed, D_BAR, tuning(), PRIOR, opts, np.random.default_rng(1),
                     trace_path=tmp_path / "full.jsonl", checkpoint_path=tmp_path / "full.json")

    real_sweep = Sampler.sweep
    calls = {"n": 0}

    def crashing(self, t=None):
        calls["n"] += 1
        if calls["n"] == 26:
            raise KeyboardInterrupt
        return real_sweep(self, t)

    monkeypatch.setattr(Sampler, "sweep", crashing)
    with pytest.raises(KeyboardInterrupt):
        run_chain(observed, D_BAR, tuning(), PRIOR, opts, np.random.default_rng(1),
                  trace_path=tmp_path / "cut.jsonl", checkpoint_path=tmp_path / "cut.json")
    monkeypatch.setattr(Sampler, "sweep", real_sweep)
    resumed = run_chain(observed, D_BAR, tuning(), PRIOR, opts, np.random.default_rng(999),
                        trace_path=tmp_path / "cut.jsonl", checkpoint_path=tmp_path / "cut.json",
                        resume=True)
    assert (tmp_path / "cut.jsonl").read_bytes() == (tmp_path / "full.jsonl").read_bytes()
    assert np.array_equal(resumed.inf, full.inf)
    assert np.array_equal(resumed.g_bar, full.g_bar)


def test_resume_without_checkpoint(observed, tmp_path):
    with pytest.raises(FileNotFoundError):
        run_chain(observed, D_BAR, tuning(), PRIOR, FitOptions(length=3.0), np.random.default_rng(0),
                  checkpoint_path=tmp_path / "missing.json", resume=True)


def test_fixed_rate_chain_skips_the_field(observed):
    opts = FitOptions(initial_gamma=0.8, length=1.0, fixed_rate=ParametricRate(2, 0.08))
    trace = run_chain(observed, D_BAR, tuning(), PRIOR, opts, np.random.default_rng(3))
    assert np.all(trace.g_bar == trace.g_bar[0])
    assert np.all(np.isfinite(trace.loglik))
