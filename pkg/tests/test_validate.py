import math

import numpy as np
import pytest

from farmgp import validate


def ar1(rng, n, phi):
    x = np.empty(n)
    x[0] = rng.normal()
    e = rng.normal(size=n) * math.sqrt(1 - phi ** 2)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    return x


@pytest.mark.parametrize("phi", [0.0, 0.5, 0.9])
def test_ess_matches_ar1_autocorrelation_time(rng, phi):
    n = 200_000
    tau = (1 + phi) / (1 - phi)
    ess = validate.effective_sample_size(ar1(rng, n, phi))
    assert ess == pytest.approx(n / tau, rel=0.1)


def test_ess_small_and_constant_inputs():
    assert validate.effective_sample_size([1.0, 2.0]) == 2.0
    assert validate.effective_sample_size(np.ones(50)) == 50.0


def test_marginal_check_on_exact_draws(rng):
    x = rng.exponential(100.0, 50_000)
    mean_err, ks, crit, ess = validate.prior_marginal_check(x, 0.01)
    assert mean_err < 0.02 and ks < crit
    # a wrong rate is caught
    _, ks_bad, crit_bad, _ = validate.prior_marginal_check(x, 0.012)
    assert ks_bad > crit_bad


def test_suites_pass_on_the_real_code(rng):
    assert validate.likelihood_oracle(rng, 100).passed
    assert validate.delta_contract(rng, 100).passed
    assert validate.proposal_identity(rng, 5).passed


def test_oracle_suite_catches_a_perturbed_evaluator(rng):
    def off(*args):
        return validate.engine_log_likelihood(*args) + 1e-7
    res = validate.likelihood_oracle(rng, 50, likelihood_fn=off)
    assert not res.passed
    assert res.line().startswith("FAIL likelihood oracle")


def test_short_prior_run_reports_the_applied_tolerance():
    res = validate.prior_reproduction(5, sweeps=3000)
    assert res.passed
    assert res.tolerance >= 0.05
    assert set(res.details) == {"gamma", "length", "neg_i_omega"}
