import math

import numpy as np
import pytest

from farmgp.data import Dataset, FarmRecord, classify, uniform_layout
from farmgp.likelihood import AugmentedState, ConstantRate, InfectiousPeriodParams, ParametricRate, log_likelihood
from farmgp.simulate import (REMOVED, SUSCEPTIBLE, TABLE4_THRESHOLDS, CompensationTable, CullingPolicy,
                             apply_ring_cull, compensation, export_observed, read_events, read_truth,
                             simulate_outbreak, simulate_study, table4_policy, truth_infection_sum,
                             write_events, write_truth)

PARAMS = InfectiousPeriodParams(4.0, 0.8)


@pytest.fixture
def population():
    return uniform_layout(80, 8.0, np.random.default_rng(3), flocks=True)


def test_zero_rate_infects_only_the_start(population, rng):
    res = simulate_outbreak(population, ConstantRate(0.0), PARAMS, 5, table4_policy(3.0), rng)
    assert res.n_infected == 1
    assert res.n_culled == 1
    assert res.sets["B"] == {5}


def test_no_policy_means_no_preemptive_culls(population, rng):
    res = simulate_outbreak(population, ParametricRate(2, 0.1), PARAMS, 1, CullingPolicy(), rng)
    assert res.n_infected > 1
    assert not res.sets["C"] and not res.sets["D"]
    assert np.array_equal(res.infected, res.culled)


def test_two_farm_transmission_probability():
    # farm 2 is infected iff an Exp(b) clock rings within farm 1's gamma period
    ds = Dataset([FarmRecord(1, 0, 0), FarmRecord(2, 1, 0)])
    b = 0.3
    n = 20000
    hits = 0
    for rep in range(n):
        rng = np.random.default_rng([11, rep])
        hits += simulate_outbreak(ds, ConstantRate(b), PARAMS, 1, CullingPolicy(), rng).n_infected == 2
    p = 1 - (PARAMS.rate / (PARAMS.rate + b)) ** PARAMS.shape
    se = math.sqrt(p * (1 - p) / n)
    assert abs(hits / n - p) < 4 * se


def test_policy_limits():
    pol = table4_policy(2.0)
    assert pol.limits(10) == (0, 0.0)
    assert pol.limits(33) == (0, 0.0)
    assert pol.limits(34) == (3, 1.0)
    assert pol.limits(54) == (3, 1.0)
    assert pol.limits(55) == (6, 2.0)
    assert CullingPolicy("simple_ring", 1.5).limits(0) == (math.inf, 1.5)
    assert CullingPolicy("capped_ring", 0.0).limits(100) == (0, 0.0)
    with pytest.raises(ValueError):
        CullingPolicy("ring", 1.0)
    with pytest.raises(ValueError):
        CullingPolicy("simple_ring", -1.0)


def _ring(n_near=6):
    d = np.array([0.0] + [0.2 * (k + 1) for k in range(n_near)] + [5.0])
    status = np.full(d.size, SUSCEPTIBLE)
    return d, status


def test_capped_ring_takes_nearest_up_to_the_cap():
    d, status = _ring()
    pol = table4_policy(3.0)
    assert apply_ring_cull(d, status, 0, pol, 33, 0).size == 0
    # 40 cumulative infections: cap 3 within half the radius (1.5 km)
    assert apply_ring_cull(d, status, 0, pol, 40, 0).tolist() == [1, 2, 3]
    assert apply_ring_cull(d, status, 0, pol, 40, 2).tolist() == [1]
    assert apply_ring_cull(d, status, 0, pol, 40, 3).size == 0
    # beyond 54: cap 6, full radius, the far farm stays
    assert apply_ring_cull(d, status, 0, pol, 60, 0).tolist() == [1, 2, 3, 4, 5, 6]


def test_half_radius_excludes_farms_between():
    d = np.array([0.0, 0.5, 1.4, 1.6, 2.9])
    status = np.full(5, SUSCEPTIBLE)
    pol = CullingPolicy("capped_ring", 3.0, ((54, 10, 0.5), (math.inf, 10, 1.0)))
    assert apply_ring_cull(d, status, 0, pol, 40, 0).tolist() == [1, 2]
    assert apply_ring_cull(d, status, 0, pol, 60, 0).tolist() == [1, 2, 3, 4]


def test_ring_skips_removed_and_breaks_ties_by_id():
    d = np.array([0.0, 1.0, 1.0, 1.0])
    status = np.array([REMOVED, SUSCEPTIBLE, REMOVED, SUSCEPTIBLE])
    ids = np.array([10, 30, 20, 5])
    got = apply_ring_cull(d, status, 0, CullingPolicy("simple_ring", 2.0), 0, 0, ids)
    assert got.tolist() == [3, 1]


def test_daily_cap_counts_within_a_day(population):
    pol = CullingPolicy("capped_ring", 4.0, ((math.inf, 2, 1.0),))
    for seed in range(10):
        res = simulate_outbreak(population, ParametricRate(2, 0.3), PARAMS, 1, pol,
                                np.random.default_rng(seed))
        days = {}
        for e in res.events:
            if e.kind == "preemptive_cull":
                days[math.floor(e.time)] = days.get(math.floor(e.time), 0) + 1
        assert all(v <= 2 for v in days.values())


def test_compensation_spot_check():
    ds = Dataset([FarmRecord(1, 0, 0, flock_type="broiler", flock_size=1000),
                  FarmRecord(2, 50, 0, flock_type="turkey", flock_size=10)])
    res = simulate_outbreak(ds, ConstantRate(0.0), PARAMS, 1, CullingPolicy(), np.random.default_rng(0),
                            compensation_table=CompensationTable())
    assert res.compensation == pytest.approx(980.0)
    table = CompensationTable({"broiler": 2.0, "turkey": 1.0})
    assert compensation(res, ds, table) == pytest.approx(2000.0)
    with pytest.raises(ValueError):
        CompensationTable({"broiler": -1.0})


def test_compensation_lists_missing_flocks():
    ds = Dataset([FarmRecord(7, 0, 0), FarmRecord(8, 50, 0)])
    res = simulate_outbreak(ds, ConstantRate(0.0), PARAMS, 7, CullingPolicy(), np.random.default_rng(0))
    with pytest.raises(ValueError, match=r"\[7\]"):
        compensation(res, ds, CompensationTable())


def test_export_round_trip(population, rng):
    res = simulate_outbreak(population, ParametricRate(2, 0.2), PARAMS, 1, table4_policy(1.0), rng)
    obs = export_observed(res)
    sets = res.sets
    cls = classify(obs)
    assert cls.A == sets["A"]
    assert cls.B == sets["B"]
    assert cls.P == sets["C"] | sets["D"]
    assert min(f.cull_time for f in obs.farms if f.culled and not f.preemptive) == 0.0


def test_truth_and_events_files(population, rng, tmp_path):
    res = simulate_outbreak(population, ParametricRate(2, 0.2), PARAMS, 1, table4_policy(1.0), rng)
    write_truth(res, tmp_path / "truth.csv")
    write_events(res, tmp_path / "events.csv")
    truth = read_truth(tmp_path / "truth.csv")
    origin = res.first_natural_cull()
    for k, fid in enumerate(population.ids.tolist()):
        status, i, r = truth[fid]
        assert (fid in res.sets[status])
        assert i == res.infection_times[k] - origin or (math.isinf(i) and not res.infected[k])
        assert r == res.removal_times[k] - origin or (math.isinf(r) and not res.culled[k])
    expected = float(np.sum(res.infection_times[res.infected] - origin))
    assert truth_infection_sum(truth) == pytest.approx(expected, abs=1e-9)
    assert read_events(tmp_path / "events.csv") == res.events


def test_study_is_reproducible(population):
    a = simulate_study(population, ParametricRate(2, 0.2), PARAMS, table4_policy(1.0), 42, 3, min_infected=3)
    b = simulate_study(population, ParametricRate(2, 0.2), PARAMS, table4_policy(1.0), 42, 3, min_infected=3)
    for x, y in zip(a, b):
        assert x.events == y.events
        assert x.n_infected >= 3


def test_study_gives_up_when_unreachable(population):
    with pytest.raises(RuntimeError):
        simulate_study(population, ConstantRate(0.0), PARAMS, CullingPolicy(), 1, 1,
                       min_infected=2, max_attempts=5)


def test_rate_matrix_shape_checked(population, rng):
    with pytest.raises(ValueError):
        simulate_outbreak(population, np.zeros((3, 3)), PARAMS, 1, CullingPolicy(), rng)


def test_true_state_has_positive_likelihood(population):
    rate = ParametricRate(2, 0.25)
    for seed in range(15):
        res = simulate_outbreak(population, rate, PARAMS, 1, table4_policy(1.5), np.random.default_rng(seed))
        obs = export_observed(res)
        shifted = res.infection_times - res.first_natural_cull()
        state = AugmentedState.from_dataset(obs, shifted, res.omega)
        assert math.isfinite(log_likelihood(state, rate, PARAMS, obs.distances))


def test_sets_partition_population(population):
    for seed in range(10):
        res = simulate_outbreak(population, ParametricRate(2, 0.25), PARAMS, 2, table4_policy(2.0),
                                np.random.default_rng(seed))
        sets = res.sets
        union = set().union(*sets.values())
        assert union == set(population.ids.tolist())
        assert sum(len(s) for s in sets.values()) == population.N
        assert 2 in sets["B"] or 2 in sets["C"]
    assert TABLE4_THRESHOLDS[0] == (33, 0, 0.0)
