"""Outbreak simulation with ring-culling policies and compensation costs.

The epidemic is simulated exactly in continuous time.  Every infectious farm
infects each susceptible farm at rate ``beta(d)``; the time to the next
infection is drawn from the total hazard, and the infected farm is picked in
proportion to its hazard.  Infectious periods are gamma distributed and end
in a natural cull, which can trigger pre-emptive culls around the culled farm.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import Dataset, FarmRecord
from .likelihood import InfectiousPeriodParams

SUSCEPTIBLE, INFECTIOUS, REMOVED = 0, 1, 2

#: (cumulative infections bound, max culls per day, fraction of the radius);
#: a row applies while the cumulative count is at most its bound.
TABLE4_THRESHOLDS = ((33, 0, 0.0), (54, 3, 0.5), (math.inf, 6, 1.0))

#: Euros per bird by flock type.
COMPENSATION_EUR_PER_BIRD = {"broiler": 0.98, "duck": 2.09, "turkey": 10.63, "layer": 2.05}


@dataclass(frozen=True)
class CullingPolicy:
    """When and where farms are culled pre-emptively.

    ``simple_ring`` culls every farm within ``radius`` of each naturally
    culled farm, at that moment and without limits.  ``capped_ring`` looks up
    the row of ``thresholds`` for the cumulative number of infections so far
    and culls, nearest first, up to that row's daily cap within that row's
    fraction of ``radius``.
    """

    mode: str = "none"
    radius: float = 0.0
    thresholds: tuple = TABLE4_THRESHOLDS

    def __post_init__(self):
        if self.mode not in ("none", "simple_ring", "capped_ring"):
            raise ValueError(f"unknown culling mode {self.mode!r}")
        if self.radius < 0:
            raise ValueError("culling radius must be non-negative")
        bounds = [row[0] for row in self.thresholds]
        if bounds != sorted(bounds):
            raise ValueError("threshold rows must be ordered by bound")
        for bound, cap, frac in self.thresholds:
            if cap < 0 or not 0.0 <= frac <= 1.0:
                raise ValueError(f"bad threshold row {(bound, cap, frac)}")

    def limits(self, cumulative_infections):
        """``(daily cap, effective radius)`` in force at this outbreak size."""
        if self.mode == "none" or self.radius == 0:
            return 0, 0.0
        if self.mode == "simple_ring":
            return math.inf, self.radius
        for bound, cap, frac in self.thresholds:
            if cumulative_infections <= bound:
                return cap, frac * self.radius
        return 0, 0.0


def table4_policy(radius):
    return CullingPolicy("capped_ring", radius, TABLE4_THRESHOLDS)


@dataclass(frozen=True)
class CompensationTable:
    rates: dict = field(default_factory=lambda: dict(COMPENSATION_EUR_PER_BIRD))

    def __post_init__(self):
        if any(v < 0 for v in self.rates.values()):
            raise ValueError("compensation rates must be non-negative")


class Event(NamedTuple):
    time: float
    kind: str  # infection | natural_cull | preemptive_cull
    farm: int  # farm id


@dataclass
class OutbreakResult:
    """Simulated epidemic with ground truth.

    Times are on the simulation clock (initial infection at 0).  Arrays are in
    dataset order; ``sets`` holds farm ids for A, B, C and D.
    """

    dataset: Dataset
    events: list
    infection_times: np.ndarray
    removal_times: np.ndarray
    preemptive: np.ndarray
    omega: int
    compensation: float | None = None

    @property
    def infected(self):
        return np.isfinite(self.infection_times)

    @property
    def culled(self):
        return np.isfinite(self.removal_times)

    @property
    def n_infected(self):
        return int(np.sum(self.infected))

    @property
    def n_culled(self):
        return int(np.sum(self.culled))

    @property
    def sets(self):
        ids = self.dataset.ids
        inf, pre, culled = self.infected, self.preemptive, self.culled
        return {
            "A": frozenset(ids[~culled].tolist()),
            "B": frozenset(ids[inf & culled & ~pre].tolist()),
            "C": frozenset(ids[inf & pre].tolist()),
            "D": frozenset(ids[~inf & pre].tolist()),
        }

    def first_natural_cull(self):
        natural = self.culled & ~self.preemptive
        return float(np.min(self.removal_times[natural]))


def apply_ring_cull(distances, status, center, policy: CullingPolicy,
                    cumulative_infections, culled_today, ids=None):
    """Farms culled around ``center`` when it is naturally culled.

    Parameters
    ----------
    distances : ndarray
        Distance from ``center`` to every farm (km).
    status : ndarray
        Per-farm SUSCEPTIBLE / INFECTIOUS / REMOVED codes.
    culled_today : int
        Pre-emptive culls already made in the current day.

    Returns
    -------
    ndarray of farm positions, nearest first (ties by id), never more than
    the remaining daily allowance.  Farms over the cap are not queued.
    """
    cap, radius = policy.limits(cumulative_infections)
    allowance = cap - culled_today
    if allowance <= 0 or radius <= 0:
        return np.empty(0, dtype=np.int64)
    inside = np.flatnonzero((distances <= radius) & (status != REMOVED))
    inside = inside[inside != center]
    if inside.size == 0:
        return inside
    tie = inside if ids is None else ids[inside]
    order = np.lexsort((tie, distances[inside]))
    chosen = inside[order]
    if math.isfinite(allowance):
        chosen = chosen[: int(allowance)]
    return chosen


def pair_rates(dataset: Dataset, rates):
    """Dense ``beta`` matrix for the whole population (zero diagonal)."""
    beta = np.array(rates(dataset.distances.matrix()), dtype=float)
    np.fill_diagonal(beta, 0.0)
    return beta


def simulate_outbreak(dataset: Dataset, rates, params: InfectiousPeriodParams, omega,
                      policy: CullingPolicy, rng, compensation_table=None) -> OutbreakResult:
    """Simulate one outbreak started by farm id ``omega`` at time 0.

    ``rates`` is either a callable on distances or a precomputed ``N x N``
    rate matrix.  The run ends when no farm is infectious.
    """
    N = dataset.N
    if callable(rates):
        beta = pair_rates(dataset, rates)
    else:
        beta = np.asarray(rates, dtype=float)
        if beta.shape != (N, N):
            raise ValueError(f"rate matrix must be {N}x{N}")
    if np.any(beta < 0):
        raise ValueError("infection rates must be non-negative")
    ids = dataset.ids
    start = dataset.index_of[int(omega)]
    dist = dataset.distances if policy.mode != "none" and policy.radius > 0 else None
    scale = 1.0 / params.rate

    status = np.zeros(N, dtype=np.int8)
    inf_time = np.full(N, np.inf)
    rem_time = np.full(N, np.inf)
    due = np.full(N, np.inf)  # scheduled natural cull
    pre = np.zeros(N, dtype=bool)
    events = []
    per_day = {}

    def infect(k, t):
        status[k] = INFECTIOUS
        inf_time[k] = t
        due[k] = t + float(rng.gamma(params.shape, scale))
        events.append(Event(t, "infection", int(ids[k])))

    infect(start, 0.0)
    n_infected = 1
    t = 0.0
    while True:
        infectious = np.flatnonzero(status == INFECTIOUS)
        if infectious.size == 0:
            break
        j = infectious[np.argmin(due[infectious])]
        t_removal = due[j]
        hazard = beta[infectious].sum(axis=0)
        hazard[status != SUSCEPTIBLE] = 0.0
        total = float(hazard.sum())
        t_next = t + rng.exponential(1.0 / total) if total > 0 else math.inf
        if t_next < t_removal:
            cum = np.cumsum(hazard)
            k = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            k = min(k, N - 1)
            while hazard[k] == 0:  # guard against landing on a zero-width bin
                k -= 1
            t = t_next
            infect(k, t)
            n_infected += 1
            continue
        t = float(t_removal)
        status[j] = REMOVED
        rem_time[j] = t
        due[j] = math.inf
        events.append(Event(t, "natural_cull", int(ids[j])))
        if dist is None:
            continue
        day = math.floor(t)
        done = per_day.get(day, 0)
        row = dist.rows([j])[0]
        for k in apply_ring_cull(row, status, j, policy, n_infected, done, ids):
            status[k] = REMOVED
            rem_time[k] = t
            due[k] = math.inf
            pre[k] = True
            events.append(Event(t, "preemptive_cull", int(ids[k])))
            done += 1
        per_day[day] = done

    result = OutbreakResult(dataset, events, inf_time, rem_time, pre, start)
    if compensation_table is not None:
        result.compensation = compensation(result, dataset, compensation_table)
    return result


def compensation(result: OutbreakResult, dataset: Dataset, table: CompensationTable) -> float:
    """Euros paid for every culled farm: rate for its flock type times flock size."""
    culled = np.flatnonzero(result.culled)
    missing = [int(dataset.ids[k]) for k in culled
               if dataset.farms[k].flock_type is None or dataset.farms[k].flock_size is None]
    if missing:
        raise ValueError(f"no flock data for culled farms {missing}")
    total = 0.0
    for k in culled:
        farm = dataset.farms[k]
        total += table.rates[farm.flock_type] * farm.flock_size
    return total


def export_observed(result: OutbreakResult) -> Dataset:
    """What an analyst would see: locations, culling times shifted so the
    first natural cull is day 0, and pre-emptive flags.  Infection times and
    C/D membership are dropped."""
    origin = result.first_natural_cull()
    farms = []
    for k, farm in enumerate(result.dataset.farms):
        cull = result.removal_times[k] - origin if result.culled[k] else math.inf
        farms.append(FarmRecord(farm.id, farm.x, farm.y, float(cull), bool(result.preemptive[k]),
                                farm.flock_type, farm.flock_size))
    return Dataset(farms, time_origin=origin)


# -- files -------------------------------------------------------------------------

def _atomic_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_events(result: OutbreakResult, path):
    lines = ["time,event,farm_id"]
    lines += [f"{float(e.time)!r},{e.kind},{e.farm}" for e in result.events]
    _atomic_text(path, "\n".join(lines) + "\n")


def read_events(path):
    with open(path, newline="") as fh:
        return [Event(float(r["time"]), r["event"], int(r["farm_id"])) for r in csv.DictReader(fh)]


def summary_record(result: OutbreakResult):
    sets = result.sets
    return {
        "n_farms": result.dataset.N,
        "n_infected": result.n_infected,
        "n_culled": result.n_culled,
        "A": len(sets["A"]), "B": len(sets["B"]), "C": len(sets["C"]), "D": len(sets["D"]),
        "omega": int(result.dataset.ids[result.omega]),
        "duration": max(e.time for e in result.events),
        "compensation": result.compensation,
    }


def write_summary(result: OutbreakResult, path):
    _atomic_text(path, json.dumps(summary_record(result), indent=2, sort_keys=True) + "\n")


def write_truth(result: OutbreakResult, path):
    """Ground-truth sidecar on the exported dataset's time axis."""
    origin = result.first_natural_cull()
    status = {}
    for name, members in result.sets.items():
        for fid in members:
            status[fid] = name
    lines = ["id,status,infection_time,removal_time"]
    for k, fid in enumerate(result.dataset.ids.tolist()):
        i = result.infection_times[k] - origin if result.infected[k] else math.inf
        r = result.removal_times[k] - origin if result.culled[k] else math.inf
        lines.append(f"{fid},{status[fid]},{_fmt(i)},{_fmt(r)}")
    _atomic_text(path, "\n".join(lines) + "\n")


def _fmt(x):
    return repr(float(x)) if math.isfinite(x) else ""


def read_truth(path):
    """``{id: (status, infection_time, removal_time)}`` with ``inf`` for blanks."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            i = float(row["infection_time"]) if row["infection_time"] else math.inf
            r = float(row["removal_time"]) if row["removal_time"] else math.inf
            out[int(row["id"])] = (row["status"], i, r)
    return out


def truth_infection_sum(truth):
    """Sum of infection times over every infected (and therefore culled) farm."""
    return float(sum(i for status, i, _ in truth.values() if status in ("B", "C")))


def replicate_rng(seed, replicate, attempt=0):
    """Generator for one replicate, derived from the master seed alone."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replicate), int(attempt)]))


def simulate_study(dataset: Dataset, rates, params: InfectiousPeriodParams, policy: CullingPolicy,
                   seed, replicates, omega=None, min_infected=0, max_attempts=1000,
                   compensation_table=None):
    """Independent outbreaks, keeping only those with at least ``min_infected`` infections.

    ``omega`` is a farm id, or ``None`` to pick the initial case uniformly
    per attempt.  Attempt ``a`` of replicate ``k`` always uses the stream
    ``(seed, k, a)``, so a study is reproducible from its master seed.

    Returns a list of ``OutbreakResult``.
    """
    beta = pair_rates(dataset, rates) if callable(rates) else rates
    out = []
    for k in range(replicates):
        for attempt in range(max_attempts):
            rng = replicate_rng(seed, k, attempt)
            start = int(dataset.ids[rng.integers(dataset.N)]) if omega is None else omega
            result = simulate_outbreak(dataset, beta, params, start, policy, rng, compensation_table)
            if result.n_infected >= min_infected:
                out.append(result)
                break
        else:
            raise RuntimeError(f"replicate {k}: no outbreak reached {min_infected} infections "
                               f"in {max_attempts} attempts")
    return out
