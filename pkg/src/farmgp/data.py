"""Farm records, outbreak files and distance queries.

Culling times are stored as day offsets from the earliest natural cull, so
that the first naturally culled farm sits at ``t = 0``.  Farms that were never
culled carry ``numpy.inf``; every comparison in the package treats it as the
``+inf`` sentinel.
"""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

FLOCK_TYPES = ("broiler", "duck", "turkey", "layer")

DEFAULT_COLUMNS = {
    "id": "id",
    "x": "x",
    "y": "y",
    "cull_date": "cull_date",
    "preemptive": "preemptive",
    "flock_type": "flock_type",
    "flock_size": "flock_size",
}

_TRUE = {"yes", "y", "true", "t", "1"}
_FALSE = {"no", "n", "false", "f", "0", ""}


class FarmFileError(ValueError):
    """Raised for malformed farm files; ``row`` is the 1-based data row."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class FarmRecord:
    id: int
    x: float
    y: float
    cull_time: float = math.inf
    preemptive: bool = False
    flock_type: str | None = None
    flock_size: int | None = None

    def __post_init__(self):
        if self.preemptive and not math.isfinite(self.cull_time):
            raise ValueError(f"farm {self.id}: pre-emptive flag without a culling time")
        if self.flock_size is not None and self.flock_size < 0:
            raise ValueError(f"farm {self.id}: negative flock size")
        if self.flock_type is not None and self.flock_type not in FLOCK_TYPES:
            raise ValueError(f"farm {self.id}: unknown flock type {self.flock_type!r}")

    @property
    def culled(self):
        return math.isfinite(self.cull_time)


@dataclass
class Dataset:
    """An observed outbreak: farm locations, culling times and flags.

    ``time_origin`` is whatever the input used for the earliest natural
    culling (a ``datetime.date`` for calendar files, a float otherwise).
    """

    farms: list[FarmRecord]
    time_origin: object = 0.0

    def __post_init__(self):
        seen = set()
        for farm in self.farms:
            if farm.id in seen:
                raise ValueError(f"duplicate farm id {farm.id}")
            seen.add(farm.id)

    @property
    def N(self):
        return len(self.farms)

    @cached_property
    def ids(self):
        return np.array([f.id for f in self.farms], dtype=np.int64)

    @cached_property
    def coords(self):
        return np.array([(f.x, f.y) for f in self.farms], dtype=float).reshape(-1, 2)

    @cached_property
    def cull_times(self):
        return np.array([f.cull_time for f in self.farms], dtype=float)

    @cached_property
    def preemptive(self):
        return np.array([f.preemptive for f in self.farms], dtype=bool)

    @cached_property
    def natural(self):
        return np.isfinite(self.cull_times) & ~self.preemptive

    @cached_property
    def index_of(self):
        return {int(i): k for k, i in enumerate(self.ids)}

    @cached_property
    def distances(self):
        return DistanceIndex(self.ids, self.coords)

    def first_culled(self):
        """Index of the earliest naturally culled farm (ties broken by id)."""
        natural = np.flatnonzero(self.natural)
        if natural.size == 0:
            raise ValueError("dataset has no naturally culled farm")
        order = np.lexsort((self.ids[natural], self.cull_times[natural]))
        return int(natural[order[0]])


@dataclass(frozen=True)
class ObservedClassification:
    """Observed status sets.  ``P`` holds pre-emptively culled farms, whose
    infection status (C or D) is latent."""

    A: frozenset
    B: frozenset
    P: frozenset


class DistanceIndex:
    """Euclidean distances (km) between farms, addressed by farm id.

    The full matrix is built lazily and kept when it has at most
    ``cache_limit`` entries; larger populations compute rows on demand.
    """

    def __init__(self, ids, coords, cache_limit=25_000_000):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.coords = np.asarray(coords, dtype=float).reshape(-1, 2)
        self._index = {int(i): k for k, i in enumerate(self.ids)}
        self._cache_limit = cache_limit
        self._matrix = None

    def __len__(self):
        return len(self.ids)

    def index(self, farm_id):
        try:
            return self._index[int(farm_id)]
        except KeyError:
            raise KeyError(f"unknown farm id {farm_id}") from None

    def distance(self, j, k):
        a = self.coords[self.index(j)]
        b = self.coords[self.index(k)]
        return float(math.hypot(a[0] - b[0], a[1] - b[1]))

    def rows(self, indices):
        """Distances from the farms at positions ``indices`` to every farm."""
        indices = np.asarray(indices, dtype=np.int64)
        if self._matrix is None and len(self) ** 2 <= self._cache_limit:
            self._matrix = cdist(self.coords, self.coords)
        if self._matrix is not None:
            return self._matrix[indices]
        return cdist(self.coords[indices], self.coords)

    def matrix(self):
        return self.rows(np.arange(len(self)))

    def max_distance(self):
        if len(self) < 2:
            return 0.0
        from scipy.spatial import ConvexHull, QhullError

        pts = self.coords
        try:
            pts = pts[ConvexHull(pts).vertices]
        except (QhullError, ValueError):
            # collinear or too few points: fall back to all of them
            pass
        return float(cdist(pts, pts).max())


def distance(index: DistanceIndex, j, k) -> float:
    return index.distance(j, k)


def classify(dataset: Dataset) -> ObservedClassification:
    A, B, P = set(), set(), set()
    for farm in dataset.farms:
        if not farm.culled:
            A.add(farm.id)
        elif farm.preemptive:
            P.add(farm.id)
        else:
            B.add(farm.id)
    return ObservedClassification(frozenset(A), frozenset(B), frozenset(P))


def _parse_flag(text, row):
    value = text.strip().lower()
    if value in _TRUE:
        return True
    if value in _FALSE:
        return False
    raise FarmFileError(f"cannot read pre-emptive flag {text!r}", row)


def parse_farm_file(path, date_mode="iso", columns=None, delimiter=",",
                    min_flock_size=None) -> Dataset:
    """Read a delimited farm file.

    Parameters
    ----------
    path : path-like
        File with a header row.  Required columns: id, x, y.  Optional:
        cull_date, preemptive, flock_type, flock_size.
    date_mode : {"iso", "numeric"}
        ``iso`` reads calendar dates (YYYY-MM-DD); ``numeric`` reads day
        offsets on any origin.  Either way the result is shifted so that the
        earliest natural cull is day 0.
    columns : dict, optional
        Maps canonical column names to the headers used in the file.
    min_flock_size : int, optional
        Drop farms with a known flock size below this many birds.

    Returns
    -------
    Dataset
    """
    if date_mode not in ("iso", "numeric"):
        raise ValueError(f"date_mode must be 'iso' or 'numeric', got {date_mode!r}")
    cols = dict(DEFAULT_COLUMNS)
    cols.update(columns or {})
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter, skipinitialspace=True)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FarmFileError(f"{path}: empty farm file") from None
        position = {name: header.index(cols[name]) for name in cols if cols[name] in header}
        missing = [name for name in ("id", "x", "y") if name not in position]
        if missing:
            raise FarmFileError(f"{path}: header lacks required columns {missing}")

        def cell(values, name):
            k = position.get(name)
            if k is None or k >= len(values):
                return ""
            return values[k].strip()

        raw = []
        seen = {}
        for row, values in enumerate(reader, start=1):
            if not any(v.strip() for v in values):
                continue
            try:
                farm_id = int(cell(values, "id"))
                x = float(cell(values, "x"))
                y = float(cell(values, "y"))
            except ValueError:
                raise FarmFileError("cannot read id or coordinates", row) from None
            if farm_id in seen:
                raise FarmFileError(f"duplicate farm id {farm_id} (first seen on row {seen[farm_id]})", row)
            seen[farm_id] = row
            text = cell(values, "cull_date")
            when = None
            if text:
                try:
                    when = dt.date.fromisoformat(text) if date_mode == "iso" else float(text)
                except ValueError:
                    raise FarmFileError(f"cannot read culling date {text!r}", row) from None
            pre = _parse_flag(cell(values, "preemptive"), row)
            if pre and when is None:
                raise FarmFileError("pre-emptive flag set without a culling date", row)
            ftype = cell(values, "flock_type").lower() or None
            if ftype is not None and ftype not in FLOCK_TYPES:
                raise FarmFileError(f"unknown flock type {ftype!r}", row)
            fsize = cell(values, "flock_size")
            try:
                fsize = int(float(fsize)) if fsize else None
            except ValueError:
                raise FarmFileError(f"cannot read flock size {fsize!r}", row) from None
            if fsize is not None and fsize < 0:
                raise FarmFileError("negative flock size", row)
            raw.append((row, farm_id, x, y, when, pre, ftype, fsize))

    if not raw:
        raise FarmFileError(f"{path}: no farm rows")
    if min_flock_size is not None:
        raw = [r for r in raw if r[7] is None or r[7] >= min_flock_size]

    natural = [r[4] for r in raw if r[4] is not None and not r[5]]
    if not natural:
        raise FarmFileError(f"{path}: no naturally culled farm to anchor the time axis")
    origin = min(natural)

    def offset(when):
        if when is None:
            return math.inf
        if date_mode == "iso":
            return float((when - origin).days)
        return float(when - origin)

    farms = [FarmRecord(fid, x, y, offset(when), pre, ftype, fsize)
             for _, fid, x, y, when, pre, ftype, fsize in raw]
    return Dataset(farms, time_origin=origin)


def write_farm_file(dataset: Dataset, path, delimiter=","):
    """Write ``dataset`` in numeric day-offset mode (round-trips through
    :func:`parse_farm_file` with ``date_mode="numeric"``)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        out = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        out.writerow(list(DEFAULT_COLUMNS))
        for f in dataset.farms:
            out.writerow([
                f.id, repr(f.x), repr(f.y),
                repr(f.cull_time) if f.culled else "",
                "yes" if f.preemptive else "no",
                f.flock_type or "",
                "" if f.flock_size is None else f.flock_size,
            ])


def build_pseudo_grid(count=None, max_distance=None, knots=None, segments=None):
    """Ordered pseudo-input distances for the projected GP.

    Give exactly one of: ``count`` with ``max_distance`` (equal spacing on
    ``[0, max_distance]``), an explicit ``knots`` sequence, or ``segments`` as
    ``(start, stop, step)`` triples whose ranges include both ends.
    """
    given = sum(x is not None for x in (count, knots, segments))
    if given != 1:
        raise ValueError("give exactly one of count, knots or segments")
    if count is not None:
        if max_distance is None:
            raise ValueError("equal spacing needs max_distance")
        if count < 1:
            raise ValueError("grid needs at least one knot")
        if count > 1 and max_distance <= 0:
            raise ValueError("max_distance must be positive for more than one knot")
        return np.linspace(0.0, float(max_distance), int(count))
    if segments is not None:
        parts = []
        for start, stop, step in segments:
            n = int(round((stop - start) / step)) + 1
            parts.append(start + step * np.arange(n))
        knots = np.concatenate(parts)
    knots = np.asarray(knots, dtype=float).ravel()
    if knots.size == 0:
        raise ValueError("grid needs at least one knot")
    if np.any(np.diff(knots) <= 0):
        raise ValueError("pseudo-grid knots must be strictly increasing")
    if knots[0] != 0.0:
        raise ValueError("pseudo grid must start at distance 0")
    if max_distance is not None and knots[-1] < max_distance:
        raise ValueError(f"pseudo grid ends at {knots[-1]} km, short of {max_distance} km")
    return knots


def read_knot_file(path):
    return build_pseudo_grid(knots=np.loadtxt(path, ndmin=1))


def with_flocks(dataset: Dataset, types, sizes) -> Dataset:
    farms = [replace(f, flock_type=t, flock_size=int(s)) for f, t, s in zip(dataset.farms, types, sizes)]
    return Dataset(farms, dataset.time_origin)


def uniform_layout(n, side, rng, flocks=False) -> Dataset:
    """``n`` farms placed uniformly on a ``side`` x ``side`` km square, ids
    ``1..n``, none culled.  With ``flocks`` each farm also gets a random
    flock type and a size between 500 and 50,000 birds."""
    xy = rng.uniform(0.0, side, size=(n, 2))
    farms = [FarmRecord(k + 1, float(x), float(y)) for k, (x, y) in enumerate(xy)]
    data = Dataset(farms)
    if flocks:
        types = rng.choice(FLOCK_TYPES, size=n)
        sizes = rng.integers(500, 50_001, size=n)
        data = with_flocks(data, [str(t) for t in types], sizes)
    return data


__all__ = [
    "FLOCK_TYPES", "FarmFileError", "FarmRecord", "Dataset", "ObservedClassification",
    "DistanceIndex", "distance", "classify", "parse_farm_file", "write_farm_file",
    "build_pseudo_grid", "read_knot_file", "uniform_layout", "with_flocks",
]
