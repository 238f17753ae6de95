"""Command-line entry point: ``farmgp {simulate,fit,summarize,predict,validate}``.

Every command reads one TOML config file.  Relative paths in it are taken
relative to the config file.  Exit codes: 0 success, 1 usage or config
error, 2 runtime error, 3 a validation suite failed.
"""
from __future__ import annotations

import argparse
import difflib
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .data import DEFAULT_COLUMNS, FLOCK_TYPES, build_pseudo_grid, parse_farm_file, read_knot_file
from .data import uniform_layout, write_farm_file
from .likelihood import ConstantRate, ExponentialRate, InfectiousPeriodParams, ParametricRate
from .mcmc import FitOptions, PriorConfig, TuningConfig, concat_traces, read_trace, run_chain
from .posterior import (posterior_predictive, infection_probabilities, i_tilde, scalar_summary,
                        summarize_curve, infection_sum_median)
from .simulate import (CompensationTable, CullingPolicy, simulate_study, write_events, write_summary,
                       write_truth, export_observed, read_truth, truth_infection_sum, summary_record)
from . import validate as suites

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("farmgp")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2, 3

NUM = (int, float)
RATE = {"kind": str, "scale": NUM, "decay": NUM, "value": NUM,
        "kernel": int, "beta0": NUM, "beta1": NUM, "beta2": NUM}
SCHEMA = {
    "seed": int,
    "workers": int,
    "output_dir": str,
    "data": {"farm_file": str, "date_mode": str, "delimiter": str, "min_flock_size": int,
             "columns": {k: str for k in DEFAULT_COLUMNS}},
    "grid": {"count": int, "knots": list, "knot_file": str, "segments": list},
    "simulate": {"layout": {"count": int, "side": NUM, "flocks": bool}, "rate": RATE,
                 "shape": NUM, "gamma": NUM, "omega": (int, str),
                 "policy": {"mode": str, "radius": NUM, "thresholds": list},
                 "replicates": int, "min_infected": int, "max_attempts": int},
    "fit": {"chains": int,
            "tuning": {"delta": NUM, "sigma_l": NUM, "sigma_gamma": NUM, "sigma_i_omega": NUM,
                       "moves_per_iteration": int, "iterations": int, "burn_in": int,
                       "thinning": int, "adapt": bool},
            "prior": {"l_rate": NUM, "gamma_rate": NUM, "i_omega_rate": NUM, "alpha": NUM,
                      "shape": NUM},
            "length": NUM, "fix_l": bool, "fixed": list, "initial_gamma": NUM,
            "initial_field": str,
            "audit_interval": int, "checkpoint_interval": int, "rate": RATE},
    "summarize": {"traces": list, "knots": list, "truth_file": str},
    "predict": {"traces": list, "radii": list, "mode": str, "replicates": int, "draws": int,
                "compensation": {k: NUM for k in FLOCK_TYPES}},
    "validate": {"instances": int, "perturbations": int, "tuples": int, "prior_sweeps": int},
}
STOCHASTIC = {"simulate", "fit", "predict", "validate"}


class ConfigError(Exception):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config ---------------------------------------------------------------------------

def _check(node, schema, where, problems):
    for key, value in node.items():
        path = f"{where}.{key}" if where else key
        if key not in schema:
            hint = difflib.get_close_matches(key, list(schema), n=1)
            problems.append(f"unknown key '{path}'" + (f" (did you mean '{hint[0]}'?)" if hint else ""))
            continue
        expect = schema[key]
        if isinstance(expect, dict):
            if not isinstance(value, dict):
                problems.append(f"'{path}' must be a table")
            else:
                _check(value, expect, path, problems)
        elif isinstance(value, bool) and expect is not bool:
            problems.append(f"'{path}' must not be a boolean")
        elif not isinstance(value, expect):
            names = expect.__name__ if isinstance(expect, type) else "/".join(t.__name__ for t in expect)
            problems.append(f"'{path}' must be of type {names}, got {type(value).__name__}")


def load_config(path, overrides):
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file {path} not found"])
    try:
        cfg = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as err:
        raise ConfigError([f"{path}: {err}"]) from None
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    problems = []
    _check(cfg, SCHEMA, "", problems)
    if problems:
        raise ConfigError(problems)
    cfg["_base"] = path.resolve().parent
    return cfg


def _path(cfg, value):
    p = Path(value)
    return p if p.is_absolute() else cfg["_base"] / p


def _output_dir(cfg):
    return _path(cfg, cfg.get("output_dir", "output"))


def _require(cfg, section, keys, problems):
    sec = cfg.get(section, {})
    for k in keys:
        if k not in sec:
            problems.append(f"missing '{section}.{k}'")


def _rate_from(spec, where, problems):
    kind = spec.get("kind")
    try:
        if kind == "exponential":
            return ExponentialRate(float(spec["scale"]), float(spec["decay"]))
        if kind == "constant":
            return ConstantRate(float(spec["value"]))
        if kind == "parametric":
            return ParametricRate(int(spec["kernel"]), float(spec["beta0"]),
                                  spec.get("beta1"), spec.get("beta2"))
    except KeyError as err:
        problems.append(f"'{where}' lacks {err.args[0]!r} for kind {kind!r}")
        return None
    except ValueError as err:
        problems.append(f"'{where}': {err}")
        return None
    problems.append(f"'{where}.kind' must be exponential, constant or parametric, got {kind!r}")
    return None


def _data_problems(cfg, problems):
    data = cfg.get("data", {})
    if "farm_file" not in data:
        problems.append("missing 'data.farm_file'")
    elif not _path(cfg, data["farm_file"]).exists():
        problems.append(f"farm file {_path(cfg, data['farm_file'])} not found")
    if data.get("date_mode", "iso") not in ("iso", "numeric"):
        problems.append("'data.date_mode' must be 'iso' or 'numeric'")


def _trace_paths(cfg, section):
    listed = cfg.get(section, {}).get("traces")
    if listed:
        return [_path(cfg, p) for p in listed]
    return sorted(_output_dir(cfg).glob("trace_chain*.jsonl"))


def validate_config(cfg, command):
    """Everything that can be checked before any work starts."""
    problems = []
    if command in STOCHASTIC and "seed" not in cfg:
        problems.append("a seed is required (config 'seed' or --seed)")
    if "workers" in cfg and cfg["workers"] < 1:
        problems.append("'workers' must be at least 1")
    if command == "simulate":
        sim = cfg.get("simulate", {})
        if "layout" not in sim:
            _data_problems(cfg, problems)
        _require(cfg, "simulate", ("rate", "shape", "gamma"), problems)
        if "rate" in sim:
            _rate_from(sim["rate"], "simulate.rate", problems)
        pol = sim.get("policy", {})
        if pol.get("mode", "none") not in ("none", "simple_ring", "capped_ring"):
            problems.append("'simulate.policy.mode' must be none, simple_ring or capped_ring")
        omega = sim.get("omega", "first-by-seed")
        if isinstance(omega, str) and omega != "first-by-seed":
            problems.append("'simulate.omega' must be a farm id or 'first-by-seed'")
    elif command == "fit":
        _data_problems(cfg, problems)
        fit = cfg.get("fit", {})
        if fit.get("fix_l") and "length" not in fit:
            problems.append("'fit.fix_l' needs 'fit.length'")
        if "rate" in fit:
            _rate_from(fit["rate"], "fit.rate", problems)
        _grid_problems(cfg, problems)
    elif command in ("summarize", "predict"):
        paths = _trace_paths(cfg, command)
        if not paths:
            problems.append(f"no traces given in '{command}.traces' and none found in the output directory")
        for p in paths:
            if not p.exists():
                problems.append(f"trace file {p} not found")
        if command == "predict":
            _data_problems(cfg, problems)
            if cfg.get("predict", {}).get("mode", "capped_ring") not in ("simple_ring", "capped_ring"):
                problems.append("'predict.mode' must be simple_ring or capped_ring")
        truth = cfg.get("summarize", {}).get("truth_file")
        if command == "summarize" and truth and not _path(cfg, truth).exists():
            problems.append(f"truth file {_path(cfg, truth)} not found")
    if problems:
        raise ConfigError(problems)


def _grid_problems(cfg, problems):
    grid = cfg.get("grid", {})
    given = [k for k in ("count", "knots", "knot_file", "segments") if k in grid]
    if len(given) > 1:
        problems.append(f"grid: give only one of count, knots, knot_file, segments (got {given})")
    if "knot_file" in grid and not _path(cfg, grid["knot_file"]).exists():
        problems.append(f"knot file {_path(cfg, grid['knot_file'])} not found")


def _grid(cfg, dataset):
    grid = cfg.get("grid", {})
    if "knots" in grid:
        return build_pseudo_grid(knots=grid["knots"])
    if "knot_file" in grid:
        return read_knot_file(_path(cfg, grid["knot_file"]))
    if "segments" in grid:
        return build_pseudo_grid(segments=grid["segments"])
    return build_pseudo_grid(count=grid.get("count", 256),
                             max_distance=dataset.distances.max_distance())


def _read_data(cfg):
    data = cfg["data"]
    return parse_farm_file(_path(cfg, data["farm_file"]), data.get("date_mode", "iso"),
                           data.get("columns"), data.get("delimiter", ","),
                           data.get("min_flock_size"))


# -- outputs ------------------------------------------------------------------------

def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _config_digest(cfg):
    # where outputs go and how many processes ran them do not change the results
    clean = {k: v for k, v in cfg.items() if not k.startswith("_") and k not in ("output_dir", "workers")}
    return hashlib.sha256(json.dumps(clean, sort_keys=True, default=str).encode()).hexdigest()


def _manifest(cfg, command, files, directory):
    return {
        "command": command,
        "config_sha256": _config_digest(cfg),
        "seed": cfg.get("seed"),
        "versions": {"farmgp": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "outputs": {name: _sha256(directory / name) for name in sorted(files)},
    }


@contextmanager
def staged(out_dir, command):
    """Directory for a command's outputs, moved into ``out_dir`` only on success."""
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = out_dir / f".staging-{command}"
    if stage.exists():
        shutil.rmtree(stage)
    stage.mkdir()
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    for item in sorted(stage.iterdir()):
        os.replace(item, out_dir / item.name)
    stage.rmdir()


def _finish(cfg, command, stage):
    files = [p.name for p in stage.iterdir()]
    manifest = _manifest(cfg, command, files, stage)
    (stage / f"manifest_{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_cell(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


# -- commands -------------------------------------------------------------------------

def cmd_simulate(cfg):
    sim = cfg["simulate"]
    seed = cfg["seed"]
    if "layout" in sim:
        lay = sim["layout"]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2**32 - 1]))
        population = uniform_layout(int(lay["count"]), float(lay["side"]), rng, lay.get("flocks", True))
    else:
        population = _read_data(cfg)
    rates = _rate_from(sim["rate"], "simulate.rate", [])
    params = InfectiousPeriodParams(float(sim["shape"]), float(sim["gamma"]))
    pol = sim.get("policy", {})
    kw = {"thresholds": tuple(tuple(r) for r in pol["thresholds"])} if "thresholds" in pol else {}
    policy = CullingPolicy(pol.get("mode", "none"), float(pol.get("radius", 0.0)), **kw)
    omega = sim.get("omega", "first-by-seed")
    omega = None if omega == "first-by-seed" else int(omega)
    flocks = all(f.flock_type is not None and f.flock_size is not None for f in population.farms)
    results = simulate_study(population, rates, params, policy, seed, int(sim.get("replicates", 1)),
                             omega, int(sim.get("min_infected", 0)), int(sim.get("max_attempts", 1000)),
                             CompensationTable() if flocks else None)
    out = _output_dir(cfg)
    with staged(out, "simulate") as stage:
        write_farm_file(population, stage / "population.csv")
        rows = []
        for k, res in enumerate(results):
            tag = f"{k:03d}"
            write_farm_file(export_observed(res), stage / f"observed_{tag}.csv")
            write_events(res, stage / f"events_{tag}.csv")
            write_truth(res, stage / f"truth_{tag}.csv")
            write_summary(res, stage / f"summary_{tag}.json")
            rec = summary_record(res)
            rows.append([tag, rec["n_infected"], rec["n_culled"], rec["B"], rec["C"], rec["D"],
                         rec["omega"], rec["duration"],
                         "" if rec["compensation"] is None else rec["compensation"]])
        _write_csv(stage / "simulate_summary.csv",
                   ["replicate", "infected", "culled", "B", "C", "D", "omega", "duration", "compensation"],
                   rows)
        _finish(cfg, "simulate", stage)
    return EXIT_OK


def _fit_settings(cfg):
    fit = cfg.get("fit", {})
    tuning = TuningConfig(seed=cfg["seed"], **fit.get("tuning", {}))
    prior = PriorConfig(**fit.get("prior", {}))
    fixed_rate = _rate_from(fit["rate"], "fit.rate", []) if "rate" in fit else None
    options = FitOptions(length=fit.get("length"), fix_l=fit.get("fix_l", False),
                         fixed=tuple(fit.get("fixed", ())), fixed_rate=fixed_rate,
                         initial_gamma=fit.get("initial_gamma"),
                         initial_field=fit.get("initial_field", "constant"),
                         audit_interval=fit.get("audit_interval", 1000),
                         checkpoint_interval=fit.get("checkpoint_interval", 1000))
    return tuning, prior, options


def _fit_chain(job):
    dataset, grid, tuning, prior, options, seed_seq, trace_path, ck_path, resume = job
    rng = np.random.default_rng(seed_seq)
    trace = run_chain(dataset, grid, tuning, prior, options, rng, trace_path, ck_path, resume)
    return trace.stats, len(trace)


def cmd_fit(cfg, resume=False):
    dataset = _read_data(cfg)
    grid = _grid(cfg, dataset)
    try:
        tuning, prior, options = _fit_settings(cfg)
    except (TypeError, ValueError) as err:
        raise ConfigError([f"fit: {err}"]) from None
    chains = int(cfg.get("fit", {}).get("chains", 1))
    out = _output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    seqs = np.random.SeedSequence(cfg["seed"]).spawn(chains)
    jobs = [(dataset, grid, tuning, prior, options, seqs[c], out / f"trace_chain{c}.jsonl",
             out / f"checkpoint_chain{c}.json", resume) for c in range(chains)]
    workers = min(cfg.get("workers", 1), chains)
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_fit_chain, jobs))
    else:
        results = [_fit_chain(j) for j in jobs]
    summary = {f"chain{c}": {"retained": n, **stats} for c, (stats, n) in enumerate(results)}
    with staged(out, "fit") as stage:
        (stage / "fit_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        for c in range(chains):
            shutil.copyfile(out / f"trace_chain{c}.jsonl", stage / f"trace_chain{c}.jsonl")
        _finish(cfg, "fit", stage)
    return EXIT_OK


def _traces(cfg, section):
    return concat_traces(read_trace(p) for p in _trace_paths(cfg, section))


def cmd_summarize(cfg):
    sec = cfg.get("summarize", {})
    trace = _traces(cfg, "summarize")
    knots = np.asarray(sec.get("knots", trace.d_bar), dtype=float)
    curve = summarize_curve(trace, knots)
    out = _output_dir(cfg)
    with staged(out, "summarize") as stage:
        _write_csv(stage / "curve.csv", ["distance_km", "lower", "median", "upper"],
                   zip(curve.knots, curve.lower, curve.median, curve.upper))
        _write_csv(stage / "scalars.csv", ["quantity", "lower", "median", "upper"],
                   [[k, *v] for k, v in scalar_summary(trace).items()])
        probs = infection_probabilities(trace)
        _write_csv(stage / "infection_probabilities.csv", ["id", "probability"], sorted(probs.items()))
        if sec.get("truth_file"):
            truth = truth_infection_sum(read_truth(_path(cfg, sec["truth_file"])))
            score = {"true_sum": truth, "posterior_median_sum": infection_sum_median(trace),
                     "i_tilde_percent": i_tilde(truth, trace)}
            (stage / "i_tilde.json").write_text(json.dumps(score, indent=2, sort_keys=True) + "\n")
        _finish(cfg, "summarize", stage)
    return EXIT_OK


def cmd_predict(cfg):
    sec = cfg.get("predict", {})
    dataset = _read_data(cfg)
    trace = _traces(cfg, "predict")
    radii = [float(r) for r in sec.get("radii", [0.0, 1.0, 2.0])]
    mode = sec.get("mode", "capped_ring")
    policies = [CullingPolicy("none") if r == 0 else CullingPolicy(mode, r) for r in radii]
    table = CompensationTable({**CompensationTable().rates, **sec.get("compensation", {})})
    rng = np.random.default_rng(cfg["seed"])
    summary = posterior_predictive(trace, dataset, policies, rng, int(sec.get("replicates", 1)),
                                   sec.get("draws"), table, cfg.get("workers", 1), labels=radii)
    out = _output_dir(cfg)
    with staged(out, "predict") as stage:
        rows = []
        for p, r in enumerate(radii):
            (il, im, ih), (cl, cm, ch), (el, em, eh) = summary.infected[p], summary.culled[p], summary.cost[p]
            rows.append([r, im, il, ih, cm, cl, ch, em, el, eh])
        _write_csv(stage / "predictive.csv",
                   ["radius_km", "infected_median", "infected_lower", "infected_upper",
                    "culled_median", "culled_lower", "culled_upper",
                    "compensation_median", "compensation_lower", "compensation_upper"], rows)
        pool = summary.pool
        reps = [[k, r, int(pool["infected"][p, k]), int(pool["culled"][p, k]), pool["cost"][p, k]]
                for k in range(pool["infected"].shape[1]) for p, r in enumerate(radii)]
        _write_csv(stage / "predictive_replicates.csv",
                   ["replicate", "radius_km", "infected", "culled", "compensation"], reps)
        _finish(cfg, "predict", stage)
    return EXIT_OK


def cmd_validate(cfg, likelihood_fn=None):
    sec = cfg.get("validate", {})
    results = suites.run_suites(cfg["seed"], sec.get("instances", 1000), sec.get("perturbations", 1000),
                                sec.get("tuples", 100), sec.get("prior_sweeps", 20000),
                                likelihood_fn=likelihood_fn)
    for r in results:
        print(r.line())
    report = {r.name: {"passed": r.passed, "discrepancy": r.discrepancy, "tolerance": r.tolerance,
                       "details": r.details} for r in results}
    out = _output_dir(cfg)
    with staged(out, "validate") as stage:
        (stage / "validate_report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True, default=float) + "\n")
        _finish(cfg, "validate", stage)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "summarize": cmd_summarize,
            "predict": cmd_predict, "validate": cmd_validate}


def build_parser():
    parser = _Parser(prog="farmgp", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--workers", type=int, help="worker processes (default: all CPUs)")
    parser.add_argument("--output-dir", help="where outputs go (overrides the config)")
    parser.add_argument("--resume", action="store_true", help="continue fit chains from their checkpoints")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None, likelihood_fn=None):
    """Run the CLI; returns the exit code.  ``likelihood_fn`` is a test hook
    replacing the evaluator checked by ``validate``."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "workers": args.workers,
                                        "output_dir": args.output_dir})
        if args.output_dir is not None:  # command-line paths are relative to the cwd
            cfg["output_dir"] = str(Path(args.output_dir).resolve())
        cfg.setdefault("workers", os.cpu_count() or 1)
        validate_config(cfg, args.command)
    except ConfigError as err:
        print("configuration error:", file=sys.stderr)
        for p in err.problems:
            print(f"  - {p}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "fit":
            return cmd_fit(cfg, resume=args.resume)
        if args.command == "validate":
            return cmd_validate(cfg, likelihood_fn)
        return COMMANDS[args.command](cfg)
    except ConfigError as err:
        print("configuration error:", file=sys.stderr)
        for p in err.problems:
            print(f"  - {p}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - every failure maps to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
