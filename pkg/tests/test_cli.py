import json
import pytest

from farmgp import cli
from farmgp.validate import engine_log_likelihood

SIM = """\
seed = 11
[simulate]
layout = {count = 60, side = 6.0, flocks = true}
rate = {kind = "exponential", scale = 0.6, decay = 2.0}
shape = 4.0
gamma = 0.8
policy = {mode = "simple_ring", radius = 1.0}
replicates = 1
min_infected = 8
"""

FIT = """\
seed = 12
[data]
farm_file = "out/observed_000.csv"
date_mode = "numeric"
[grid]
count = 32
[fit]
length = 3.0
fix_l = true
initial_gamma = 0.5
checkpoint_interval = 20
tuning = {iterations = 60, burn_in = 20, moves_per_iteration = 5}
[summarize]
truth_file = "out/truth_000.csv"
[predict]
radii = [0, 1, 2]
draws = 6
replicates = 2
"""

VALIDATE = """\
seed = 3
[validate]
instances = 50
perturbations = 50
tuples = 5
prior_sweeps = 2000
"""


def write(path, text):
    path.write_text(text)
    return str(path)


def run_pipeline(base):
    """Full simulate-fit-summarize-predict run with configs and outputs under ``base``."""
    base.mkdir()
    sim = write(base / "sim.toml", 'output_dir = "out"\n' + SIM)
    fit = write(base / "fit.toml", 'output_dir = "out"\n' + FIT)
    codes = [cli.main(["simulate", "--config", sim, "--workers", "1"])]
    for cmd in ("fit", "summarize", "predict"):
        codes.append(cli.main([cmd, "--config", fit, "--workers", "1"]))
    return codes


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    bases = [root / "a", root / "b"]
    codes = [run_pipeline(b) for b in bases]
    return bases[0], [b / "out" for b in bases], codes


def test_pipeline_runs(pipeline):
    _, (out, _), codes = pipeline
    assert codes[0] == [0, 0, 0, 0]
    for name in ("population.csv", "observed_000.csv", "truth_000.csv", "events_000.csv",
                 "trace_chain0.jsonl", "checkpoint_chain0.json", "fit_summary.json", "curve.csv",
                 "scalars.csv", "infection_probabilities.csv", "i_tilde.json", "predictive.csv",
                 "predictive_replicates.csv", "manifest_predict.json"):
        assert (out / name).exists(), name
    assert not list(out.glob(".staging-*"))


def test_predictive_table_shape(pipeline):
    _, (out, _), _ = pipeline
    rows = (out / "predictive.csv").read_text().splitlines()
    assert rows[0].split(",")[0] == "radius_km"
    assert len(rows[0].split(",")) == 10
    assert [r.split(",")[0] for r in rows[1:]] == ["0.0", "1.0", "2.0"]
    for line in (out / "predictive_replicates.csv").read_text().splitlines()[1:]:
        rep, radius, infected, culled, cost = line.split(",")
        if float(radius) == 0.0:
            assert infected == culled


def test_outputs_are_byte_identical(pipeline):
    _, (a, b), codes = pipeline
    assert codes[0] == codes[1]
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_manifest_lists_output_digests(pipeline):
    _, (out, _), _ = pipeline
    m = json.loads((out / "manifest_summarize.json").read_text())
    assert set(m["outputs"]) == {"curve.csv", "scalars.csv", "infection_probabilities.csv", "i_tilde.json"}
    assert m["seed"] == 12


def test_resume_after_completion_is_stable(pipeline):
    base, (out, _), _ = pipeline
    before = (out / "trace_chain0.jsonl").read_bytes()
    code = cli.main(["fit", "--config", str(base / "fit.toml"), "--workers", "1", "--resume"])
    assert code == 0
    assert (out / "trace_chain0.jsonl").read_bytes() == before


def test_validate_passes_and_reports(tmp_path, capsys):
    cfg = write(tmp_path / "v.toml", VALIDATE)
    assert cli.main(["validate", "--config", cfg, "--output-dir", str(tmp_path / "o")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4 and all(l.startswith("PASS") for l in lines)
    assert (tmp_path / "o" / "validate_report.json").exists()


def test_validate_catches_a_perturbed_likelihood(tmp_path, capsys):
    def perturbed(*args):
        return engine_log_likelihood(*args) * (1 + 1e-6)

    cfg = write(tmp_path / "v.toml", VALIDATE)
    code = cli.main(["validate", "--config", cfg, "--output-dir", str(tmp_path / "o")],
                    likelihood_fn=perturbed)
    assert code == cli.EXIT_VALIDATION
    assert "FAIL likelihood oracle" in capsys.readouterr().out


def test_missing_farm_file_leaves_no_outputs(tmp_path, capsys):
    cfg = write(tmp_path / "f.toml", 'seed = 1\n[data]\nfarm_file = "missing.csv"\n')
    out = tmp_path / "out"
    assert cli.main(["fit", "--config", cfg, "--output-dir", str(out)]) == cli.EXIT_CONFIG
    assert "missing.csv" in capsys.readouterr().err
    assert not out.exists()


def test_unknown_key_suggests_a_fix(tmp_path, capsys):
    cfg = write(tmp_path / "f.toml", "seed = 1\n[simulate]\nreplicats = 3\n")
    assert cli.main(["simulate", "--config", cfg]) == cli.EXIT_CONFIG
    assert "did you mean 'replicates'" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert cli.main(["explode", "--config", "x.toml"]) == cli.EXIT_CONFIG
    assert cli.main(["fit"]) == cli.EXIT_CONFIG
    assert cli.main(["fit", "--config", str(tmp_path / "nope.toml")]) == cli.EXIT_CONFIG


def test_seed_required(tmp_path):
    cfg = write(tmp_path / "s.toml", SIM.replace("seed = 11\n", ""))
    assert cli.main(["simulate", "--config", cfg, "--output-dir", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["simulate", "--config", cfg, "--output-dir", str(tmp_path / "o"),
                     "--seed", "5", "--workers", "1"]) == 0


def test_runtime_failure_exit_code(tmp_path):
    # no outbreak can reach 61 infections among 60 farms
    cfg = write(tmp_path / "s.toml", SIM.replace("min_infected = 8", "min_infected = 61\nmax_attempts = 3"))
    out = tmp_path / "o"
    assert cli.main(["simulate", "--config", cfg, "--output-dir", str(out)]) == cli.EXIT_RUNTIME
    assert not (out / "population.csv").exists()


def test_relative_paths_follow_the_config(tmp_path, monkeypatch):
    sub = tmp_path / "conf"
    sub.mkdir()
    cfg = write(sub / "s.toml", 'output_dir = "here"\n' + SIM)
    monkeypatch.chdir(tmp_path)
    assert cli.main(["simulate", "--config", cfg, "--workers", "1"]) == 0
    assert (sub / "here" / "population.csv").exists()
