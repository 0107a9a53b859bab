import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scorelab.bounds import TheoryParams, lmc_chi2_recursion
from scorelab.cli import main
from scorelab.config import ConfigError, dumps, loads, parse_config
from scorelab.experiments import COLUMNS, EXIT_BOUND, EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK

LMC_TOML = """
kind = "lmc"
seed = 7
[target]
weights = [0.5, 0.5]
means = [[-2.0], [2.0]]
variances = [1.0, 1.0]
[oracle]
mode = "linf_perturbed"
eps1 = 0.1
shape = "smooth_field"
[sampler]
step_size = 0.05
num_steps = 40
chains = 5000
snapshot_times = [1.0]
[sampler.initial]
kind = "gaussian"
mean = [0.0]
var = 4.0
"""

BOUNDS_TOML = """
kind = "bounds"
[bounds]
theorem = "lmc"
chi0 = 0.5
params = { d = 2, h = 1e-4, N = 50, eps1 = 0.05 }
"""


def write(tmp_path, text, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from(["lmc", "anneal", "coupled", "bounds", "schedule"]), seed=st.integers(0, 2 ** 31),
       h=st.floats(1e-4, 1.0), n=st.integers(0, 10 ** 6), chains=st.integers(1, 10 ** 6),
       w=st.floats(0.01, 0.99), mean=st.floats(-10, 10), var=st.floats(0.01, 10),
       eps1=st.one_of(st.none(), st.floats(0.0, 2.0)), plan=st.sampled_from(["none", "every", "final_only"]))
def test_config_round_trip(kind, seed, h, n, chains, w, mean, var, eps1, plan):
    data = {"kind": kind, "seed": seed,
            "target": {"weights": [w, 1 - w], "means": [[mean], [-mean]], "variances": [var, 1.0]},
            "sampler": {"step_size": h, "num_steps": n, "chains": chains, "corrector": {"plan": plan}}}
    if eps1 is not None:
        data["oracle"] = {"mode": "linf_perturbed", "eps1": eps1}
    cfg = parse_config(data)
    assert loads(dumps(cfg)) == cfg


@pytest.mark.parametrize("text,where", [
    ('kind = "lmc"\n[sampler]\nstep_size = -1.0\n', "sampler.step_size"),
    ('kind = "lmc"\n[sampler]\nstepsize = 0.1\n', "sampler.stepsize"),
    ('kind = "teleport"\n', "kind"),
    ('kind = "lmc"\n[oracle]\nmode = "linf_perturbed"\n', "oracle"),
    ('kind = "lmc"\n[target]\nweights = [0.5, 0.5]\n', "target"),
    ('kind = "predictor"\n[sampler]\nstep_size = 0.1\nnum_steps = 20\n', "horizon"),
    ('kind = "lmc"\nseed = \n', "TOML syntax"),
])
def test_malformed_config_names_location(tmp_path, capsys, text, where):
    with pytest.raises(ConfigError, match=where):
        loads(text)
    assert main(["run", str(write(tmp_path, text))]) == EXIT_CONFIG
    assert where in capsys.readouterr().err


def test_missing_file_and_bad_usage(tmp_path, capsys):
    assert main(["run", str(tmp_path / "absent.toml")]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["run"])
    assert exc.value.code == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["launch"])
    assert exc.value.code == EXIT_CONFIG


def test_unknown_suite_exits_config(capsys):
    assert main(["verify", "nonsense"]) == EXIT_CONFIG
    assert "unknown suite" in capsys.readouterr().err


def test_lmc_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(write(tmp_path, LMC_TOML)), "--output", str(out)]) == EXIT_OK
    assert "lmc: 5000 chains" in capsys.readouterr().out
    rows = read_rows(out / "results.csv")
    assert tuple(rows[0]) == COLUMNS
    assert {r["step"] for r in rows} == {"20", "40"}
    assert {"mean[0]", "var", "hist_tv", "mode_mass[0]", "diverged_chains"} <= {r["statistic"] for r in rows}
    manifest = (out / "manifest.txt").read_text(encoding="utf-8")
    assert "threads 1, exit status 0" in manifest
    body = "\n".join(l for l in manifest.splitlines() if not l.startswith("#"))
    assert loads(body) == loads(LMC_TOML)
    assert (out / "summary.txt").exists()


def test_runs_are_byte_identical(tmp_path):
    cfg = write(tmp_path, LMC_TOML)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(cfg), "--output", str(a), "--quiet"]) == EXIT_OK
    assert main(["run", str(cfg), "--output", str(b), "--quiet", "--threads", "4"]) == EXIT_OK
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()


def test_thread_env_overrides_flag(tmp_path, monkeypatch):
    monkeypatch.setenv("SSL_THREADS", "3")
    out = tmp_path / "o"
    assert main(["run", str(write(tmp_path, LMC_TOML)), "--output", str(out), "--threads", "1", "--quiet"]) == 0
    assert "threads 3," in (out / "manifest.txt").read_text(encoding="utf-8")
    monkeypatch.setenv("SSL_THREADS", "many")
    assert main(["run", str(write(tmp_path, LMC_TOML)), "--output", str(out), "--quiet"]) == EXIT_CONFIG


def test_bounds_csv_matches_recursion(tmp_path):
    out = tmp_path / "b"
    assert main(["run", str(write(tmp_path, BOUNDS_TOML)), "--output", str(out), "--quiet"]) == EXIT_OK
    rows = [r for r in read_rows(out / "results.csv") if r["statistic"] == "bound"]
    ref = lmc_chi2_recursion(TheoryParams(d=2, h=1e-4, N=50, eps1=0.05), 0.5).trajectory
    np.testing.assert_array_equal([float(r["value"]) for r in rows], ref)
    assert [int(r["step"]) for r in rows] == list(range(51))


def test_counterexample_table(tmp_path, capsys):
    text = 'kind = "counterexample"\n[counterexample]\nLs = [4.0, 10.0]\n'
    out = tmp_path / "c"
    assert main(["run", str(write(tmp_path, text)), "--output", str(out)]) == EXIT_OK
    assert "error decreasing: True, tv increasing: True" in capsys.readouterr().out
    rows = read_rows(out / "results.csv")
    tv = [float(r["value"]) for r in rows if r["statistic"] == "tv"]
    assert len(tv) == 2 and tv[1] > 0.999


def test_diverged_run_exits_three(tmp_path):
    text = 'kind = "lmc"\n[sampler]\nstep_size = 5.0\nnum_steps = 800\nchains = 100\n'
    out = tmp_path / "d"
    assert main(["run", str(write(tmp_path, text)), "--output", str(out), "--quiet"]) == EXIT_DIVERGED
    rows = read_rows(out / "results.csv")
    assert [r["value"] for r in rows if r["statistic"] == "diverged_chains"] == ["100.0"]


def test_schedule_command(capsys):
    assert main(["schedule", "--d", "1", "--sigma-min", "1", "--c-ls", "1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("M = 2, ratio = 2, successive chi2 finite: False")
    assert main(["schedule", "--d", "0"]) == EXIT_CONFIG


def test_bounds_command(tmp_path, capsys):
    assert main(["bounds", "--theorem", "constants", "--set", "C_LS=4", "--set", "family=DDPM"]) == EXIT_OK
    assert "C_tL" in capsys.readouterr().out
    assert main(["bounds", str(write(tmp_path, BOUNDS_TOML)), "--set", "N=3"]) == EXIT_OK
    assert "[lmc_chi2_recursion]" in capsys.readouterr().out
    assert main(["bounds", "--theorem", "pythagoras"]) == EXIT_CONFIG
    assert main(["bounds", "--set", "velocity=3"]) == EXIT_CONFIG


def test_verify_suite_runs(capsys):
    assert main(["verify", "closed_forms"]) in (EXIT_OK, EXIT_BOUND)
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("criterion")]
    assert len(lines) == 4
