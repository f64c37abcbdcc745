from __future__ import annotations

import csv
import io
import json
import shutil
import subprocess
import time

import pytest
import yaml

from switchback import __version__, read_panel
from switchback.cli import EXIT_CONFIG, EXIT_FAILURES, main

LINEAR = {"dgp": "linear", "T": 6, "d": 2, "design": {"kind": "switchback", "m": 2}, "n": 10,
          "reward_cov": {"family": "ar", "rho": 0.9, "sigma2": 1.5}, "carryover_shift": 0.0}


def write_yaml(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


# ---------------------------------------------------------------- simulate


def test_simulate_is_deterministic(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", {**LINEAR, "seed": 7})
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["simulate", "--config", cfg, "--out", str(a)]) == 0
    assert main(["simulate", "--config", cfg, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert read_panel(a).n == 10
    assert "true ATE:" in capsys.readouterr().out


def test_simulate_rejects_bad_block_length(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", {**LINEAR, "T": 48, "design": {"kind": "switchback", "m": 5}})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "x.csv"), "--seed", "1"]) == EXIT_CONFIG
    assert "m must divide T" in capsys.readouterr().err


def test_simulate_notes_default_shift_and_seed(tmp_path, capsys):
    doc = {k: v for k, v in LINEAR.items() if k != "carryover_shift"}
    cfg = write_yaml(tmp_path / "c.yaml", doc)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "x.csv")]) == 0
    err = capsys.readouterr().err
    assert "carryover_shift not set; using 0" in err
    assert "no seed given; using seed" in err


def test_simulate_rejects_unknown_keys(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", {**LINEAR, "carryover_shfit": 0.5})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "x.csv"), "--seed", "1"]) == EXIT_CONFIG
    assert "unknown config keys" in capsys.readouterr().err


def test_simulate_bootstrap_dgp(tmp_path):
    cfg = write_yaml(tmp_path / "c.yaml", {"dgp": "bootstrap", "T": 6, "d": 2, "n": 8, "source_days": 20,
                                            "design": {"kind": "alternating_day"}, "seed": 3})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "x.csv")]) == 0


# ---------------------------------------------------------------- sweep

SWEEP = {"T": 6, "d": 2, "designs": [1, 3, 6], "estimators": ["ols", "lstd"], "ns": [12], "B": 3,
         "reward_cov": {"family": "ar", "rho": 0.5, "sigma2": 1.0}, "carryover_shift": 0.0}


def test_sweep_resume_gives_identical_csv(tmp_path):
    cfg = write_yaml(tmp_path / "s.yaml", SWEEP)
    out = tmp_path / "run"
    assert main(["sweep", "--config", cfg, "--out", str(out), "--seed", "4", "--quiet"]) == 0
    first = (out / "results.csv").read_text()
    # simulate an interruption: drop the results and one finished cell
    (out / "results.csv").unlink()
    (out / "cells" / "m3_n12.json").unlink()
    assert main(["sweep", "--config", cfg, "--out", str(out), "--seed", "4", "--quiet"]) == 0
    assert (out / "results.csv").read_text() == first


def test_sweep_manifest_reproduces(tmp_path):
    cfg = write_yaml(tmp_path / "s.yaml", SWEEP)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "9", "--quiet"]) == 0
    man = str(tmp_path / "a" / "manifest.json")
    assert main(["sweep", "--manifest", man, "--out", str(tmp_path / "b"), "--quiet", "--jobs", "2"]) == 0
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    assert json.loads(open(man).read())["seed"] == 9


def test_sweep_exit_code_on_exclusions(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "s.yaml", {**SWEEP, "d": 3, "ns": [4]})
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "r"), "--seed", "1", "--quiet"]) == EXIT_FAILURES
    assert "excluded" in capsys.readouterr().err


def test_sweep_full_grid_smoke(tmp_path):
    doc = {"T": 48, "d": 3, "designs": [1, 3, 6, 12, 24, 48], "ns": list(range(16, 53, 4)), "B": 2,
           "estimators": ["ols", "lstd", "drl"], "carryover_shift": 0.0,
           "reward_cov": {"family": "ar", "rho": 0.9, "sigma2": 1.5}}
    cfg = write_yaml(tmp_path / "grid.yaml", doc)
    start = time.perf_counter()
    code = main(["sweep", "--config", cfg, "--out", str(tmp_path / "g"), "--seed", "0", "--quiet"])
    elapsed = time.perf_counter() - start
    assert elapsed < 60
    rows = read_csv((tmp_path / "g" / "results.csv").read_text())
    cells = {(r["design_m"], r["estimator"], r["n"]) for r in rows}
    assert len(cells) == 6 * 3 * 10
    n_fail = json.loads((tmp_path / "g" / "manifest.json").read_text())["n_failures"]
    assert code == (0 if n_fail == 0 else EXIT_FAILURES)


# ---------------------------------------------------------------- theory


def test_theory_exchangeable_constant_for_even_block_counts(capsys):
    assert main(["theory", "--family", "exchangeable", "--rho", "0.3", "--sigma2", "2", "--T", "48",
                 "--m", "1,2,3,4,6,8,12,24"]) == 0
    rows = read_csv(capsys.readouterr().out)
    assert all(float(r["autocorr_term"]) == pytest.approx(2.4) for r in rows)


def test_theory_uncorrelated_zero_and_flags(capsys):
    assert main(["theory", "--family", "uncorrelated", "--T", "12", "--m", "1,5,12"]) == 0
    rows = read_csv(capsys.readouterr().out)
    assert float(rows[0]["autocorr_term"]) == 0.0 and float(rows[2]["autocorr_term"]) == 0.0
    assert rows[1]["flag"] == "m does not divide T"


def test_theory_ar_decreasing(capsys):
    assert main(["theory", "--family", "ar", "--rho", "0.9", "--T", "48"]) == 0
    vals = [float(r["autocorr_term"]) for r in read_csv(capsys.readouterr().out)]
    assert len(vals) == 10 and all(a > b for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------- advise and residuals


def test_advise_examples(capsys):
    assert main(["advise", "--carryover", "weak", "--residuals", "positive"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "SB, m=1"
    assert main(["advise", "--carryover", "strong"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "AD"
    assert main(["advise", "--markov-violated"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "re-discretize"


def test_advise_missing_inputs_prints_usage(capsys):
    assert main(["advise"]) == EXIT_CONFIG
    assert "usage" in capsys.readouterr().err
    assert main(["advise", "--carryover", "weak"]) == EXIT_CONFIG


def test_advise_and_residuals_from_panel(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", {**LINEAR, "n": 200, "seed": 2})
    panel = str(tmp_path / "p.csv")
    main(["simulate", "--config", cfg, "--out", panel])
    capsys.readouterr()
    assert main(["advise", "--carryover", "0.0", "--panel", panel]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("mean off-diagonal residual correlation:")
    assert lines[1] == "SB, m=1"
    out = tmp_path / "C.csv"
    assert main(["residuals", "--panel", panel, "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == [f"t{t}" for t in range(1, 7)] and len(rows) == 7


def test_ci_command(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", {**LINEAR, "seed": 1, "n": 20})
    assert main(["ci", "--config", cfg, "--m", "6", "--outer", "3", "--B-boot", "20"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["m"] == 6 and doc["outer_reps"] == 3 and 0 <= doc["coverage"] <= 1


@pytest.mark.skipif(shutil.which("switchback") is None, reason="console script not installed")
def test_console_script():
    out = subprocess.run(["switchback", "--version"], capture_output=True, text=True, check=True)
    assert out.stdout.strip() == f"switchback {__version__}"
