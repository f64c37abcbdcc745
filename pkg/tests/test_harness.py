from __future__ import annotations

import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from switchback import ConfigError, DesignSpec, ErrorCovSpec, EstimationError, Panel
from switchback.harness import (
    CSV_COLUMNS,
    ExperimentConfig,
    aggregate_metrics,
    bootstrap_ci,
    mean_offdiag_correlation,
    residual_correlation,
    run_experiment,
    write_outputs,
)

from conftest import make_panel, make_params

SMALL = dict(T=6, d=2, designs=(1, 3, 6), estimators=("ols", "lstd", "drl", "msis", "burnin"),
             ns=(12,), B=3, seed=5, reward_cov=ErrorCovSpec.autoregressive(0.5, 1.0))


# ---------------------------------------------------------------- metrics


def test_aggregate_metrics_example():
    m = aggregate_metrics([1.0, 2.0, 3.0], 2.0)
    assert m["bias"] == 0.0
    assert m["mse"] == pytest.approx(2 / 3)
    assert m["rmse"] == pytest.approx(math.sqrt(2 / 3))
    assert m["sd"] == pytest.approx(1.0)
    assert m["log_mse"] == pytest.approx(math.log(2 / 3))


def test_aggregate_metrics_per_replication_truth():
    m = aggregate_metrics([1.0, 3.0], [0.0, 2.0])
    assert m["bias"] == 1.0 and m["rmse"] == 1.0 and m["sd"] == 0.0


def test_aggregate_metrics_degenerate():
    m = aggregate_metrics([2.0, 2.0], 2.0)
    assert m["rmse"] == 0.0 and math.isnan(m["log_mse"])
    assert math.isnan(aggregate_metrics([1.0], 0.0)["sd"])
    with pytest.raises(ValueError):
        aggregate_metrics([], 0.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40), st.floats(-10, 10))
def test_rmse_bias_sd_identity(est, truth):
    m = aggregate_metrics(est, truth)
    B = len(est)
    assert m["rmse"] ** 2 == pytest.approx(m["bias"] ** 2 + m["sd"] ** 2 * (B - 1) / B, rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------- config


def test_config_roundtrip_and_validation():
    cfg = ExperimentConfig(**SMALL)
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError, match="unknown config keys"):
        ExperimentConfig.from_dict({"Tee": 5})
    with pytest.raises(ConfigError, match="m must divide T"):
        ExperimentConfig(T=48, designs=(5,))
    with pytest.raises(ConfigError):
        ExperimentConfig(dgp="nonlinear")
    with pytest.raises(ConfigError):
        ExperimentConfig(estimators=("nope",))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"reward_cov": {"family": "ar", "phi": 1}})


# ---------------------------------------------------------------- runner


def _csv(report):
    return list(csv.DictReader(io.StringIO(report.to_csv())))


def test_run_experiment_reproducible_and_columns():
    cfg = ExperimentConfig(**{**SMALL, "B": 1})
    a, b = run_experiment(cfg).to_csv(), run_experiment(cfg).to_csv()
    assert a == b
    assert a.splitlines()[0].split(",") == list(CSV_COLUMNS)
    rows = _csv(run_experiment(cfg))
    assert {r["metric"] for r in rows} == {"n_ok", "n_failed", "rmse", "bias", "sd", "log_mse"}
    assert {int(r["design_m"]) for r in rows} == {1, 3, 6}


def test_run_experiment_parallel_matches_serial():
    cfg = ExperimentConfig(**SMALL)
    assert run_experiment(cfg, jobs=2).to_csv() == run_experiment(cfg, jobs=1).to_csv()


def test_metrics_match_raw_estimates():
    cfg = ExperimentConfig(**SMALL)
    rep = run_experiment(cfg)
    est = rep.estimates[(3, "ols", 12)]
    m = rep.metrics(3, "ols", 12)
    assert m["bias"] == pytest.approx(np.mean(est - rep.truths))
    bias_row = next(r for r in _csv(rep) if r["design_m"] == "3" and r["estimator"] == "ols" and r["metric"] == "bias")
    assert float(bias_row["mc_se"]) == pytest.approx(np.std(est - rep.truths, ddof=1) / math.sqrt(3))


def test_fixed_coefficients_share_truth():
    rep = run_experiment(ExperimentConfig(**{**SMALL, "redraw": False}))
    assert np.all(rep.truths == rep.truths[0])


def test_failed_replications_are_excluded_and_reported(tmp_path):
    cfg = ExperimentConfig(**{**SMALL, "d": 3, "ns": (4,), "estimators": ("ols", "lstd")})
    rep = run_experiment(cfg)
    assert rep.n_failures > 0
    rows = _csv(rep)
    failed = [r for r in rows if r["metric"] == "n_failed" and r["estimator"] == "ols"]
    assert all(float(r["value"]) == 3 for r in failed)
    assert all(math.isnan(float(r["value"])) for r in rows if r["estimator"] == "ols" and r["metric"] == "rmse")
    with pytest.raises(EstimationError):
        rep.metrics(1, "ols", 4)
    _, man = write_outputs(rep, str(tmp_path))
    doc = json.loads(open(man).read())
    assert doc["n_failures"] == rep.n_failures
    assert any("EstimationError" in msg for msgs in doc["failures"].values() for msg in msgs)


def test_resume_skips_finished_cells(tmp_path):
    cfg = ExperimentConfig(**SMALL)
    first = run_experiment(cfg, out_dir=str(tmp_path)).to_csv()
    seen = []
    again = run_experiment(cfg, out_dir=str(tmp_path), progress=seen.append).to_csv()
    assert again == first
    assert seen and all(s.endswith("cached") for s in seen)
    with pytest.raises(ConfigError, match="different config"):
        run_experiment(ExperimentConfig(**{**SMALL, "seed": 6}), out_dir=str(tmp_path))


def test_write_outputs_manifest(tmp_path):
    rep = run_experiment(ExperimentConfig(**{**SMALL, "B": 1}))
    csv_path, man_path = write_outputs(rep, str(tmp_path))
    assert open(csv_path).read() == rep.to_csv()
    doc = json.loads(open(man_path).read())
    assert doc["seed"] == 5 and doc["config"]["T"] == 6
    assert sorted(map(tuple, doc["completed_cells"])) == [(1, 12), (3, 12), (6, 12)]
    for key in ("version", "numpy", "python", "timestamp"):
        assert key in doc


def test_bootstrap_dgp_runs():
    cfg = ExperimentConfig(dgp="bootstrap", T=6, d=2, designs=(1, 6), estimators=("ols",), ns=(20,), B=2,
                           source_days=30)
    rep = run_experiment(cfg)
    assert np.all(rep.truths == rep.truths[0]) and rep.n_failures == 0


# ---------------------------------------------------------------- residual diagnostics


def test_residual_correlation_tracks_error_correlation():
    p = make_params(T=5, d=2, rho=0.8, sigma2=1.0)
    panel, _ = make_panel(p, n=5000)
    C = residual_correlation(panel)
    np.testing.assert_allclose(np.diag(C), 1.0)
    np.testing.assert_allclose(C, C.T)
    # OLS conditions on the state, so residuals inherit the AR error correlation 0.8^lag
    for lag in (1, 2, 3):
        assert mean_offdiag_correlation(C, lag=lag) == pytest.approx(0.8**lag, abs=0.03)
    q = make_params(T=5, d=2, rho=0.0, sigma2=1.0)
    assert abs(mean_offdiag_correlation(residual_correlation(make_panel(q, n=5000)[0]))) < 0.05


def test_residual_correlation_constant_column():
    panel, _ = make_panel(make_params(T=4, d=2), n=30)
    R = panel.rewards.copy()
    R[:, 2] = 1.0 + 0.5 * panel.actions[:, 2]
    C = residual_correlation(Panel(panel.states, panel.actions, R))
    assert C[2, 2] == 1.0
    assert np.isnan(C[2, [0, 1, 3]]).all() and np.isnan(C[[0, 1, 3], 2]).all()
    assert np.isfinite(C[0, 1])


def test_mean_offdiag_correlation_example():
    C = np.array([[1.0, 0.2, 0.4], [0.2, 1.0, np.nan], [0.4, np.nan, 1.0]])
    assert mean_offdiag_correlation(C) == pytest.approx(0.3)
    assert mean_offdiag_correlation(C, lag=1) == pytest.approx(0.2)
    assert math.isnan(mean_offdiag_correlation(np.eye(1)))


# ---------------------------------------------------------------- bootstrap intervals


def test_bootstrap_ci_light():
    p = make_params(T=4, d=1, shift=0.3, rho=0.0)
    d = DesignSpec.switchback(1, 4)
    rep = bootstrap_ci(p, d, "ols", n=40, B_boot=100, outer=60, seed=1)
    assert 0.8 <= rep.coverage <= 1.0
    assert np.all(rep.intervals[:, 0] <= rep.intervals[:, 1])
    assert rep.mean_width > 0
    assert set(rep.to_dict()) >= {"coverage", "coverage_se", "mean_width", "truth", "n_redrawn", "level"}
    again = bootstrap_ci(p, d, "ols", n=40, B_boot=100, outer=60, seed=1, jobs=2)
    np.testing.assert_array_equal(again.intervals, rep.intervals)


def test_bootstrap_ci_generic_estimator_and_level_check():
    p = make_params(T=4, d=1, shift=0.3)
    d = DesignSpec.switchback(2, 4)
    rep = bootstrap_ci(p, d, "lstd", n=30, B_boot=30, outer=4, seed=2)
    assert rep.intervals.shape == (4, 2)
    with pytest.raises(ConfigError):
        bootstrap_ci(p, d, "ols", n=30, level=1.5)
