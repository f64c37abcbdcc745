"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline;
they are also repeated in the terminal summary.
"""

from __future__ import annotations

import time

import numpy as np
import pytest
import yaml

from switchback import (
    DesignSpec,
    ErrorCovSpec,
    draw_params,
    fit_bootstrap_env,
    generate_actions,
    simulate,
    true_ate_linear,
)
from switchback.cli import main
from switchback.estimators import ate_ols, drl_equals_lstd_check, estimate_drl, fit_ols
from switchback.harness import ExperimentConfig, bootstrap_ci, run_experiment, substream
from switchback.simulate import synthetic_aa_panel
from switchback.theory import (
    autocorr_term,
    brute_force_ate_discrete,
    cor1_closed_form,
    cor2_closed_form,
    cor3_closed_form,
    discretize_linear_dgp,
    toy_plugin_mse_diff_mc,
    toy_signed_sum_diff,
)

from conftest import noiseless, record_criterion

pytestmark = pytest.mark.slow

AR09 = ErrorCovSpec.autoregressive(0.9, 1.5)
MS = (1, 6, 48)


@pytest.fixture(scope="module")
def sweep_no_shift():
    cfg = ExperimentConfig(dgp="linear", T=48, d=3, designs=MS,
                           estimators=("ols", "lstd", "drl", "msis", "burnin"),
                           ns=(48,), reward_cov=AR09, carryover_shift=0.0, B=200, seed=2024)
    start = time.perf_counter()
    report = run_experiment(cfg)
    return report, time.perf_counter() - start


def _rmse(report, m, est):
    return report.metrics(m, est, 48)["rmse"]


def _log_mse(report, m, est):
    est_ = report.estimates[(m, est, 48)]
    ok = np.isfinite(est_)
    if not ok.any():
        return float("nan")
    return float(np.log(np.mean((est_[ok] - report.truths[ok]) ** 2)))


# ---------------------------------------------------------------- 1


def test_criterion_1_theory_sweep():
    start = time.perf_counter()
    worst = 0.0
    exact_ok = True
    for T in (12, 24, 48):
        specs = [ErrorCovSpec.autoregressive(0.5, 1.0), ErrorCovSpec.autoregressive(-0.4, 2.0),
                 ErrorCovSpec.exchangeable(0.3, 1.5), ErrorCovSpec.exchangeable(-0.5 / (T - 1), 1.0),
                 ErrorCovSpec.uncorrelated(1.0)] + [ErrorCovSpec.moving_average(K, 1.2) for K in (1, 2, 3, 4)]
        for spec in specs:
            for m in (m for m in range(1, T + 1) if T % m == 0):
                term = autocorr_term(spec, T, m)
                worst = max(worst, abs(term - toy_signed_sum_diff(spec, T, m)))
                if spec.family == "exchangeable":
                    exact_ok &= abs(term - cor3_closed_form(spec.rho, spec.sigma2, T, m)) <= 1e-12
                if spec.family == "ma" and m >= spec.K:
                    exact_ok &= abs(term - cor2_closed_form(spec.K, spec.sigma2, T, m)) <= 1e-12
    ratios = [autocorr_term(ErrorCovSpec.autoregressive(0.5, 1.0), 480, m) / cor1_closed_form(0.5, 1.0, 480, m)
              for m in (1, 2, 4)]
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and exact_ok and all(abs(r - 1) <= 0.05 for r in ratios) and elapsed < 10
    detail = (f"max |term - signed sum| = {worst:.1e}, closed forms exact = {exact_ok}, "
              f"T=480 ratios = {[round(r, 4) for r in ratios]}, {elapsed:.1f}s")
    assert record_criterion(1, ok, detail), detail


# ---------------------------------------------------------------- 2


def test_criterion_2_monte_carlo_bridge():
    spec, T, n = ErrorCovSpec.autoregressive(0.7, 1.5), 24, 8
    start = time.perf_counter()
    diff, se = toy_plugin_mse_diff_mc(spec, T, 1, n, reps=100_000, seed=7)
    elapsed = time.perf_counter() - start
    target = autocorr_term(spec, T, 1) / n
    z = abs(diff - target) / se
    ok = z <= 3 and elapsed < 120
    detail = f"MC {diff:.5f} vs term/n {target:.5f} (SE {se:.5f}, z = {z:.2f}), {elapsed:.1f}s"
    assert record_criterion(2, ok, detail), detail


# ---------------------------------------------------------------- 3


def test_criterion_3_rmse_decreases_with_switching(sweep_no_shift):
    report, elapsed = sweep_no_shift
    parts, ok = [], elapsed < 600
    for est in ("ols", "lstd", "drl"):
        r = [_rmse(report, m, est) for m in MS]
        good = r[0] <= r[1] <= r[2] and r[0] < r[2]
        ok &= good
        parts.append(f"{est} {'ok' if good else 'NOT ordered'} ({', '.join(f'm={m}: {v:.4f}' for m, v in zip(MS, r))})")
    detail = "; ".join(parts) + f"; sweep {elapsed:.0f}s"
    assert record_criterion(3, ok, detail), detail


# ---------------------------------------------------------------- 4


def test_criterion_4_carryover_reverses_ordering(sweep_no_shift):
    report0, _ = sweep_no_shift
    cfg = ExperimentConfig(dgp="linear", T=48, d=3, designs=(1, 48), estimators=("ols",), ns=(48,),
                           reward_cov=AR09, carryover_shift=0.5, B=200, seed=2024)
    report5 = run_experiment(cfg)
    a0, b0 = _rmse(report0, 1, "ols"), _rmse(report0, 48, "ols")
    a5, b5 = _rmse(report5, 1, "ols"), _rmse(report5, 48, "ols")
    ok = (a0 < b0) and (a5 > b5)
    detail = f"shift 0: m=1 {a0:.4f} vs m=48 {b0:.4f}; shift 0.5: m=1 {a5:.4f} vs m=48 {b5:.4f}"
    assert record_criterion(4, ok, detail), detail


# ---------------------------------------------------------------- 5


def test_criterion_5_lstd_drl_identity():
    gaps = []
    for k in range(20):
        p = draw_params(48, 3, substream(55, k, 0), reward_cov=AR09, carryover_shift=0.3)
        m = (1, 3, 6, 12, 24, 48)[k % 6]
        design = DesignSpec.alternating_day(48) if m == 48 else DesignSpec.switchback(m, 48)
        panel = simulate(p, generate_actions(design, 100, substream(55, k, 1)), substream(55, k, 2))
        gaps.append(drl_equals_lstd_check(panel).gap)
    ok = max(gaps) <= 1e-8
    detail = f"max gap over 20 panels = {max(gaps):.2e}"
    assert record_criterion(5, ok, detail), detail


# ---------------------------------------------------------------- 6


def test_criterion_6_double_robustness():
    p = draw_params(48, 3, substream(66, 0), reward_cov=AR09)
    p = p.replace(Gamma=np.zeros_like(p.Gamma))
    truth = true_ate_linear(p)
    design = DesignSpec.switchback(1, 48)
    ns, B = (1000, 2000, 4000, 8000), 200
    variants = {"ratio=1": dict(ratio="one"), "value=0": dict(value="zero")}
    errors = {v: np.empty((len(ns), B)) for v in variants}
    for j, n in enumerate(ns):
        for r in range(B):
            panel = simulate(p, generate_actions(design, n, substream(66, r, 1, n)), substream(66, r, 2, n))
            for v, kw in variants.items():
                est = estimate_drl(panel, design, 2, seed=substream(66, r, 3, n), **kw)
                errors[v][j, r] = est - truth
    ok, parts = True, []
    for v in variants:
        bias = np.abs(errors[v].mean(axis=1))
        se = errors[v].std(axis=1, ddof=1) / np.sqrt(B)
        ratios = bias[1:] / bias[:-1]
        good = bool(np.all((ratios >= 0.35) & (ratios <= 0.65)))
        ok &= good
        parts.append(f"{v}: |bias| {np.array2string(bias, precision=5)} (MC SE {np.array2string(se, precision=5)}), "
                     f"ratios {np.array2string(ratios, precision=2)}")
    detail = "; ".join(parts)
    assert record_criterion(6, ok, detail), detail


# ---------------------------------------------------------------- 7


def test_criterion_7_oracle_recovery():
    worst = 0.0
    for k in range(5):
        p = noiseless(draw_params(48, 3, substream(77, k), carryover_shift=0.4))
        # scaled orthogonal transitions keep noiseless states from collapsing
        Q = np.linalg.qr(substream(77, k, 1).normal(size=(47, 3, 3)))[0]
        p = p.replace(Phi=0.95 * Q)
        design = DesignSpec.switchback(1, 48)
        panel = simulate(p, generate_actions(design, 20, substream(77, k, 2)), substream(77, k, 3))
        worst = max(worst, abs(ate_ols(fit_ols(panel)) - true_ate_linear(p)))
    q = draw_params(12, 1, substream(77, 99), carryover_shift=0.5)
    disc_err = abs(brute_force_ate_discrete(discretize_linear_dgp(q)) - true_ate_linear(q))
    ok = worst <= 1e-8 and disc_err <= 1e-2
    detail = f"noiseless OLS max error {worst:.1e}; discretised oracle error {disc_err:.1e}"
    assert record_criterion(7, ok, detail), detail


# ---------------------------------------------------------------- 8


def test_criterion_8_rl_beats_baselines(sweep_no_shift):
    report, _ = sweep_no_shift
    ok, parts = True, []
    for m in (1, 6):
        rl = {e: _log_mse(report, m, e) for e in ("drl", "lstd")}
        base = {e: _log_mse(report, m, e) for e in ("burnin", "msis")}
        good = all(np.isfinite(v) for v in base.values()) and max(rl.values()) < min(base.values())
        ok &= good
        parts.append(f"m={m} {'ok' if good else 'NOT below'} ("
                     + ", ".join(f"{k} {v:.3f}" for k, v in {**rl, **base}.items()) + ")")
    detail = "log-MSE " + "; ".join(parts)
    assert record_criterion(8, ok, detail), detail


# ---------------------------------------------------------------- 9


def test_criterion_9_bootstrap_intervals():
    env = fit_bootstrap_env(synthetic_aa_panel(40, 24, 2, seed=substream(99, 0)), 2.0, 2.0)
    reps = {m: bootstrap_ci(env, DesignSpec.alternating_day(24) if m == 24 else DesignSpec.switchback(m, 24),
                            "ols", n=40, B_boot=400, outer=200, seed=99)
            for m in (1, 24)}
    cov_ok = all(r.coverage >= 0.92 for r in reps.values())
    width_ok = reps[1].mean_width < reps[24].mean_width
    ok = cov_ok and width_ok
    detail = ", ".join(f"m={m}: coverage {r.coverage:.3f} width {r.mean_width:.4f}" for m, r in reps.items())
    assert record_criterion(9, ok, detail), detail


# ---------------------------------------------------------------- 10


def test_criterion_10_determinism_across_workers(tmp_path):
    doc = {"T": 12, "d": 2, "designs": [1, 3, 12], "ns": [16, 24], "B": 16,
           "estimators": ["ols", "lstd", "mlstd", "drl", "msis", "burnin", "sis"],
           "reward_cov": {"family": "ar", "rho": 0.9, "sigma2": 1.5}, "carryover_shift": 0.2}
    cfg = tmp_path / "det.yaml"
    cfg.write_text(yaml.safe_dump(doc))
    base = tmp_path / "w1"
    main(["sweep", "--config", str(cfg), "--out", str(base), "--seed", "10", "--quiet", "--jobs", "1"])
    manifest = str(base / "manifest.json")
    reference = (base / "results.csv").read_bytes()
    same = {}
    for jobs in (4, 16):
        out = tmp_path / f"w{jobs}"
        main(["sweep", "--manifest", manifest, "--out", str(out), "--quiet", "--jobs", str(jobs)])
        same[jobs] = (out / "results.csv").read_bytes() == reference
    ok = all(same.values())
    detail = f"CSV identical to the 1-worker run: {same}"
    assert record_criterion(10, ok, detail), detail
