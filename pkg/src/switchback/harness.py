"""Monte Carlo experiment runner, metrics, residual diagnostics and bootstrap CIs.

Randomness is organised by ``SeedSequence`` spawn keys so that every
replication owns independent substreams:

* ``(rep, 0)``: coefficient draw
* ``(rep, 1, n, m, family)``: actions
* ``(rep, 2, n)``: simulation noise, shared by every design of the replication
* ``(rep, 3, n, m, k)``: estimator ``k`` (fold splits)
* ``(rep, 4)``: Monte Carlo truth

Results never depend on how replications are scheduled across workers.
"""

from __future__ import annotations

import csv
import io
import json
import os
import platform
import warnings
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from typing import Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from . import __version__
from .core import (
    BERNOULLI,
    ConfigError,
    DesignSpec,
    ErrorCovSpec,
    EstimationError,
    LinearDgpParams,
    Panel,
    generate_actions,
)
from .estimators import DESIGN_FAMILY, ESTIMATORS, fit_ols, get_estimator, ols_ate_batch
from .simulate import (
    BootstrapEnv,
    draw_params,
    fit_bootstrap_env,
    simulate,
    simulate_bootstrap,
    synthetic_aa_panel,
    true_ate_linear,
    true_ate_mc,
)

__all__ = [
    "ExperimentConfig",
    "EstimateReport",
    "run_experiment",
    "aggregate_metrics",
    "residual_correlation",
    "mean_offdiag_correlation",
    "bootstrap_ci",
    "CiReport",
    "CSV_COLUMNS",
    "substream",
    "cov_spec_from_dict",
    "write_outputs",
]

DGPS = ("linear", "nonlinear", "bootstrap")
CSV_COLUMNS = ("dgp", "design_m", "estimator", "n", "rho_or_family", "metric", "value", "mc_se")
# failures caught per replication; anything else is a bug and propagates
RECOVERABLE = (EstimationError, np.linalg.LinAlgError)


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the spawn key ``key`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


def cov_spec_from_dict(d: dict) -> ErrorCovSpec:
    """Build an :class:`ErrorCovSpec` from a config mapping (unknown keys rejected)."""
    d = dict(d)
    allowed = {"family", "sigma2", "rho", "K"}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown reward_cov keys: {sorted(unknown)}")
    if "family" not in d:
        raise ConfigError("reward_cov needs a family")
    return ErrorCovSpec(d["family"], float(d.get("sigma2", 1.0)), float(d.get("rho", 0.0)), int(d.get("K", 1)))


@dataclass(frozen=True)
class ExperimentConfig:
    """One Monte Carlo sweep over designs, estimators and sample sizes.

    ``designs`` lists block lengths ``m``; ``m == T`` is the alternating-day
    design. Baseline estimators run on regular Bernoulli panels with the
    same ``m``. ``redraw=True`` draws fresh coefficients per replication;
    ``False`` keeps one draw for the whole sweep. ``truth`` is
    ``"closed_form"`` (linear and bootstrap environments) or ``"mc"``.
    The bootstrap environment is fitted to a synthetic A/A panel of
    ``source_days`` days unless ``source_path`` names a panel file.
    ``drl_folds`` is the number of cross-fitting folds of the DRL estimator.
    """

    dgp: str = "linear"
    T: int = 48
    d: int = 3
    designs: Tuple[int, ...] = (1, 6, 48)
    estimators: Tuple[str, ...] = ("ols", "lstd", "drl")
    ns: Tuple[int, ...] = (48,)
    reward_cov: ErrorCovSpec = field(default_factory=lambda: ErrorCovSpec.autoregressive(0.9, 1.5))
    carryover_shift: float = 0.0
    B: int = 200
    seed: int = 0
    truth: str = "closed_form"
    truth_reps: int = 100_000
    redraw: bool = True
    source_days: int = 40
    source_path: Optional[str] = None
    delta1: float = 2.0
    delta2: float = 2.0
    drl_folds: int = 2

    def __post_init__(self):
        object.__setattr__(self, "designs", tuple(int(m) for m in self.designs))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "ns", tuple(int(n) for n in self.ns))
        if self.dgp not in DGPS:
            raise ConfigError(f"dgp must be one of {DGPS}, got {self.dgp!r}")
        if self.B < 1:
            raise ConfigError("B must be >= 1")
        for m in self.designs:
            DesignSpec.switchback(m, self.T)
        for e in self.estimators:
            get_estimator(e)
        if any(n < 1 for n in self.ns):
            raise ConfigError("every n must be >= 1")
        if self.truth not in ("closed_form", "mc"):
            raise ConfigError("truth must be 'closed_form' or 'mc'")
        if self.truth == "closed_form" and self.dgp == "nonlinear":
            raise ConfigError("the nonlinear model has no closed-form ATE; use truth: mc")
        if self.drl_folds < 2:
            raise ConfigError("drl_folds must be >= 2")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["designs"] = list(self.designs)
        out["estimators"] = list(self.estimators)
        out["ns"] = list(self.ns)
        out["reward_cov"] = self.reward_cov.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "reward_cov" in d and isinstance(d["reward_cov"], dict):
            d["reward_cov"] = cov_spec_from_dict(d["reward_cov"])
        return cls(**d)


# ---------------------------------------------------------------- metrics


def aggregate_metrics(estimates, truth) -> Dict[str, float]:
    """Bias, RMSE, SD and log-MSE of estimates against ``truth``.

    ``truth`` may be a scalar or one value per estimate (coefficient redraw).
    ``sd`` is the sample standard deviation (``ddof=1``) of the errors, so
    ``rmse^2 = bias^2 + sd^2 (B-1)/B``. ``log_mse`` is NaN when the MSE is 0.
    """
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise ValueError("aggregate_metrics needs at least one estimate")
    err = est - np.broadcast_to(np.asarray(truth, dtype=float), est.shape)
    mse = float(np.mean(err**2))
    B = err.size
    sd = float(np.std(err, ddof=1)) if B > 1 else float("nan")
    return {
        "rmse": float(np.sqrt(mse)),
        "bias": float(np.mean(err)),
        "sd": sd,
        "log_mse": float(np.log(mse)) if mse > 0 else float("nan"),
        "mse": mse,
    }


def _metric_rows(est: np.ndarray, truth: np.ndarray) -> List[Tuple[str, float, float]]:
    ok = np.isfinite(est)
    n_ok = int(ok.sum())
    rows = [("n_ok", float(n_ok), float("nan")), ("n_failed", float(est.size - n_ok), float("nan"))]
    if n_ok == 0:
        return rows + [(k, float("nan"), float("nan")) for k in ("rmse", "bias", "sd", "log_mse")]
    m = aggregate_metrics(est[ok], truth[ok])
    err = est[ok] - truth[ok]
    root = np.sqrt(n_ok)
    se_mse = float(np.std(err**2, ddof=1) / root) if n_ok > 1 else float("nan")
    rows += [
        ("rmse", m["rmse"], se_mse / (2 * m["rmse"]) if m["rmse"] > 0 else float("nan")),
        ("bias", m["bias"], m["sd"] / root),
        ("sd", m["sd"], m["sd"] / np.sqrt(2 * (n_ok - 1)) if n_ok > 1 else float("nan")),
        ("log_mse", m["log_mse"], se_mse / m["mse"] if m["mse"] > 0 else float("nan")),
    ]
    return rows


# ---------------------------------------------------------------- experiment runner


@dataclass
class EstimateReport:
    """Per-replication estimates keyed by ``(m, estimator, n)`` plus truths.

    ``errors`` holds the failure message of every excluded replication.
    """

    config: ExperimentConfig
    truths: np.ndarray
    estimates: Dict[Tuple[int, str, int], np.ndarray]
    errors: Dict[Tuple[int, str, int], List[Optional[str]]]

    def metrics(self, m: int, estimator: str, n: int) -> Dict[str, float]:
        est = self.estimates[(m, estimator, n)]
        ok = np.isfinite(est)
        if not ok.any():
            raise EstimationError(f"every replication failed for m={m}, {estimator}, n={n}")
        out = aggregate_metrics(est[ok], self.truths[ok])
        out["n_failed"] = int((~ok).sum())
        return out

    @property
    def n_failures(self) -> int:
        return int(sum(np.sum(~np.isfinite(v)) for v in self.estimates.values()))

    def rows(self) -> List[dict]:
        cfg = self.config
        out = []
        for m in cfg.designs:
            for name in cfg.estimators:
                for n in cfg.ns:
                    for metric, value, se in _metric_rows(self.estimates[(m, name, n)], self.truths):
                        out.append({
                            "dgp": cfg.dgp, "design_m": m, "estimator": name, "n": n,
                            "rho_or_family": cfg.reward_cov.label(), "metric": metric,
                            "value": value, "mc_se": se,
                        })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows():
            w.writerow([r["dgp"], r["design_m"], r["estimator"], r["n"], r["rho_or_family"],
                        r["metric"], repr(float(r["value"])), repr(float(r["mc_se"]))])
        return buf.getvalue()


def _environment(cfg: ExperimentConfig):
    """Fixed environment shared by all replications (bootstrap env or fixed params)."""
    if cfg.dgp == "bootstrap":
        if cfg.source_path:
            from .simulate import read_panel

            source = read_panel(cfg.source_path)
        else:
            source = synthetic_aa_panel(cfg.source_days, cfg.T, cfg.d, substream(cfg.seed, 2**31 - 1),
                                        reward_cov=cfg.reward_cov)
        if source.T != cfg.T or source.d != cfg.d:
            raise ConfigError("bootstrap source panel does not match T and d of the config")
        return fit_bootstrap_env(source, cfg.delta1, cfg.delta2)
    if not cfg.redraw:
        return _draw(cfg, substream(cfg.seed, 2**31 - 2))
    return None


def _draw(cfg: ExperimentConfig, rng) -> LinearDgpParams:
    return draw_params(cfg.T, cfg.d, rng, reward_cov=cfg.reward_cov,
                       carryover_shift=cfg.carryover_shift, nonlinear=cfg.dgp == "nonlinear")


def _params_for(cfg: ExperimentConfig, env, rep: int):
    return env if env is not None else _draw(cfg, substream(cfg.seed, rep, 0))


def _truth(cfg: ExperimentConfig, env, rep: int) -> float:
    p = _params_for(cfg, env, rep)
    if cfg.truth == "mc":
        return true_ate_mc(p, cfg.truth_reps, substream(cfg.seed, rep, 4))[0]
    if isinstance(p, BootstrapEnv):
        return p.true_ate()
    return true_ate_linear(p)


def _design_for(name: str, m: int, T: int) -> DesignSpec:
    if DESIGN_FAMILY[name] == BERNOULLI:
        return DesignSpec.bernoulli(m, T)
    return DesignSpec.alternating_day(T) if m == T else DesignSpec.switchback(m, T)


def _panel(cfg: ExperimentConfig, params, design: DesignSpec, rep: int, n: int) -> Panel:
    family = 1 if design.kind == BERNOULLI else 0
    actions = generate_actions(design, n, substream(cfg.seed, rep, 1, n, design.m, family))
    noise = substream(cfg.seed, rep, 2, n)
    if isinstance(params, BootstrapEnv):
        return simulate_bootstrap(params, design, n, noise, actions=actions)
    return simulate(params, actions, noise)


def _run_rep(cfg: ExperimentConfig, env, rep: int, m: int, n: int):
    with threadpool_limits(1), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        params = _params_for(cfg, env, rep)
        panels = {}
        values, errors = [], []
        for k, name in enumerate(cfg.estimators):
            design = _design_for(name, m, cfg.T)
            if design.kind not in panels:
                panels[design.kind] = _panel(cfg, params, design, rep, n)
            try:
                kw = {"k_folds": cfg.drl_folds} if name == "drl" else {}
                v = float(ESTIMATORS[name](panels[design.kind], design, substream(cfg.seed, rep, 3, n, m, k), **kw))
                values.append(v)
                errors.append(None if np.isfinite(v) else "non-finite estimate")
            except RECOVERABLE as exc:
                values.append(float("nan"))
                errors.append(f"{type(exc).__name__}: {exc}")
        return values, errors


def _cell_path(out_dir: str, m: int, n: int) -> str:
    return os.path.join(out_dir, "cells", f"m{m}_n{n}.json")


def run_experiment(
    config: ExperimentConfig,
    jobs: int = 1,
    out_dir: Optional[str] = None,
    progress=None,
) -> EstimateReport:
    """Run every ``(m, n)`` cell of the sweep and collect the estimates.

    With ``out_dir`` each finished cell is stored under ``out_dir/cells`` and
    skipped on a rerun with the same config. ``progress`` is an optional
    callable receiving a status string per cell.
    """
    cfg = config
    env = _environment(cfg)
    par = Parallel(n_jobs=jobs, backend="loky") if jobs != 1 else None

    def pmap(fn, items):
        if par is None:
            return [fn(*it) for it in items]
        return par(delayed(fn)(*it) for it in items)

    truths = np.asarray(pmap(_truth, [(cfg, env, r) for r in range(cfg.B)]), dtype=float)
    estimates, errors = {}, {}
    for m in cfg.designs:
        for n in cfg.ns:
            path = _cell_path(out_dir, m, n) if out_dir else None
            cell = _load_cell(path, cfg)
            if cell is None:
                res = pmap(_run_rep, [(cfg, env, r, m, n) for r in range(cfg.B)])
                cell = {
                    name: ([res[r][0][k] for r in range(cfg.B)], [res[r][1][k] for r in range(cfg.B)])
                    for k, name in enumerate(cfg.estimators)
                }
                if path:
                    _save_cell(path, cfg, cell)
                status = "done"
            else:
                status = "cached"
            for name in cfg.estimators:
                estimates[(m, name, n)] = np.asarray(cell[name][0], dtype=float)
                errors[(m, name, n)] = list(cell[name][1])
            if progress:
                progress(f"m={m} n={n}: {status}")
    return EstimateReport(cfg, truths, estimates, errors)


def _save_cell(path: str, cfg: ExperimentConfig, cell) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    doc = {"config": cfg.to_dict(), "results": {k: {"estimates": v[0], "errors": v[1]} for k, v in cell.items()}}
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def _load_cell(path: Optional[str], cfg: ExperimentConfig):
    if not path or not os.path.exists(path):
        return None
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("config") != json.loads(json.dumps(cfg.to_dict())):
        raise ConfigError(f"{path} was produced by a different config; use a fresh output directory")
    res = doc["results"]
    if set(res) != set(cfg.estimators):
        return None
    return {k: (v["estimates"], v["errors"]) for k, v in res.items()}


def write_outputs(report: EstimateReport, out_dir: str, extra: Optional[dict] = None) -> Tuple[str, str]:
    """Write ``results.csv`` and ``manifest.json`` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "results.csv")
    with open(csv_path, "w", newline="") as fh:
        fh.write(report.to_csv())
    cfg = report.config
    failures = {
        f"m={m},{name},n={n}": [f"rep {r}: {msg}" for r, msg in enumerate(msgs) if msg]
        for (m, name, n), msgs in report.errors.items()
        if any(msgs)
    }
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "completed_cells": [[m, n] for m in cfg.designs for n in cfg.ns],
        "outputs": {"csv": "results.csv"},
        "n_failures": report.n_failures,
        "failures": failures,
    }
    if extra:
        manifest.update(extra)
    man_path = os.path.join(out_dir, "manifest.json")
    with open(man_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return csv_path, man_path


# ---------------------------------------------------------------- residual diagnostics


def residual_correlation(panel: Panel) -> np.ndarray:
    """Cross-day correlation of the per-interval OLS reward residuals.

    Columns whose residuals have (numerically) zero variance get NaN
    off-diagonal entries; the diagonal is 1.
    """
    resid = fit_ols(panel).reward_resid
    centred = resid - resid.mean(axis=0)
    sd = np.sqrt(np.mean(centred**2, axis=0))
    scale = 1.0 + np.abs(panel.rewards).max(axis=0)
    live = sd > 1e-10 * scale
    safe = np.where(live, sd, 1.0)
    z = centred / safe
    C = z.T @ z / panel.n
    C[~live, :] = np.nan
    C[:, ~live] = np.nan
    np.fill_diagonal(C, 1.0)
    return C


def mean_offdiag_correlation(C: np.ndarray, lag: Optional[int] = None) -> float:
    """Mean of the defined off-diagonal entries, or of the ``lag``-th diagonal."""
    T = C.shape[0]
    if lag is not None:
        vals = np.diagonal(C, offset=lag)
    else:
        vals = C[~np.eye(T, dtype=bool)]
    vals = vals[np.isfinite(vals)]
    return float(vals.mean()) if vals.size else float("nan")


# ---------------------------------------------------------------- bootstrap CIs


@dataclass(frozen=True)
class CiReport:
    """Outer Monte Carlo summary of percentile bootstrap intervals."""

    coverage: float
    coverage_se: float
    mean_width: float
    truth: float
    intervals: np.ndarray
    estimates: np.ndarray
    n_redrawn: int
    level: float

    def to_dict(self) -> dict:
        return {
            "coverage": self.coverage,
            "coverage_se": self.coverage_se,
            "mean_width": self.mean_width,
            "truth": self.truth,
            "n_redrawn": self.n_redrawn,
            "level": self.level,
            "outer_reps": int(self.intervals.shape[0]),
        }


def _boot_estimates(panel: Panel, design, estimator: str, B_boot: int, rng, max_redraw: int):
    n = panel.n
    out = np.empty(0)
    redrawn = 0
    while out.size < B_boot:
        need = B_boot - out.size
        idx = rng.integers(n, size=(need, n))
        if estimator == "ols":
            vals, ok = ols_ate_batch(panel.states[idx], panel.actions[idx], panel.rewards[idx])
        else:
            fn = get_estimator(estimator)
            vals = np.empty(need)
            for b in range(need):
                try:
                    vals[b] = fn(panel.take(idx[b]), design, rng)
                except RECOVERABLE:
                    vals[b] = np.nan
            ok = np.isfinite(vals)
        redrawn += int((~ok).sum())
        if redrawn > max_redraw:
            raise EstimationError(f"more than {max_redraw} degenerate bootstrap resamples")
        out = np.concatenate([out, vals[ok]])
    return out, redrawn


def _ci_rep(env, design, estimator, n, B_boot, level, seed, rep, max_redraw):
    with threadpool_limits(1), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        actions = generate_actions(design, n, substream(seed, rep, 1))
        noise = substream(seed, rep, 2)
        if isinstance(env, BootstrapEnv):
            panel = simulate_bootstrap(env, design, n, noise, actions=actions)
        else:
            panel = simulate(env, actions, noise)
        try:
            est = float(get_estimator(estimator)(panel, design, substream(seed, rep, 3)))
            boots, redrawn = _boot_estimates(panel, design, estimator, B_boot, substream(seed, rep, 5), max_redraw)
        except RECOVERABLE:
            return float("nan"), (float("nan"), float("nan")), 0
        tail = (1 - level) / 2
        lo, hi = np.quantile(boots, [tail, 1 - tail])
        return est, (float(lo), float(hi)), redrawn


def bootstrap_ci(
    env,
    design: DesignSpec,
    estimator: str,
    n: int,
    B_boot: int = 400,
    level: float = 0.95,
    outer: int = 200,
    seed: int = 0,
    jobs: int = 1,
    max_redraw: Optional[int] = None,
) -> CiReport:
    """Coverage and mean width of percentile bootstrap intervals.

    ``env`` is a :class:`BootstrapEnv` or linear/nonlinear parameters with a
    closed-form truth. Each outer replication simulates a panel, resamples
    its days ``B_boot`` times and forms the percentile interval. Degenerate
    resamples are redrawn and counted; outer replications whose point
    estimate fails are dropped from the coverage.
    """
    if not 0 < level < 1:
        raise ConfigError("level must lie in (0, 1)")
    if isinstance(env, BootstrapEnv):
        truth = env.true_ate()
    elif type(env) is LinearDgpParams:
        truth = true_ate_linear(env)
    else:
        truth = true_ate_mc(env, 200_000, substream(seed, 0, 4))[0]
    max_redraw = 10 * B_boot if max_redraw is None else max_redraw
    items = [(env, design, estimator, n, B_boot, level, seed, r, max_redraw) for r in range(outer)]
    if jobs == 1:
        res = [_ci_rep(*it) for it in items]
    else:
        res = Parallel(n_jobs=jobs, backend="loky")(delayed(_ci_rep)(*it) for it in items)
    est = np.array([r[0] for r in res])
    ci = np.array([r[1] for r in res])
    ok = np.isfinite(est) & np.all(np.isfinite(ci), axis=1)
    covered = (ci[ok, 0] <= truth) & (truth <= ci[ok, 1])
    k = int(ok.sum())
    cov = float(covered.mean()) if k else float("nan")
    return CiReport(
        coverage=cov,
        coverage_se=float(np.sqrt(cov * (1 - cov) / k)) if k else float("nan"),
        mean_width=float(np.mean(ci[ok, 1] - ci[ok, 0])) if k else float("nan"),
        truth=float(truth),
        intervals=ci,
        estimates=est,
        n_redrawn=int(sum(r[2] for r in res)),
        level=level,
    )
