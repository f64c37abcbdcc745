"""Command-line entry point: ``switchback {simulate,sweep,theory,advise,residuals,ci}``.

Configs are YAML documents; unknown keys are errors. Exit codes: 0 success,
2 bad configuration or input, 3 a sweep finished with excluded replications.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from typing import List, Optional

import numpy as np
import yaml

from . import __version__
from .core import ConfigError, DesignSpec, ErrorCovSpec, EstimationError, generate_actions
from .harness import (
    ExperimentConfig,
    cov_spec_from_dict,
    substream,
    bootstrap_ci,
    mean_offdiag_correlation,
    residual_correlation,
    run_experiment,
    write_outputs,
)
from .simulate import (
    BootstrapEnv,
    NonlinearDgpParams,
    draw_params,
    fit_bootstrap_env,
    read_panel,
    simulate,
    simulate_bootstrap,
    synthetic_aa_panel,
    true_ate_linear,
    true_ate_mc,
    write_panel,
)
from .theory import WorkflowInput, mse_diff_report, recommend_design

EXIT_CONFIG = 2
EXIT_FAILURES = 3

SIM_KEYS = {
    "dgp", "T", "d", "design", "n", "reward_cov", "carryover_shift", "seed",
    "source_days", "source_path", "delta1", "delta2", "truth_reps",
}


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_yaml(path: str) -> dict:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: the config must be a mapping")
    return doc


def _resolve_seed(cli_seed: Optional[int], doc: dict) -> int:
    if cli_seed is not None:
        return int(cli_seed)
    if doc.get("seed") is not None:
        return int(doc["seed"])
    seed = int(np.random.SeedSequence().entropy % 2**32)
    _note(f"no seed given; using seed {seed}")
    return seed


def _design_from(doc: dict, T: int) -> DesignSpec:
    d = dict(doc)
    unknown = set(d) - {"kind", "m"}
    if unknown:
        raise ConfigError(f"unknown design keys: {sorted(unknown)}")
    kind = d.get("kind", "switchback")
    if kind == "alternating_day":
        return DesignSpec.alternating_day(T)
    if "m" not in d:
        raise ConfigError("design needs m")
    return DesignSpec(kind, T, int(d["m"]))


def _environment(doc: dict, seed: int):
    """Build the simulation environment described by a simulate/ci config."""
    dgp = doc.get("dgp", "linear")
    T, d = int(doc.get("T", 48)), int(doc.get("d", 3))
    cov = cov_spec_from_dict(doc["reward_cov"]) if "reward_cov" in doc else ErrorCovSpec.autoregressive(0.9, 1.5)
    if "carryover_shift" not in doc and dgp != "bootstrap":
        _note("carryover_shift not set; using 0")
    shift = float(doc.get("carryover_shift", 0.0))
    if dgp in ("linear", "nonlinear"):
        return draw_params(T, d, substream(seed, 0), reward_cov=cov, carryover_shift=shift,
                           nonlinear=dgp == "nonlinear"), T
    if dgp == "bootstrap":
        if doc.get("source_path"):
            source = read_panel(doc["source_path"])
        else:
            source = synthetic_aa_panel(int(doc.get("source_days", 40)), T, d, substream(seed, 5), reward_cov=cov)
        return fit_bootstrap_env(source, float(doc.get("delta1", 2.0)), float(doc.get("delta2", 2.0))), source.T
    raise ConfigError(f"unknown dgp {dgp!r}")


def _truth(env, doc: dict, seed: int) -> float:
    if isinstance(env, BootstrapEnv):
        return env.true_ate()
    if isinstance(env, NonlinearDgpParams):
        return true_ate_mc(env, int(doc.get("truth_reps", 100_000)), substream(seed, 4))[0]
    return true_ate_linear(env)


def cmd_simulate(args) -> int:
    doc = _load_yaml(args.config)
    unknown = set(doc) - SIM_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    seed = _resolve_seed(args.seed, doc)
    env, T = _environment(doc, seed)
    design = _design_from(doc.get("design", {"kind": "switchback", "m": 1}), T)
    n = int(doc.get("n", 48))
    actions = generate_actions(design, n, substream(seed, 1))
    if isinstance(env, BootstrapEnv):
        panel = simulate_bootstrap(env, design, n, substream(seed, 2), actions=actions)
    else:
        panel = simulate(env, actions, substream(seed, 2))
    write_panel(panel, args.out)
    print(f"wrote {n} days x {T} intervals to {args.out}")
    print(f"true ATE: {_truth(env, doc, seed)!r}")
    return 0


def cmd_sweep(args) -> int:
    if args.manifest:
        with open(args.manifest) as fh:
            doc = json.load(fh)["config"]
    else:
        doc = _load_yaml(args.config)
    if "carryover_shift" not in doc and doc.get("dgp", "linear") != "bootstrap":
        _note("carryover_shift not set; using 0")
    doc = dict(doc)
    doc["seed"] = _resolve_seed(args.seed, doc)
    cfg = ExperimentConfig.from_dict(doc)
    report = run_experiment(cfg, jobs=args.jobs, out_dir=args.out,
                            progress=None if args.quiet else _note)
    csv_path, man_path = write_outputs(report, args.out)
    print(f"wrote {csv_path} and {man_path}")
    if report.n_failures:
        _note(f"{report.n_failures} replication(s) excluded; see the manifest")
        return EXIT_FAILURES
    return 0


def _cov_from_args(args) -> ErrorCovSpec:
    fam = args.family
    if fam == "ar":
        return ErrorCovSpec.autoregressive(args.rho, args.sigma2)
    if fam == "ma":
        return ErrorCovSpec.moving_average(args.K, args.sigma2)
    if fam == "exchangeable":
        return ErrorCovSpec.exchangeable(args.rho, args.sigma2)
    return ErrorCovSpec.uncorrelated(args.sigma2)


def _int_list(text: str) -> List[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_theory(args) -> int:
    spec = _cov_from_args(args)
    ms = _int_list(args.m) if args.m else [m for m in range(1, args.T + 1) if args.T % m == 0]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["m", "autocorr_term", "closed_form", "closed_form_kind", "oracle", "flag"])
    for m in ms:
        if m < 1 or args.T % m:
            w.writerow([m, "", "", "", "", "m does not divide T"])
            continue
        r = mse_diff_report(spec, args.T, m)
        cf = "" if r.closed_form is None else repr(r.closed_form)
        w.writerow([m, repr(r.autocorr_term), cf, r.closed_form_kind or "", repr(r.oracle_value), ""])
    return 0


def _number_or_word(text: Optional[str]):
    if text is None:
        return None
    try:
        return float(text)
    except ValueError:
        return text


def cmd_advise(args) -> int:
    markov_ok = not args.markov_violated
    carry = _number_or_word(args.carryover)
    resid = _number_or_word(args.residuals)
    if args.panel:
        C = residual_correlation(read_panel(args.panel))
        resid = mean_offdiag_correlation(C)
        print(f"mean off-diagonal residual correlation: {resid:.4f}")
    if markov_ok and carry is None:
        args.parser.print_usage(sys.stderr)
        _note("advise: --carryover is required unless --markov-violated is set")
        return EXIT_CONFIG
    if markov_ok and carry is not None and resid is None:
        level = WorkflowInput(carryover=carry).carryover_level()
        if level == "weak":
            args.parser.print_usage(sys.stderr)
            _note("advise: weak carryover needs --residuals or --panel")
            return EXIT_CONFIG
    inp = WorkflowInput(markov_ok=markov_ok, carryover=carry if carry is not None else "weak",
                        residual_corr=resid if resid is not None else "uncorrelated")
    rec = recommend_design(inp)
    print(rec.design)
    print(rec.rationale)
    return 0


def cmd_residuals(args) -> int:
    panel = read_panel(args.panel)
    C = residual_correlation(panel)
    print(f"mean off-diagonal correlation: {mean_offdiag_correlation(C):.4f}")
    if panel.T > 1:
        print(f"mean lag-1 correlation: {mean_offdiag_correlation(C, lag=1):.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"t{t + 1}" for t in range(panel.T)])
            for row in C:
                w.writerow(["" if not np.isfinite(v) else repr(float(v)) for v in row])
        print(f"wrote {args.out}")
    return 0


def cmd_ci(args) -> int:
    doc = _load_yaml(args.config)
    unknown = set(doc) - SIM_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    seed = _resolve_seed(args.seed, doc)
    env, T = _environment(doc, seed)
    design = DesignSpec.alternating_day(T) if args.m == T else DesignSpec.switchback(args.m, T)
    n = int(args.n if args.n is not None else doc.get("n", 48))
    rep = bootstrap_ci(env, design, args.estimator, n, B_boot=args.B_boot, level=args.level,
                       outer=args.outer, seed=seed, jobs=args.jobs)
    out = rep.to_dict()
    out.update({"m": args.m, "n": n, "estimator": args.estimator, "seed": seed})
    text = json.dumps(out, indent=2)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="switchback", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"switchback {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate one panel and write it as CSV")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="run a Monte Carlo sweep")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--config")
    g.add_argument("--manifest", help="rerun the config stored in a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("theory", help="tabulate the autocorrelation term over m")
    s.add_argument("--family", choices=["ar", "ma", "exchangeable", "uncorrelated"], required=True)
    s.add_argument("--rho", type=float, default=0.0)
    s.add_argument("--sigma2", type=float, default=1.0)
    s.add_argument("--K", type=int, default=1)
    s.add_argument("--T", type=int, required=True)
    s.add_argument("--m", help="comma-separated block lengths (default: all divisors of T)")
    s.set_defaults(func=cmd_theory)

    s = sub.add_parser("advise", help="recommend a design")
    s.add_argument("--markov-violated", action="store_true")
    s.add_argument("--carryover", help="weak, strong, or a numeric estimate")
    s.add_argument("--residuals", help="positive, uncorrelated, negative, or a mean correlation")
    s.add_argument("--panel", help="panel CSV used to summarise residual correlation")
    s.set_defaults(func=cmd_advise, parser=s)

    s = sub.add_parser("residuals", help="residual correlation matrix of a panel")
    s.add_argument("--panel", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_residuals)

    s = sub.add_parser("ci", help="coverage and width of bootstrap intervals")
    s.add_argument("--config", required=True)
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--estimator", default="ols")
    s.add_argument("--B-boot", dest="B_boot", type=int, default=400)
    s.add_argument("--level", type=float, default=0.95)
    s.add_argument("--outer", type=int, default=200)
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_ci)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, EstimationError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
