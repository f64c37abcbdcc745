"""Simulation, estimation and design evaluation for switchback experiments."""

from __future__ import annotations

__version__ = "0.1.0"

from .core import (
    ConfigError,
    DesignSpec,
    DiscreteMdp,
    ErrorCovSpec,
    EstimationError,
    LinearDgpParams,
    Panel,
    cov_matrix,
    covariance,
    generate_actions,
)
from .simulate import (
    BootstrapEnv,
    NonlinearDgpParams,
    draw_params,
    fit_bootstrap_env,
    read_panel,
    sample_reward_errors,
    simulate,
    simulate_bootstrap,
    simulate_linear,
    simulate_nonlinear,
    true_ate_linear,
    true_ate_mc,
    write_panel,
)

__all__ = [
    "__version__",
    "ConfigError",
    "EstimationError",
    "DesignSpec",
    "ErrorCovSpec",
    "LinearDgpParams",
    "NonlinearDgpParams",
    "Panel",
    "DiscreteMdp",
    "BootstrapEnv",
    "generate_actions",
    "covariance",
    "cov_matrix",
    "sample_reward_errors",
    "draw_params",
    "simulate",
    "simulate_linear",
    "simulate_nonlinear",
    "simulate_bootstrap",
    "fit_bootstrap_env",
    "true_ate_linear",
    "true_ate_mc",
    "read_panel",
    "write_panel",
]
