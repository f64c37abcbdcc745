"""ATE estimators addressable by string id.

Every registry entry is called as ``fn(panel, design, seed)``. The
``DESIGN_FAMILY`` map records which design the estimator expects its data
to come from: RL estimators use switchback panels and the non-RL baselines
use regular Bernoulli panels with the same block length.
"""

from __future__ import annotations

from typing import Callable, Dict

from ..core import BERNOULLI, SWITCHBACK, ConfigError
from .baselines import estimate_burnin_dim, estimate_multistep_is, estimate_simple_is, run_probability
from .drl import (
    ModelValue,
    RatioModel,
    UnitRatio,
    ZeroValue,
    drl_equals_lstd_check,
    estimate_drl,
    fit_ratio_model,
    psi,
    value_model_based,
)
from .lstd import (
    LstdCoeffs,
    PolynomialBasis,
    estimate_lstd,
    estimate_lstd_modified,
    fit_lstd,
    lstd_residuals,
)
from .ols import OlsFit, ate_ols, fit_ols, ols_ate_batch


def _burnin(panel, design, seed=None):
    # b = 1 as in the baseline comparison; a block of length 1 allows only b = 0
    return estimate_burnin_dim(panel, design, b=min(1, design.m - 1))


ESTIMATORS: Dict[str, Callable] = {
    "ols": lambda panel, design, seed=None: ate_ols(fit_ols(panel)),
    "lstd": lambda panel, design, seed=None: estimate_lstd(panel),
    "mlstd": lambda panel, design, seed=None: estimate_lstd_modified(panel),
    "drl": lambda panel, design, seed=None, k_folds=2: estimate_drl(panel, design, k_folds, seed=seed),
    "msis": lambda panel, design, seed=None: estimate_multistep_is(panel, design),
    "burnin": _burnin,
    "sis": lambda panel, design, seed=None: estimate_simple_is(panel),
}

DESIGN_FAMILY: Dict[str, str] = {
    "ols": SWITCHBACK,
    "lstd": SWITCHBACK,
    "mlstd": SWITCHBACK,
    "drl": SWITCHBACK,
    "msis": BERNOULLI,
    "burnin": BERNOULLI,
    "sis": BERNOULLI,
}


def get_estimator(name: str) -> Callable:
    try:
        return ESTIMATORS[name]
    except KeyError:
        raise ConfigError(f"unknown estimator {name!r}; choose from {sorted(ESTIMATORS)}") from None


__all__ = [
    "ESTIMATORS",
    "DESIGN_FAMILY",
    "get_estimator",
    "OlsFit",
    "fit_ols",
    "ate_ols",
    "ols_ate_batch",
    "PolynomialBasis",
    "LstdCoeffs",
    "fit_lstd",
    "estimate_lstd",
    "estimate_lstd_modified",
    "lstd_residuals",
    "ModelValue",
    "RatioModel",
    "UnitRatio",
    "ZeroValue",
    "value_model_based",
    "fit_ratio_model",
    "psi",
    "estimate_drl",
    "drl_equals_lstd_check",
    "estimate_multistep_is",
    "estimate_burnin_dim",
    "estimate_simple_is",
    "run_probability",
]
