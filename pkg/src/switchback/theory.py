"""Closed-form design comparisons, discrete-MDP oracles and the design advisor.

The central quantity is the autocorrelation term of the MSE difference
between the alternating-day design and an ``m``-switchback design,

    (16 / T^2) sum_{0 <= k1 < k2 < T/m, k2 - k1 odd} sum_{l1, l2 = 1..m} sigma_e(l1 + k1 m, l2 + k2 m),

returned here without the ``1/n`` factor. Positive values favour switchback.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .core import (
    AR,
    EXCHANGEABLE,
    MA,
    UNCORRELATED,
    ConfigError,
    DesignSpec,
    DiscreteMdp,
    ErrorCovSpec,
    LinearDgpParams,
    as_rng,
    cov_matrix,
)

__all__ = [
    "autocorr_term",
    "toy_signed_sum_diff",
    "cor1_closed_form",
    "cor2_closed_form",
    "cor3_closed_form",
    "MseDiffReport",
    "mse_diff_report",
    "toy_plugin_mse_diff_mc",
    "brute_force_ate_discrete",
    "compute_delta",
    "discretize_linear_dgp",
    "WorkflowInput",
    "Recommendation",
    "recommend_design",
]


def _check_divides(T: int, m: int) -> None:
    if m < 1 or T % m:
        raise ConfigError(f"m must divide T (m={m}, T={T})")


def autocorr_term(spec: ErrorCovSpec, T: int, m: int) -> float:
    """Autocorrelation part of ``n * [MSE(AD) - MSE(SB_m)]`` as a block triple sum."""
    _check_divides(T, m)
    K = T // m
    M = cov_matrix(spec, T)
    blocks = M.reshape(K, m, K, m).sum(axis=(1, 3))
    k1, k2 = np.triu_indices(K, k=1)
    odd = (k2 - k1) % 2 == 1
    return float(16.0 / T**2 * blocks[k1[odd], k2[odd]].sum())


def toy_signed_sum_diff(spec: ErrorCovSpec, T: int, m: int) -> float:
    """``4/T^2 [Var(sum_t e_t) - Var(sum_t s_t e_t)]`` with ``s`` alternating per block."""
    _check_divides(T, m)
    M = cov_matrix(spec, T)
    ones = np.ones(T)
    s = 1.0 - 2.0 * ((np.arange(T) // m) % 2)
    return float(4.0 / T**2 * (ones @ M @ ones - s @ M @ s))


def cor1_closed_form(rho: float, sigma2: float, T: int, m: int) -> float:
    """Large-``T`` value of the term under AR errors ``sigma2 * rho^|dt|``."""
    if not -1 < rho < 1:
        raise ConfigError("AR closed form needs |rho| < 1")
    if m < 1:
        raise ConfigError("m must be >= 1")
    rm = rho**m
    return 16 * sigma2 * rho * (1 - rm) / (m * T * (1 - rho) ** 2 * (1 + rm))


def cor2_closed_form(K: int, sigma2: float, T: int, m: int) -> float:
    """Exact value under MA(``K``) errors, valid for ``m >= K``."""
    _check_divides(T, m)
    if m < K:
        raise ConfigError(f"MA closed form requires m >= K (m={m}, K={K})")
    return 8 * sigma2 * (T / m - 1) * (K**2 - 1) / (3 * T**2)


def cor3_closed_form(rho: float, sigma2: float, T: int, m: int) -> float:
    """Exact value under exchangeable errors: ``4 sigma2 rho`` if ``T/m`` is even."""
    _check_divides(T, m)
    if (T // m) % 2 == 0:
        return 4 * sigma2 * rho
    return 4 * sigma2 * rho * (1 - m**2 / T**2)


@dataclass(frozen=True)
class MseDiffReport:
    """Autocorrelation term for one ``(T, m)`` pair with optional references.

    ``closed_form_kind`` is ``"exact"`` or ``"asymptotic"`` (AR errors) and
    is ``None`` when no closed form applies.
    """

    T: int
    m: int
    family: str
    autocorr_term: float
    closed_form: Optional[float] = None
    closed_form_kind: Optional[str] = None
    oracle_value: Optional[float] = None


def mse_diff_report(spec: ErrorCovSpec, T: int, m: int) -> MseDiffReport:
    term = autocorr_term(spec, T, m)
    closed, kind = None, None
    if spec.family == AR:
        closed, kind = cor1_closed_form(spec.rho, spec.sigma2, T, m), "asymptotic"
    elif spec.family == MA and m >= spec.K:
        closed, kind = cor2_closed_form(spec.K, spec.sigma2, T, m), "exact"
    elif spec.family == EXCHANGEABLE:
        closed, kind = cor3_closed_form(spec.rho, spec.sigma2, T, m), "exact"
    elif spec.family == UNCORRELATED:
        closed, kind = 0.0, "exact"
    return MseDiffReport(T, m, spec.family, term, closed, kind, toy_signed_sum_diff(spec, T, m))


def _plugin(actions: np.ndarray, errors: np.ndarray) -> np.ndarray:
    # difference of arm means, batched over the leading axis
    a = actions.astype(float)
    treat = (errors * a).sum(axis=(-2, -1)) / a.sum(axis=(-2, -1))
    ctrl = (errors * (1 - a)).sum(axis=(-2, -1)) / (1 - a).sum(axis=(-2, -1))
    return treat - ctrl


def toy_plugin_mse_diff_mc(
    spec: ErrorCovSpec, T: int, m: int, n: int, reps: int, seed=None, chunk: int = 10_000
) -> Tuple[float, float]:
    """Monte Carlo ``MSE(AD) - MSE(SB_m)`` of the arm-mean contrast without carryover.

    Rewards are ``beta_1 A + beta_0 (1 - A) + e``, so the estimation error is
    the error contrast alone. Both designs see the same errors in every
    replication; returns the mean paired difference of squared errors and
    its standard error.
    """
    from .simulate import sample_reward_errors

    _check_divides(T, m)
    rng = as_rng(seed)
    A_ad = _actions_for(DesignSpec.alternating_day(T), n)
    A_sb = _actions_for(DesignSpec.switchback(m, T), n)
    diffs = []
    done = 0
    while done < reps:
        size = min(chunk, reps - done)
        starts = rng.integers(0, 2, size)
        e = sample_reward_errors(spec, T, rng, size=size * n).reshape(size, n, T)
        ad = np.where(starts[:, None, None] == 0, A_ad[0], A_ad[1])
        sb = np.where(starts[:, None, None] == 0, A_sb[0], A_sb[1])
        diffs.append(_plugin(ad, e) ** 2 - _plugin(sb, e) ** 2)
        done += size
    diffs = np.concatenate(diffs)
    return float(diffs.mean()), float(diffs.std(ddof=1) / np.sqrt(reps))


def _actions_for(design: DesignSpec, n: int) -> np.ndarray:
    from .core import generate_actions

    return np.stack([generate_actions(design, n, first_action=a) for a in (0, 1)])


# ---------------------------------------------------------------- discrete oracles


def brute_force_ate_discrete(mdp: DiscreteMdp) -> float:
    """Exact ATE by propagating the state distribution under each constant policy."""
    value = np.zeros(2)
    for a in (0, 1):
        dist = np.asarray(mdp.init_dist, dtype=float)
        for t in range(mdp.T):
            value[a] += dist @ mdp.rewards[t, a]
            if t < mdp.T - 1:
                dist = dist @ mdp.transitions[t, a]
    return float((value[1] - value[0]) / mdp.T)


def compute_delta(mdp: DiscreteMdp) -> float:
    """``max_{t, s} sum_{s'} |p_t(s'|1, s) - p_t(s'|0, s)|``."""
    if mdp.T < 2:
        return 0.0
    gap = np.abs(mdp.transitions[:, 1] - mdp.transitions[:, 0]).sum(axis=-1)
    return float(gap.max())


def _gauss_rows(grid: np.ndarray, means: np.ndarray, var: float) -> np.ndarray:
    logp = -0.5 * (grid[None, :] - means[:, None]) ** 2 / var
    logp -= logp.max(axis=1, keepdims=True)
    p = np.exp(logp)
    return p / p.sum(axis=1, keepdims=True)


def discretize_linear_dgp(params: LinearDgpParams, n_grid: int = 801, width: float = 10.0) -> DiscreteMdp:
    """Discretise a one-dimensional linear-Gaussian model on a uniform grid.

    The grid covers every mean reachable under the two constant policies,
    padded by ``width`` standard deviations. Transition rows and the initial
    law are Gaussian densities on the grid, normalised to sum to one.
    """
    if params.d != 1:
        raise ConfigError("discretisation supports d = 1 only")
    T = params.T
    var_e = float(params.state_noise_cov[0, 0])
    var0 = float(params.init_cov[0, 0])
    mu = np.full(2, float(params.init_mean[0]))
    var = var0
    lo = hi = mu[0]
    sd = np.sqrt(var0)
    for t in range(T - 1):
        mu = params.phi[t, 0] + params.Phi[t, 0, 0] * mu + params.Gamma[t, 0] * np.arange(2)
        var = params.Phi[t, 0, 0] ** 2 * var + var_e
        lo, hi, sd = min(lo, mu.min()), max(hi, mu.max()), max(sd, np.sqrt(var))
    grid = np.linspace(lo - width * sd, hi + width * sd, n_grid)
    init = _gauss_rows(grid, np.array([params.init_mean[0]]), var0)[0]
    trans = np.empty((max(T - 1, 0), 2, n_grid, n_grid))
    for t in range(T - 1):
        for a in (0, 1):
            means = params.phi[t, 0] + params.Phi[t, 0, 0] * grid + params.Gamma[t, 0] * a
            trans[t, a] = _gauss_rows(grid, means, var_e)
    rewards = np.empty((T, 2, n_grid))
    for t in range(T):
        for a in (0, 1):
            rewards[t, a] = params.alpha[t] + params.beta[t, 0] * grid + params.gamma[t] * a
    return DiscreteMdp(trans, rewards, init)


# ---------------------------------------------------------------- workflow advisor

STRONG_CARRYOVER = 0.1
POSITIVE_CORRELATION = 0.05


@dataclass(frozen=True)
class WorkflowInput:
    """Inputs of the design workflow.

    ``carryover`` is ``"weak"``, ``"strong"`` or a numeric estimate of the
    transition shift; ``residual_corr`` is ``"positive"``, ``"uncorrelated"``,
    ``"negative"`` or the mean off-diagonal residual correlation. Numeric
    values are classified with the two thresholds, which are defaults of
    this toolkit rather than established cutoffs.
    """

    markov_ok: bool = True
    carryover: Union[str, float] = "weak"
    residual_corr: Union[str, float] = "uncorrelated"
    strong_threshold: float = STRONG_CARRYOVER
    positive_threshold: float = POSITIVE_CORRELATION

    def carryover_level(self) -> str:
        if isinstance(self.carryover, str):
            if self.carryover not in ("weak", "strong"):
                raise ConfigError(f"carryover must be 'weak' or 'strong', got {self.carryover!r}")
            return self.carryover
        return "strong" if float(self.carryover) > self.strong_threshold else "weak"

    def correlation_level(self) -> str:
        if isinstance(self.residual_corr, str):
            if self.residual_corr not in ("positive", "uncorrelated", "negative"):
                raise ConfigError(
                    "residual_corr must be 'positive', 'uncorrelated' or 'negative', "
                    f"got {self.residual_corr!r}"
                )
            return self.residual_corr
        r = float(self.residual_corr)
        if r > self.positive_threshold:
            return "positive"
        if r < -self.positive_threshold:
            return "negative"
        return "uncorrelated"


@dataclass(frozen=True)
class Recommendation:
    design: str
    rationale: str

    def __str__(self) -> str:
        return f"{self.design}: {self.rationale}"


AD = "AD"
SB1 = "SB, m=1"
REDISCRETIZE = "re-discretize"


def recommend_design(inp: WorkflowInput) -> Recommendation:
    """Pick a design from the Markov check, carryover size and residual correlation."""
    if not inp.markov_ok:
        return Recommendation(
            REDISCRETIZE,
            "the Markov check failed; lengthen the time intervals and re-test before choosing a design",
        )
    if inp.carryover_level() == "strong":
        return Recommendation(
            AD,
            "carryover is strong, so frequent switching biases the estimate; use alternating days",
        )
    if inp.correlation_level() == "positive":
        return Recommendation(
            SB1,
            "carryover is weak and residuals are mostly positively correlated; "
            "switching every interval cancels correlated errors",
        )
    return Recommendation(
        AD,
        "carryover is weak but residuals are not positively correlated, "
        "so switching brings no variance gain",
    )
