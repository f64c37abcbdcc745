"""Per-interval OLS fit of the linear model and the plug-in ATE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import EstimationError, Panel
from ..simulate import linear_ate

__all__ = ["OlsFit", "fit_ols", "ate_ols", "ols_ate_batch", "COND_LIMIT"]

# moment matrices with a larger condition number are treated as singular
COND_LIMIT = 1e12


@dataclass(frozen=True)
class OlsFit:
    """Fitted reward and transition coefficients, one regression per interval.

    ``cond[t]`` is the condition number of the interval's ``X'X`` with
    ``X = [1, S_t, A_t]``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    phi: np.ndarray
    Phi: np.ndarray
    Gamma: np.ndarray
    cond: np.ndarray
    reward_resid: np.ndarray
    state_resid: np.ndarray

    @property
    def T(self) -> int:
        return self.alpha.shape[-1]

    @property
    def d(self) -> int:
        return self.beta.shape[-1]


def _design(states, actions):
    ones = np.ones(states.shape[:-1] + (1,))
    return np.concatenate([ones, states, actions[..., None].astype(float)], axis=-1)


def _fit_arrays(states, actions, rewards):
    """Batched per-interval least squares; leading batch axes are allowed.

    Shapes: states (..., n, T, d), actions/rewards (..., n, T). Returns the
    coefficient arrays and the per-interval condition numbers.
    """
    d = states.shape[-1]
    X = _design(states, actions)  # (..., n, T, p)
    XtX = np.einsum("...ntp,...ntq->...tpq", X, X)
    cond = np.linalg.cond(XtX)
    cond = np.where(np.isfinite(cond), cond, np.inf)
    ok = cond <= COND_LIMIT
    # keep solve well-posed on singular slices; callers check ``cond``
    safe = np.where(ok[..., None, None], XtX, np.eye(XtX.shape[-1]))
    Xty = np.einsum("...ntp,...nt->...tp", X, rewards)
    coef_r = np.linalg.solve(safe, Xty[..., None])[..., 0]  # (..., T, p)
    XtS = np.einsum("...ntp,...ntj->...tpj", X[..., :-1, :], states[..., 1:, :])
    coef_s = np.linalg.solve(safe[..., :-1, :, :], XtS)  # (..., T-1, p, d)
    return {
        "alpha": coef_r[..., 0],
        "beta": coef_r[..., 1:1 + d],
        "gamma": coef_r[..., 1 + d],
        "phi": coef_s[..., 0, :],
        "Phi": np.swapaxes(coef_s[..., 1:1 + d, :], -1, -2),
        "Gamma": coef_s[..., 1 + d, :],
        "cond": cond,
        "X": X,
    }


def fit_ols(panel: Panel) -> OlsFit:
    """Regress ``R_t`` and each coordinate of ``S_{t+1}`` on ``(1, S_t, A_t)``.

    Raises
    ------
    EstimationError
        If an interval's design matrix is rank deficient; the message names
        the (one-based) interval.
    """
    if panel.n < panel.d + 2:
        raise EstimationError(
            f"OLS needs at least d+2={panel.d + 2} days, got {panel.n}"
        )
    f = _fit_arrays(panel.states, panel.actions, panel.rewards)
    bad = np.flatnonzero(f["cond"] > COND_LIMIT)
    if bad.size:
        raise EstimationError(f"rank-deficient OLS design at t={bad[0] + 1}")
    S = panel.states
    fitted_r = f["alpha"] + np.einsum("ntd,td->nt", S, f["beta"]) + f["gamma"] * panel.actions
    fitted_s = (f["phi"] + np.einsum("tjk,ntk->ntj", f["Phi"], S[:, :-1])
                + f["Gamma"] * panel.actions[:, :-1, None])
    return OlsFit(
        alpha=f["alpha"], beta=f["beta"], gamma=f["gamma"],
        phi=f["phi"], Phi=f["Phi"], Gamma=f["Gamma"], cond=f["cond"],
        reward_resid=panel.rewards - fitted_r,
        state_resid=S[:, 1:] - fitted_s,
    )


def ate_ols(fit: OlsFit) -> float:
    """Plug the fitted coefficients into the closed-form linear-model ATE."""
    return linear_ate(fit.beta, fit.gamma, fit.Phi, fit.Gamma)


def ols_ate_batch(states, actions, rewards):
    """OLS plug-in ATE for a stack of panels sharing ``(n, T, d)``.

    Returns ``(ate, ok)`` where ``ok[b]`` is False when any interval of
    panel ``b`` had a singular design (its ``ate`` entry is then NaN).
    """
    f = _fit_arrays(states, actions, rewards)
    ok = (f["cond"] <= COND_LIMIT).all(axis=-1)
    beta, Phi, Gamma = f["beta"], f["Phi"], f["Gamma"]
    T = beta.shape[-2]
    total = f["gamma"].sum(axis=-1)
    carry = np.zeros(beta.shape[:-2] + beta.shape[-1:])
    for t in range(1, T):
        carry = np.einsum("...ij,...j->...i", Phi[..., t - 1, :, :], carry) + Gamma[..., t - 1, :]
        total = total + np.einsum("...i,...i->...", beta[..., t, :], carry)
    ate = np.where(ok, total / T, np.nan)
    return ate, ok
