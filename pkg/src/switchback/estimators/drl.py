"""Doubly robust ATE estimation with model-based nuisances.

The estimating function for one day is

    V_1^1(S_1) - V_1^0(S_1)
      + sum_t sum_a (-1)^(a+1) 2 1(A_t = a) w_t^a(S_t) [R_t + V_{t+1}^a(S_{t+1}) - V_t^a(S_t)]

where ``w_t^a`` is the ratio of the state density under the constant policy
``a`` to the state density under the design given ``A_t = a``, and the
factor 2 is the inverse of ``P(A_t = a) = 1/2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np

from ..core import ConfigError, DesignSpec, EstimationError, LinearDgpParams, Panel, as_rng
from .lstd import LstdCoeffs, PolynomialBasis, fit_lstd, solve_moment
from .ols import COND_LIMIT, OlsFit, fit_ols

__all__ = [
    "ModelValue",
    "RatioModel",
    "ZeroValue",
    "UnitRatio",
    "value_model_based",
    "fit_ratio_model",
    "psi",
    "estimate_drl",
    "drl_equals_lstd_check",
    "DrlLstdGap",
    "cross_fit_folds",
]


class ModelValue:
    """Closed-form value ``V_t^a(s) = c_t^a + w_t' s`` of a linear model.

    Built by the backward recursion ``w_t = beta_t + Phi_t' w_{t+1}`` and
    ``c_t^a = alpha_t + gamma_t a + c_{t+1}^a + w_{t+1}'(phi_t + Gamma_t a)``.
    """

    def __init__(self, alpha, beta, gamma, phi, Phi, Gamma):
        beta = np.asarray(beta, dtype=float)
        T, d = beta.shape
        w = np.zeros((T + 1, d))
        c = np.zeros((T + 1, 2))
        for t in range(T - 1, -1, -1):
            w[t] = beta[t]
            c[t] = alpha[t] + gamma[t] * np.arange(2) + c[t + 1]
            if t < T - 1:
                w[t] = w[t] + Phi[t].T @ w[t + 1]
                c[t] += w[t + 1] @ phi[t] + (w[t + 1] @ Gamma[t]) * np.arange(2)
        self.slope = w
        self.intercept = c
        self.T = T

    @classmethod
    def from_fit(cls, fit: OlsFit) -> "ModelValue":
        return cls(fit.alpha, fit.beta, fit.gamma, fit.phi, fit.Phi, fit.Gamma)

    @classmethod
    def from_params(cls, params: LinearDgpParams) -> "ModelValue":
        return cls(params.alpha, params.beta, params.gamma, params.phi, params.Phi, params.Gamma)

    def value(self, t: int, a: int, S) -> np.ndarray:
        if t > self.T:
            return np.zeros(np.shape(S)[0])
        return self.intercept[t - 1, a] + np.asarray(S) @ self.slope[t - 1]


def value_model_based(fit: OlsFit, t: int, a: int, s):
    """Model-based ``V_t^a(s)`` from fitted coefficients (``t`` one-based)."""
    s = np.asarray(s, dtype=float)
    out = ModelValue.from_fit(fit).value(t, a, np.atleast_2d(s))
    return float(out[0]) if s.ndim == 1 else out


class ZeroValue:
    """Value nuisance fixed at zero."""

    def value(self, t, a, S):
        return np.zeros(np.shape(S)[0])


class UnitRatio:
    """Ratio nuisance fixed at one."""

    def ratio(self, t, a, S):
        return np.ones(np.shape(S)[0])


@dataclass
class RatioModel:
    """Gaussian state laws under the constant policy and under the design.

    ``num_mean[t, a]`` and ``den_mean[t, a]`` are the mean of ``S_{t+1}``
    (zero-based ``t``) under always-``a`` and under the design conditional on
    ``A_{t+1} = a``; both laws share ``cov[t]`` because actions enter the
    state linearly. ``flagged`` records a ridge of ``1e-8 I`` on some
    covariance.
    """

    num_mean: np.ndarray
    den_mean: np.ndarray
    cov: np.ndarray
    flagged: bool = False

    def __post_init__(self):
        T = self.cov.shape[0]
        d = self.cov.shape[1]
        self._coef = np.zeros((T, 2, d))
        self._const = np.zeros((T, 2))
        for t in range(T):
            P = np.linalg.inv(self.cov[t])
            for a in (0, 1):
                mn, md = self.num_mean[t, a], self.den_mean[t, a]
                self._coef[t, a] = P @ (mn - md)
                self._const[t, a] = -0.5 * (mn @ P @ mn - md @ P @ md)

    @classmethod
    def from_arrays(cls, phi, Phi, Gamma, init_mean, init_cov, noise_cov, design: DesignSpec):
        if not design.is_switchback:
            raise ConfigError("model-based ratios need a switchback or alternating-day design")
        T = len(phi) + 1
        if design.T != T:
            raise ConfigError(f"design has T={design.T}, model has T={T}")
        d = len(init_mean)
        flagged = False
        cov = np.empty((T, d, d))
        cov[0] = init_cov
        for t in range(T - 1):
            cov[t + 1] = Phi[t] @ cov[t] @ Phi[t].T + noise_cov
        for t in range(T):
            cov[t] = 0.5 * (cov[t] + cov[t].T)
            eig = np.linalg.eigvalsh(cov[t])
            if eig[0] <= 0 or eig[-1] / eig[0] > COND_LIMIT:
                cov[t] += 1e-8 * np.eye(d)
                flagged = True

        def means(seq):
            mu = np.empty((T, d))
            mu[0] = init_mean
            for t in range(T - 1):
                mu[t + 1] = phi[t] + Phi[t] @ mu[t] + Gamma[t] * seq[t]
            return mu

        num = np.empty((T, 2, d))
        den = np.empty((T, 2, d))
        for a in (0, 1):
            num[:, a] = means(np.full(T, a))
            for t in range(T):
                den[t, a] = means(design.sequence_given(t + 1, a))[t]
        return cls(num, den, cov, flagged)

    @classmethod
    def from_params(cls, params: LinearDgpParams, design: DesignSpec) -> "RatioModel":
        """Population ratios of a linear-Gaussian model (oracle nuisance)."""
        return cls.from_arrays(params.phi, params.Phi, params.Gamma, params.init_mean,
                               params.init_cov, params.state_noise_cov, design)

    def ratio(self, t: int, a: int, S) -> np.ndarray:
        """``w_t^a`` at the rows of ``S`` (``t`` one-based)."""
        return np.exp(np.asarray(S) @ self._coef[t - 1, a] + self._const[t - 1, a])


def fit_ratio_model(panel: Panel, design: DesignSpec, fit: Optional[OlsFit] = None) -> RatioModel:
    """Model-based marginal ratios from OLS transitions and Gaussian noise fits.

    The initial state law uses the sample mean and covariance of ``S_1``; the
    transition noise covariance pools the OLS state residuals over intervals.
    """
    if fit is None:
        fit = fit_ols(panel)
    n, T, d = panel.states.shape
    S1 = panel.states[:, 0]
    init_cov = np.atleast_2d(np.cov(S1, rowvar=False))
    R = fit.state_resid.reshape(-1, d)
    dof = max((T - 1) * (n - (d + 2)), 1)
    noise_cov = R.T @ R / dof
    return RatioModel.from_arrays(fit.phi, fit.Phi, fit.Gamma, S1.mean(axis=0), init_cov,
                                  noise_cov, design)


def psi(panel: Panel, value, ratio) -> np.ndarray:
    """Per-day estimating function; ``mean(psi) / T`` estimates the ATE."""
    S, A, R = panel.states, panel.actions, panel.rewards
    T = panel.T
    out = value.value(1, 1, S[:, 0]) - value.value(1, 0, S[:, 0])
    for t in range(1, T + 1):
        St = S[:, t - 1]
        for a in (0, 1):
            ind = A[:, t - 1] == a
            if not ind.any():
                continue
            nxt = value.value(t + 1, a, S[:, t]) if t < T else 0.0
            td = R[:, t - 1] + nxt - value.value(t, a, St)
            sign = 1.0 if a == 1 else -1.0
            out = out + sign * 2.0 * np.where(ind, ratio.ratio(t, a, St) * td, 0.0)
    return out


def _value_nuisance(kind, train: Panel, fit, basis):
    if not isinstance(kind, str):
        return kind
    if kind == "model":
        return ModelValue.from_fit(fit if fit is not None else fit_ols(train))
    if kind == "lstd":
        return fit_lstd(train, basis)
    if kind == "zero":
        return ZeroValue()
    raise ConfigError(f"unknown value nuisance {kind!r}")


def _ratio_nuisance(kind, train: Panel, design, fit):
    if not isinstance(kind, str):
        return kind
    if kind == "model":
        return fit_ratio_model(train, design, fit)
    if kind == "one":
        return UnitRatio()
    raise ConfigError(f"unknown ratio nuisance {kind!r}")


def cross_fit_folds(panel: Panel, k_folds: int, seed=None):
    """Split day indices into ``k_folds`` near-equal folds.

    Days are first put in a canonical order determined by their data, so
    the split (and hence the estimate) does not depend on the row order.
    """
    keys = np.concatenate([panel.rewards, panel.states.reshape(panel.n, -1),
                           panel.actions.astype(float)], axis=1)
    canon = np.lexsort(keys.T[::-1])
    perm = as_rng(seed).permutation(panel.n)
    return [np.sort(f) for f in np.array_split(canon[perm], k_folds)]


def estimate_drl(
    panel: Panel,
    design: DesignSpec,
    k_folds: int = 2,
    value: Union[str, object] = "model",
    ratio: Union[str, object] = "model",
    seed=None,
    basis: Optional[PolynomialBasis] = None,
) -> float:
    """Cross-fitted DRL estimate of the ATE.

    Days are split by :func:`cross_fit_folds`; nuisances for a fold are
    fitted on the other folds. ``value`` is ``"model"``, ``"lstd"``,
    ``"zero"`` or an object with ``value(t, a, S)``; ``ratio`` is
    ``"model"``, ``"one"`` or an object with ``ratio(t, a, S)``.
    """
    if k_folds < 2:
        raise ConfigError("k_folds must be >= 2")
    n = panel.n
    if n < 2 * k_folds:
        raise EstimationError(f"DRL needs at least 2*k_folds={2 * k_folds} days, got {n}")
    folds = cross_fit_folds(panel, k_folds, seed)
    total = 0.0
    needs_fit = "model" in (value, ratio)
    for k, fold in enumerate(folds):
        train = panel.take(np.sort(np.concatenate([f for j, f in enumerate(folds) if j != k])))
        fit = fit_ols(train) if needs_fit else None
        v = _value_nuisance(value, train, fit, basis)
        r = _ratio_nuisance(ratio, train, design, fit)
        total += float(psi(panel.take(fold), v, r).sum())
    return total / (n * panel.T)


class LinearRatio:
    """Ratio nuisance linear in the basis: ``w_t^a(s) = phi(s)' alpha[t, a]``."""

    def __init__(self, alpha: np.ndarray, basis: PolynomialBasis):
        self.alpha = alpha
        self.basis = basis

    def ratio(self, t, a, S):
        return self.basis(S) @ self.alpha[t - 1, a]


class DrlLstdGap(NamedTuple):
    drl: float
    lstd: float
    gap: float


def drl_equals_lstd_check(
    panel: Panel,
    basis: Optional[PolynomialBasis] = None,
    coeffs: Optional[LstdCoeffs] = None,
) -> DrlLstdGap:
    """Evaluate the DRL estimator built from LSTD values and sieve ratios.

    Ratio coefficients follow the forward recursion
    ``alpha_1 = Sigma_1^{-1} mean phi(S_1)`` and
    ``alpha_t = Sigma_t^{-1} Sigma_{t,t-1} alpha_{t-1}``; with the exact LSTD
    solution every augmentation term vanishes and the two estimates agree.
    The recursion solves for ``2 w_t^a`` (its first step targets
    ``1 / P(A_1 = a)``), so the weights are halved to match the explicit
    factor 2 in ``psi``. The value terms then telescope and the DRL side does
    not depend on ``coeffs``. No cross-fitting is used. Pass perturbed
    ``coeffs`` to break the identity.
    """
    basis = basis or (coeffs.basis if coeffs is not None else PolynomialBasis(1))
    if coeffs is None:
        coeffs = fit_lstd(panel, basis)
    n, T, d = panel.states.shape
    feats = basis(panel.states)
    alpha = np.zeros((T, 2, feats.shape[-1]))
    for a in (0, 1):
        for t in range(T):
            F = feats[:, t]
            w = panel.actions[:, t] == a
            Sigma = F[w].T @ F[w] / n
            if t == 0:
                rhs = F.mean(axis=0)
            else:
                prev = np.where(panel.actions[:, t - 1] == a, feats[:, t - 1] @ alpha[t - 1, a], 0.0)
                rhs = F.T @ prev / n
            alpha[t, a] = solve_moment(Sigma, rhs, f"(t={t + 1}, a={a})")
    S1 = panel.states[:, 0]
    lstd = float(np.mean(coeffs.value(1, 1, S1) - coeffs.value(1, 0, S1)) / T)
    drl = float(np.mean(psi(panel, coeffs, LinearRatio(alpha / 2, basis))) / T)
    return DrlLstdGap(drl, lstd, abs(drl - lstd))
