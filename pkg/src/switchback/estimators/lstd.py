"""Least-squares temporal-difference estimators of the ATE."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np

from ..core import EstimationError, Panel
from .ols import COND_LIMIT

__all__ = [
    "PolynomialBasis",
    "LstdCoeffs",
    "fit_lstd",
    "estimate_lstd",
    "lstd_residuals",
    "estimate_lstd_modified",
    "solve_moment",
]


@dataclass(frozen=True)
class PolynomialBasis:
    """Intercept plus all state monomials up to ``degree``.

    ``degree=1`` gives ``(1, s_1, ..., s_d)``; higher degrees add every
    product of coordinates (with repetition).
    """

    degree: int = 1

    def n_features(self, d: int) -> int:
        return len(self._terms(d))

    def _terms(self, d: int):
        terms = [()]
        for p in range(1, self.degree + 1):
            terms.extend(combinations_with_replacement(range(d), p))
        return terms

    def __call__(self, S: np.ndarray) -> np.ndarray:
        S = np.asarray(S, dtype=float)
        cols = [np.ones(S.shape[:-1])]
        for term in self._terms(S.shape[-1])[1:]:
            cols.append(np.prod(S[..., list(term)], axis=-1))
        return np.stack(cols, axis=-1)

    def describe(self) -> dict:
        return {"family": "polynomial", "degree": self.degree}


def solve_moment(Sigma: np.ndarray, rhs: np.ndarray, where: str) -> np.ndarray:
    """Solve ``Sigma x = rhs`` after a condition-number check."""
    cond = np.linalg.cond(Sigma)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise EstimationError(f"singular moment matrix at {where} (cond={cond:.3g})")
    return np.linalg.solve(Sigma, rhs)


@dataclass(frozen=True)
class LstdCoeffs:
    """Value-function coefficients ``theta[t, a]`` for ``t = 1..T+1``.

    Row ``t-1`` holds interval ``t``; the last row (``T+1``) is zero.
    """

    theta: np.ndarray
    basis: PolynomialBasis

    @property
    def T(self) -> int:
        return self.theta.shape[0] - 1

    def value(self, t: int, a: int, S: np.ndarray) -> np.ndarray:
        """``V_t^a`` at the rows of ``S`` (``t`` one-based, ``T+1`` gives 0)."""
        if t > self.T:
            return np.zeros(np.shape(S)[0])
        return self.basis(S) @ self.theta[t - 1, a]


def fit_lstd(panel: Panel, basis: Optional[PolynomialBasis] = None) -> LstdCoeffs:
    """Backward recursion solving the per-interval Bellman estimating equations."""
    basis = basis or PolynomialBasis(1)
    n, T, d = panel.states.shape
    L = basis.n_features(d)
    feats = basis(panel.states)  # (n, T, L)
    theta = np.zeros((T + 1, 2, L))
    for t in range(T - 1, -1, -1):
        F = feats[:, t]
        for a in (0, 1):
            w = panel.actions[:, t] == a
            target = panel.rewards[:, t].copy()
            if t < T - 1:
                target += feats[:, t + 1] @ theta[t + 1, a]
            Sigma = F[w].T @ F[w] / n
            rhs = F[w].T @ target[w] / n
            theta[t, a] = solve_moment(Sigma, rhs, f"(t={t + 1}, a={a})")
    return LstdCoeffs(theta, basis)


def estimate_lstd(panel: Panel, basis: Optional[PolynomialBasis] = None) -> float:
    """LSTD ATE: ``(1/nT) sum_i [V_1^1(S_i1) - V_1^0(S_i1)]``."""
    coeffs = fit_lstd(panel, basis)
    S1 = panel.states[:, 0]
    return float(np.mean(coeffs.value(1, 1, S1) - coeffs.value(1, 0, S1)) / panel.T)


def lstd_residuals(panel: Panel, coeffs: LstdCoeffs) -> np.ndarray:
    """Max-abs residual of each ``(t, a)`` estimating equation, shape ``(T, 2)``."""
    T = panel.T
    out = np.zeros((T, 2))
    for t in range(1, T + 1):
        S = panel.states[:, t - 1]
        F = coeffs.basis(S)
        for a in (0, 1):
            w = panel.actions[:, t - 1] == a
            nxt = coeffs.value(t + 1, a, panel.states[:, t]) if t < T else 0.0
            td = panel.rewards[:, t - 1] + nxt - coeffs.value(t, a, S)
            out[t - 1, a] = np.abs(F[w].T @ td[w] / panel.n).max()
    return out


def _time_features(u: np.ndarray, T: int, use_time: bool) -> np.ndarray:
    if not use_time:
        return np.ones(u.shape + (1,))
    return np.stack([np.ones(u.shape), u / T], axis=-1)


def estimate_lstd_modified(panel: Panel, basis: Optional[PolynomialBasis] = None) -> float:
    """LSTD with time in the state, pooling every interval per horizon gap.

    For gap ``j`` the value of the next ``j + 1`` rewards, ``V_{u:u+j}``, is
    fitted on the tensor basis of ``basis(s)`` and ``(1, u/T)`` using all
    intervals ``u <= T - j``. The target is ``R_u`` plus the gap ``j - 1``
    value at ``S_{u+1}``. The last gap only has ``u = 1``, where the time
    features are constant, so it uses the state basis alone.
    Returns the per-interval ATE ``(1/nT) sum_i [V_{1:T}^1 - V_{1:T}^0](S_i1)``.
    """
    basis = basis or PolynomialBasis(1)
    n, T, d = panel.states.shape
    sfeat = basis(panel.states)  # (n, T, Ls)
    u_all = np.arange(1, T + 1, dtype=float)

    def features(j, cols):
        # tensor product of state and time features at intervals ``cols``
        tf = _time_features(u_all[cols], T, use_time=(T - j) > 1)
        return (sfeat[:, cols, :, None] * tf[None, :, None, :]).reshape(n, len(cols), -1)

    theta = {}
    for j in range(T):
        cols = np.arange(0, T - j)
        F = features(j, cols).reshape(n * len(cols), -1)
        A = panel.actions[:, cols].reshape(-1)
        target = panel.rewards[:, cols].copy()
        if j > 0:
            Fn = features(j - 1, cols + 1)
        for a in (0, 1):
            y = target.copy()
            if j > 0:
                y = y + Fn @ theta[j - 1, a]
            y = y.reshape(-1)
            w = A == a
            Sigma = F[w].T @ F[w] / (n * len(cols))
            rhs = F[w].T @ y[w] / (n * len(cols))
            theta[j, a] = solve_moment(Sigma, rhs, f"(gap={j}, a={a})")
    F1 = features(T - 1, np.array([0]))[:, 0]
    diff = F1 @ (theta[T - 1, 1] - theta[T - 1, 0])
    return float(diff.mean() / T)
