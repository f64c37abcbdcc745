"""Non-RL baselines for regular Bernoulli switchback data."""

from __future__ import annotations

import warnings
from typing import Optional

import numpy as np

from ..core import BERNOULLI, ConfigError, DesignSpec, EstimationError, Panel

__all__ = ["estimate_multistep_is", "estimate_burnin_dim", "estimate_simple_is", "run_probability"]


def _check_design(panel: Panel, design: DesignSpec) -> None:
    if design.T != panel.T:
        raise ConfigError(f"design has T={design.T}, panel has T={panel.T}")


def run_probability(design: DesignSpec, t1: int, t2: int) -> float:
    """Probability that ``A_{t1:t2}`` (one-based, inclusive) is a constant run of a given arm.

    Under the Bernoulli design each block head is a fair coin and block
    interiors copy it, so the probability is ``0.5 ** (blocks spanned)``.
    Under a switchback design the run is possible only within one block
    (probability 1/2).
    """
    blocks = design.block_index()
    spanned = int(blocks[t2 - 1] - blocks[t1 - 1] + 1)
    if design.kind == BERNOULLI:
        return 0.5 ** spanned
    return 0.5 if spanned == 1 else 0.0


def estimate_multistep_is(panel: Panel, design: DesignSpec, m: Optional[int] = None) -> float:
    """Multi-step importance sampling with horizon ``m`` (default: block length).

    Each reward is weighted by the indicator that the last ``m + 1`` actions
    (or all actions so far, for ``t <= m``) equal the target arm, divided by
    the design probability of that run. ``m = 0`` gives the simple IS estimator.
    """
    _check_design(panel, design)
    m = design.m if m is None else int(m)
    if m < 0:
        raise ConfigError("m must be >= 0")
    A, R = panel.actions, panel.rewards
    n, T = A.shape
    total = np.zeros(n)
    for t in range(1, T + 1):
        start = max(t - m, 1)
        window = A[:, start - 1:t]
        p = run_probability(design, start, t)
        if p <= 0:
            raise EstimationError(f"zero-probability action run at t={t}")
        ones = window.all(axis=1)
        zeros = ~window.any(axis=1)
        total += R[:, t - 1] * (ones.astype(float) - zeros.astype(float)) / p
    return float(total.sum() / (n * T))


def estimate_burnin_dim(panel: Panel, design: DesignSpec, b: int = 1) -> float:
    """Difference in block means after dropping the first ``b`` intervals of each block.

    Days without a block of each arm are excluded with a warning.
    """
    _check_design(panel, design)
    m = design.m
    if not 0 <= b < m:
        raise ConfigError(f"burn-in b must satisfy 0 <= b < m (b={b}, m={m})")
    n, T = panel.actions.shape
    K = T // m
    heads = panel.actions[:, ::m]  # (n, K)
    kept = panel.rewards.reshape(n, K, m)[:, :, b:].mean(axis=2)
    K1 = heads.sum(axis=1)
    K0 = K - K1
    ok = (K1 > 0) & (K0 > 0)
    if not ok.any():
        raise EstimationError("no day has blocks of both arms")
    if not ok.all():
        warnings.warn(f"burn-in estimator excluded {int((~ok).sum())} day(s) lacking one arm")
    treat = (kept * heads).sum(axis=1)[ok] / K1[ok]
    ctrl = (kept * (1 - heads)).sum(axis=1)[ok] / K0[ok]
    return float(np.mean(treat - ctrl))


def estimate_simple_is(panel: Panel) -> float:
    """``(4 / nT) sum_{i,t} (A_it - 1/2) R_it``."""
    A = panel.actions.astype(float)
    return float(4.0 * np.sum((A - 0.5) * panel.rewards) / panel.actions.size)
