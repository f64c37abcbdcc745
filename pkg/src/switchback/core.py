"""Domain types, treatment-assignment designs and reward-error covariances."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "ConfigError",
    "EstimationError",
    "DesignSpec",
    "ErrorCovSpec",
    "LinearDgpParams",
    "Panel",
    "DiscreteMdp",
    "as_rng",
    "generate_actions",
    "covariance",
    "cov_matrix",
]

SWITCHBACK = "switchback"
ALTERNATING_DAY = "alternating_day"
BERNOULLI = "bernoulli"

AR = "ar"
MA = "ma"
EXCHANGEABLE = "exchangeable"
UNCORRELATED = "uncorrelated"


class ConfigError(ValueError):
    """Raised for an invalid experiment configuration."""


class EstimationError(RuntimeError):
    """An estimator could not be computed (singular fit, empty arm, ...)."""


def as_rng(seed) -> np.random.Generator:
    """Return a Generator from an int, SeedSequence, Generator or None."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DesignSpec:
    """Treatment-assignment scheme for a day of ``T`` intervals.

    ``kind`` is one of ``"switchback"`` (block length ``m``, start flips
    across days), ``"alternating_day"`` (switchback with ``m == T``) or
    ``"bernoulli"`` (each block head is a fresh fair coin).
    """

    kind: str
    T: int
    m: int

    def __post_init__(self):
        if self.kind not in (SWITCHBACK, ALTERNATING_DAY, BERNOULLI):
            raise ConfigError(f"unknown design kind {self.kind!r}")
        if int(self.T) < 1:
            raise ConfigError("T must be a positive integer")
        if self.kind == ALTERNATING_DAY and self.m != self.T:
            raise ConfigError("alternating-day design requires m == T")
        if int(self.m) < 1:
            raise ConfigError("m must be a positive integer")
        if self.T % self.m:
            raise ConfigError(f"m must divide T (m={self.m}, T={self.T})")

    @classmethod
    def switchback(cls, m: int, T: int) -> "DesignSpec":
        return cls(SWITCHBACK, T, m)

    @classmethod
    def alternating_day(cls, T: int) -> "DesignSpec":
        return cls(ALTERNATING_DAY, T, T)

    @classmethod
    def bernoulli(cls, m: int, T: int) -> "DesignSpec":
        return cls(BERNOULLI, T, m)

    @property
    def is_switchback(self) -> bool:
        """True for the deterministic-given-start designs (including AD)."""
        return self.kind in (SWITCHBACK, ALTERNATING_DAY)

    @property
    def n_blocks(self) -> int:
        return self.T // self.m

    def block_index(self) -> np.ndarray:
        """Zero-based block index of every interval of a day."""
        return np.arange(self.T) // self.m

    def sequence_given(self, t: int, a: int) -> np.ndarray:
        """Day-long action sequence of a switchback design with ``A_t = a``.

        ``t`` is one-based. Only defined for switchback designs, where the
        action at one interval determines the whole day.
        """
        if not self.is_switchback:
            raise ConfigError("action sequence is random under a Bernoulli design")
        k = self.block_index()
        return ((k - k[t - 1]) % 2 + a) % 2


def generate_actions(
    design: DesignSpec, n: int, seed=None, first_action: Optional[int] = None
) -> np.ndarray:
    """Draw an ``n x T`` binary action matrix under ``design``.

    For switchback designs only the first day's opening action is random;
    ``first_action`` pins it for deterministic use. Bernoulli designs draw
    every block head independently and restart the block grid each day.
    """
    if n < 1:
        raise ConfigError("n must be at least 1")
    rng = as_rng(seed)
    k = design.block_index()
    if design.is_switchback:
        a11 = int(rng.integers(2)) if first_action is None else int(first_action)
        if a11 not in (0, 1):
            raise ConfigError("first_action must be 0 or 1")
        start = (a11 + np.arange(n)) % 2
        actions = (start[:, None] + k[None, :]) % 2
    else:
        heads = rng.integers(0, 2, size=(n, design.n_blocks))
        actions = heads[:, k]
    return actions.astype(np.int8)


@dataclass(frozen=True)
class ErrorCovSpec:
    """Covariance family of the within-day reward errors.

    Use the constructors :meth:`autoregressive`, :meth:`moving_average`,
    :meth:`exchangeable` and :meth:`uncorrelated`. For every family the
    marginal variance is ``sigma2``.
    """

    family: str
    sigma2: float
    rho: float = 0.0
    K: int = 1

    def __post_init__(self):
        if self.family not in (AR, MA, EXCHANGEABLE, UNCORRELATED):
            raise ConfigError(f"unknown covariance family {self.family!r}")
        if not self.sigma2 >= 0:
            raise ConfigError("sigma2 must be non-negative")
        if self.family in (AR, EXCHANGEABLE) and not -1 < self.rho < 1:
            raise ConfigError("rho must lie in (-1, 1)")
        if self.family == MA and int(self.K) < 1:
            raise ConfigError("moving-average window K must be >= 1")

    @classmethod
    def autoregressive(cls, rho: float, sigma2: float = 1.0) -> "ErrorCovSpec":
        return cls(AR, float(sigma2), rho=float(rho))

    @classmethod
    def moving_average(cls, K: int, sigma2: float = 1.0) -> "ErrorCovSpec":
        return cls(MA, float(sigma2), K=int(K))

    @classmethod
    def exchangeable(cls, rho: float, sigma2: float = 1.0) -> "ErrorCovSpec":
        return cls(EXCHANGEABLE, float(sigma2), rho=float(rho))

    @classmethod
    def uncorrelated(cls, sigma2: float = 1.0) -> "ErrorCovSpec":
        return cls(UNCORRELATED, float(sigma2))

    def label(self) -> str:
        if self.family in (AR, EXCHANGEABLE):
            return f"{self.family}(rho={self.rho:g})"
        if self.family == MA:
            return f"ma(K={self.K})"
        return UNCORRELATED

    def to_dict(self) -> dict:
        out = {"family": self.family, "sigma2": self.sigma2}
        if self.family in (AR, EXCHANGEABLE):
            out["rho"] = self.rho
        if self.family == MA:
            out["K"] = self.K
        return out


def _cov_lag(spec: ErrorCovSpec, t1, t2):
    lag = np.abs(np.asarray(t1) - np.asarray(t2))
    if spec.family == AR:
        return spec.sigma2 * spec.rho ** lag
    if spec.family == MA:
        return spec.sigma2 * np.maximum(spec.K - lag, 0) / spec.K
    if spec.family == EXCHANGEABLE:
        return spec.sigma2 * np.where(lag == 0, 1.0, spec.rho)
    return spec.sigma2 * (lag == 0).astype(float)


def covariance(spec: ErrorCovSpec, t1: int, t2: int) -> float:
    """Covariance of the reward errors at intervals ``t1`` and ``t2``."""
    return float(_cov_lag(spec, t1, t2))


def cov_matrix(spec: ErrorCovSpec, T: int) -> np.ndarray:
    """The ``T x T`` reward-error covariance matrix.

    Raises
    ------
    ConfigError
        If the parameterisation is not positive semi-definite for this
        ``T`` (only possible for a negative exchangeable correlation).
    """
    if T < 1:
        raise ConfigError("T must be >= 1")
    if spec.family == EXCHANGEABLE and T > 1 and spec.rho < -1.0 / (T - 1):
        raise ConfigError(
            f"exchangeable rho={spec.rho} is below the PSD limit -1/(T-1) for T={T}"
        )
    t = np.arange(1, T + 1)
    M = _cov_lag(spec, t[:, None], t[None, :]).astype(float)
    if np.linalg.eigvalsh(M)[0] < -1e-10 * max(1.0, spec.sigma2):
        raise ConfigError(f"{spec.label()} is not positive semi-definite for T={T}")
    return M


@dataclass(frozen=True)
class LinearDgpParams:
    """Time-indexed coefficients of the linear reward and transition model.

    Reward coefficients (``alpha``, ``beta``, ``gamma``) have length ``T``;
    transition coefficients (``phi``, ``Phi``, ``Gamma``) have length
    ``T - 1``, one per step ``S_t -> S_{t+1}``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    phi: np.ndarray
    Phi: np.ndarray
    Gamma: np.ndarray
    state_noise_cov: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray
    reward_cov: ErrorCovSpec = field(default_factory=lambda: ErrorCovSpec.autoregressive(0.9, 1.5))
    carryover_shift: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "phi", "Phi", "Gamma",
                     "state_noise_cov", "init_mean", "init_cov"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        T, d = self.T, self.d
        expect = {
            "alpha": (T,), "beta": (T, d), "gamma": (T,),
            "phi": (T - 1, d), "Phi": (T - 1, d, d), "Gamma": (T - 1, d),
            "state_noise_cov": (d, d), "init_mean": (d,), "init_cov": (d, d),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}"
                )

    @property
    def T(self) -> int:
        return self.alpha.shape[0]

    @property
    def d(self) -> int:
        return self.beta.shape[1]

    def max_spectral_norm(self) -> float:
        """Largest spectral norm over the transition matrices."""
        if self.T < 2:
            return 0.0
        return float(np.linalg.norm(self.Phi, ord=2, axis=(1, 2)).max())

    def replace(self, **changes) -> "LinearDgpParams":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return type(self)(**kw)


@dataclass(frozen=True)
class Panel:
    """``n`` i.i.d. days of (state, action, reward) over ``T`` intervals.

    ``next_states[:, t]`` is ``S_{t+1}``. Its last column is ``S_{T+1}``
    when the generator simulated it and NaN otherwise; no estimator reads
    it because the value after the horizon is zero.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: Optional[np.ndarray] = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 2:
            states = states[:, :, None]
        object.__setattr__(self, "states", _frozen(states))
        object.__setattr__(self, "actions", _frozen(self.actions, dtype=np.int8))
        object.__setattr__(self, "rewards", _frozen(self.rewards))
        n, T, d = self.states.shape
        if self.actions.shape != (n, T) or self.rewards.shape != (n, T):
            raise ConfigError("states, actions and rewards disagree on (n, T)")
        if not np.isin(self.actions, (0, 1)).all():
            raise ConfigError("actions must be binary")
        if self.next_states is None:
            nxt = np.full_like(self.states, np.nan)
            nxt[:, :-1] = self.states[:, 1:]
        else:
            nxt = np.asarray(self.next_states, dtype=float)
            if nxt.shape != (n, T, d):
                raise ConfigError("next_states must have the shape of states")
        object.__setattr__(self, "next_states", _frozen(nxt))

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def T(self) -> int:
        return self.states.shape[1]

    @property
    def d(self) -> int:
        return self.states.shape[2]

    def take(self, days) -> "Panel":
        """Sub-panel (or resample) of the given day indices."""
        days = np.asarray(days)
        return Panel(self.states[days], self.actions[days], self.rewards[days],
                     self.next_states[days])


@dataclass(frozen=True)
class DiscreteMdp:
    """Finite-state, finite-horizon MDP with binary actions.

    ``transitions[t, a]`` is the row-stochastic ``S x S`` matrix of step
    ``t -> t+1`` (``T - 1`` steps); ``rewards[t, a]`` the mean reward vector.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    init_dist: np.ndarray

    def __post_init__(self):
        for name in ("transitions", "rewards", "init_dist"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        T, _, S = self.rewards.shape
        if self.transitions.shape != (T - 1, 2, S, S):
            raise ConfigError(
                f"transitions must have shape {(T - 1, 2, S, S)}, got {self.transitions.shape}"
            )
        if self.init_dist.shape != (S,):
            raise ConfigError("init_dist must have length S")
        if (self.transitions < 0).any() or (self.init_dist < 0).any():
            raise ConfigError("probabilities must be non-negative")
        if T > 1 and np.abs(self.transitions.sum(-1) - 1).max() > 1e-12:
            raise ConfigError("transition rows must sum to 1")
        if abs(self.init_dist.sum() - 1) > 1e-12:
            raise ConfigError("init_dist must sum to 1")

    @property
    def T(self) -> int:
        return self.rewards.shape[0]

    @property
    def S(self) -> int:
        return self.rewards.shape[2]
