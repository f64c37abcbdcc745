"""Panel generators and ground-truth oracles.

Three environments produce panels: the linear Gaussian model, the same
transitions with a nonlinear reward, and a wild-bootstrap environment
fitted to an A/A panel (all actions at baseline).
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .core import (
    AR,
    MA,
    UNCORRELATED,
    ConfigError,
    DesignSpec,
    ErrorCovSpec,
    LinearDgpParams,
    Panel,
    as_rng,
    cov_matrix,
    generate_actions,
)

__all__ = [
    "NonlinearDgpParams",
    "BootstrapEnv",
    "draw_params",
    "sample_reward_errors",
    "simulate_linear",
    "simulate_nonlinear",
    "simulate",
    "linear_ate",
    "true_ate_linear",
    "true_ate_mc",
    "fit_bootstrap_env",
    "simulate_bootstrap",
    "synthetic_aa_panel",
    "gcv_ridge",
    "GCV_GRID",
    "write_panel",
    "read_panel",
]

GCV_GRID = np.logspace(-8, 2, 25)


class NonlinearDgpParams(LinearDgpParams):
    """Linear transitions with the sin/cos reward surface.

    ``r_t(a, s) = alpha_t + 2 beta_t' [sin(s a) + cos(s)]^2
    + 3 (beta_t' s) gamma_t a + [a gamma_t + cos(a gamma_t)]^2``
    with element-wise trigonometric functions.
    """


def _signed_uniform(rng, lo, hi, size):
    mag = rng.uniform(lo, hi, size=size)
    return np.where(rng.random(size) < 0.5, -mag, mag)


def draw_params(
    T: int = 48,
    d: int = 3,
    seed=None,
    *,
    reward_cov: Optional[ErrorCovSpec] = None,
    carryover_shift: float = 0.0,
    nonlinear: bool = False,
    state_noise_var: float = 1.5,
) -> LinearDgpParams:
    """Draw a coefficient set from the simulation-study laws.

    intercepts and transition intercepts are symmetric mixtures of
    U[0.5, 1]; state effects mix U[0.1, 0.3]; direct effects U[0.5, 0.8];
    carryover entries N(carryover_shift, 0.3^2); transition matrices have
    U[-0.3, 0.3] entries (U[-0.6, 0.6] for the nonlinear model).
    """
    rng = as_rng(seed)
    if reward_cov is None:
        reward_cov = ErrorCovSpec.autoregressive(0.9, 1.5)
    bound = 0.6 if nonlinear else 0.3
    alpha = _signed_uniform(rng, 0.5, 1.0, T)
    beta = _signed_uniform(rng, 0.1, 0.3, (T, d))
    gamma = rng.uniform(0.5, 0.8, T)
    Gamma = rng.normal(carryover_shift, 0.3, (T - 1, d))
    Phi = rng.uniform(-bound, bound, (T - 1, d, d))
    phi = _signed_uniform(rng, 0.5, 1.0, (T - 1, d))
    cls = NonlinearDgpParams if nonlinear else LinearDgpParams
    return cls(
        alpha=alpha, beta=beta, gamma=gamma, phi=phi, Phi=Phi, Gamma=Gamma,
        state_noise_cov=state_noise_var * np.eye(d),
        init_mean=np.zeros(d), init_cov=np.eye(d),
        reward_cov=reward_cov, carryover_shift=carryover_shift,
    )


def _psd_factor(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(M)
    return V * np.sqrt(np.clip(w, 0.0, None))


def sample_reward_errors(spec: ErrorCovSpec, T: int, seed=None, size: Optional[int] = None):
    """Zero-mean Gaussian error vector(s) with covariance ``cov_matrix(spec, T)``.

    The autoregressive family is built by recursion from a stationary start
    and the moving average as a scaled sliding sum of ``T + K`` innovations;
    other families use a symmetric square root of the covariance matrix.
    Returns shape ``(T,)`` or ``(size, T)``.
    """
    rng = as_rng(seed)
    n = 1 if size is None else int(size)
    if spec.family == AR:
        z = rng.standard_normal((n, T))
        e = np.empty((n, T))
        sd = np.sqrt(spec.sigma2)
        e[:, 0] = sd * z[:, 0]
        innov = sd * np.sqrt(1.0 - spec.rho ** 2)
        for t in range(1, T):
            e[:, t] = spec.rho * e[:, t - 1] + innov * z[:, t]
    elif spec.family == MA:
        K = spec.K
        eps = np.sqrt(spec.sigma2) * rng.standard_normal((n, T + K))
        # one-based e_t sums eps_{t+1..t+K}: zero-based columns t..t+K-1
        csum = np.concatenate([np.zeros((n, 1)), np.cumsum(eps, axis=1)], axis=1)
        t = np.arange(1, T + 1)
        e = (csum[:, t + K] - csum[:, t]) / np.sqrt(K)
    elif spec.family == UNCORRELATED:
        e = np.sqrt(spec.sigma2) * rng.standard_normal((n, T))
    else:
        L = _psd_factor(cov_matrix(spec, T))
        e = rng.standard_normal((n, T)) @ L.T
    return e[0] if size is None else e


def _check_actions(params: LinearDgpParams, actions) -> np.ndarray:
    actions = np.asarray(actions)
    if actions.ndim != 2 or actions.shape[1] != params.T:
        raise ConfigError(
            f"actions must have shape (n, {params.T}), got {actions.shape}"
        )
    return actions


def _nonlinear_reward(alpha, beta, gamma, s, a):
    a_col = a[:, None]
    trig = (np.sin(s * a_col) + np.cos(s)) ** 2
    ag = a * gamma
    return alpha + 2 * trig @ beta + 3 * (s @ beta) * gamma * a + (ag + np.cos(ag)) ** 2


def _rollout(params: LinearDgpParams, actions, rng, nonlinear: bool) -> Panel:
    actions = _check_actions(params, actions)
    n, T, d = actions.shape[0], params.T, params.d
    init_L = _psd_factor(params.init_cov)
    noise_L = _psd_factor(params.state_noise_cov)
    s = params.init_mean + rng.standard_normal((n, d)) @ init_L.T
    errors = sample_reward_errors(params.reward_cov, T, rng, size=n)
    E = rng.standard_normal((n, max(T - 1, 0), d)) @ noise_L.T
    states = np.empty((n, T, d))
    rewards = np.empty((n, T))
    a_f = actions.astype(float)
    for t in range(T):
        states[:, t] = s
        a = a_f[:, t]
        if nonlinear:
            mean = _nonlinear_reward(params.alpha[t], params.beta[t], params.gamma[t], s, a)
        else:
            mean = params.alpha[t] + s @ params.beta[t] + params.gamma[t] * a
        rewards[:, t] = mean + errors[:, t]
        if t < T - 1:
            s = params.phi[t] + s @ params.Phi[t].T + np.outer(a, params.Gamma[t]) + E[:, t]
    return Panel(states, actions, rewards)


def simulate_linear(params: LinearDgpParams, actions, seed=None) -> Panel:
    """Roll out ``n`` days of the linear model under the given actions.

    Draw order from the stream is fixed (initial states, reward errors,
    state noise), so two action matrices with the same seed share all noise.
    """
    return _rollout(params, actions, as_rng(seed), nonlinear=False)


def simulate_nonlinear(params: LinearDgpParams, actions, seed=None) -> Panel:
    """Same as :func:`simulate_linear` with the nonlinear reward surface."""
    return _rollout(params, actions, as_rng(seed), nonlinear=True)


def simulate(params, actions, seed=None) -> Panel:
    """Dispatch on the parameter type (nonlinear params get the nonlinear reward)."""
    if isinstance(params, NonlinearDgpParams):
        return simulate_nonlinear(params, actions, seed)
    return simulate_linear(params, actions, seed)


def linear_ate(beta, gamma, Phi, Gamma) -> float:
    """Direct plus carryover effect of always-treat over never-treat.

    ``mean(gamma) + (1/T) sum_{t>=2} beta_t' sum_{k<t} Phi_{t-1}...Phi_{k+1} Gamma_k``.
    """
    beta = np.asarray(beta)
    T = beta.shape[0]
    carry = np.zeros(beta.shape[1])
    total = float(np.sum(gamma))
    for t in range(1, T):
        carry = Phi[t - 1] @ carry + Gamma[t - 1]
        total += float(beta[t] @ carry)
    return total / T


def true_ate_linear(params: LinearDgpParams) -> float:
    """Closed-form ATE of the linear model."""
    return linear_ate(params.beta, params.gamma, params.Phi, params.Gamma)


def true_ate_mc(params, reps: int, seed=None, chunk: int = 50_000) -> Tuple[float, float]:
    """Monte Carlo ATE and its standard error.

    Each simulated day is run under both constant policies with shared noise;
    the per-day contrast of average rewards is averaged over ``reps`` days.
    Works for linear, nonlinear and bootstrap environments.
    """
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    rng = as_rng(seed)
    T = params.T
    diffs = []
    done = 0
    while done < reps:
        size = min(chunk, reps - done)
        state = rng.bit_generator.state
        if isinstance(params, BootstrapEnv):
            r1 = simulate_bootstrap(params, None, size, rng, actions=np.ones((size, T), np.int8))
            rng.bit_generator.state = state
            r0 = simulate_bootstrap(params, None, size, rng, actions=np.zeros((size, T), np.int8))
        else:
            r1 = simulate(params, np.ones((size, T), np.int8), rng)
            rng.bit_generator.state = state
            r0 = simulate(params, np.zeros((size, T), np.int8), rng)
        diffs.append(r1.rewards.mean(axis=1) - r0.rewards.mean(axis=1))
        done += size
    diffs = np.concatenate(diffs)
    se = float(diffs.std(ddof=1) / np.sqrt(reps)) if reps > 1 else float("nan")
    return float(diffs.mean()), se


# ---------------------------------------------------------------- bootstrap env


def gcv_ridge(X: np.ndarray, y: np.ndarray, grid: np.ndarray = GCV_GRID):
    """Ridge regression of ``y`` on ``[1, X]`` with the penalty chosen by GCV.

    The intercept is not penalised. Ties in the GCV score go to the smaller
    penalty. Returns ``(intercept, slopes, penalty)``.
    """
    n = X.shape[0]
    xm, ym = X.mean(axis=0), y.mean()
    Xc, yc = X - xm, y - ym
    U, sv, Vt = np.linalg.svd(Xc, full_matrices=False)
    Uty = U.T @ yc
    resid_perp = yc @ yc - Uty @ Uty
    best = None
    for lam in grid:
        shrink = sv ** 2 / (sv ** 2 + lam)
        rss = resid_perp + np.sum(((1 - shrink) * Uty) ** 2)
        df = 1.0 + shrink.sum()
        denom = (1.0 - df / n) ** 2
        score = (rss / n) / denom if denom > 0 else np.inf
        if best is None or score < best[0] - 1e-12 * abs(best[0]):
            best = (score, lam)
    lam = best[1]
    coef = Vt.T @ (sv / (sv ** 2 + lam) * Uty)
    return float(ym - xm @ coef), coef, float(lam)


@dataclass(frozen=True)
class BootstrapEnv:
    """Linear environment fitted to an A/A panel with wild-bootstrap noise.

    ``reward_resid`` is ``N x T``, ``state_resid`` is ``N x (T-1) x d`` and
    ``init_states`` holds the ``N`` observed opening states.
    """

    alpha: np.ndarray
    beta: np.ndarray
    phi: np.ndarray
    Phi: np.ndarray
    gamma: np.ndarray
    Gamma: np.ndarray
    reward_resid: np.ndarray
    state_resid: np.ndarray
    init_states: np.ndarray
    delta1: float
    delta2: float
    reward_penalty: np.ndarray
    state_penalty: np.ndarray

    @property
    def N(self) -> int:
        return self.reward_resid.shape[0]

    @property
    def T(self) -> int:
        return self.alpha.shape[0]

    @property
    def d(self) -> int:
        return self.beta.shape[1]

    def true_ate(self) -> float:
        """Exact ATE: the bootstrap noise has mean zero given the day draw."""
        return linear_ate(self.beta, self.gamma, self.Phi, self.Gamma)

    def baseline_value(self) -> float:
        """Average per-interval reward under the never-treat policy."""
        s = self.init_states.mean(axis=0)
        total = 0.0
        for t in range(self.T):
            total += self.alpha[t] + s @ self.beta[t]
            if t < self.T - 1:
                s = self.phi[t] + self.Phi[t] @ s
        return total / self.T


def fit_bootstrap_env(source: Panel, delta1: float, delta2: float) -> BootstrapEnv:
    """Fit per-interval GCV ridge models to an A/A panel.

    Rewards are regressed on ``(1, S_t)`` and each next-state coordinate on
    ``(1, S_t)``. Treatment effects are synthetic: ``gamma_t`` is ``delta1``
    percent of the interval's mean reward and ``Gamma_t`` is ``delta2``
    percent of the interval's mean state.
    """
    if np.any(source.actions != 0):
        raise ConfigError("bootstrap source must be an A/A panel (all actions 0)")
    N, T, d = source.states.shape
    if N < d + 2:
        raise ConfigError(f"need at least d+2={d + 2} source days, got {N}")
    S, R = source.states, source.rewards
    alpha = np.empty(T)
    beta = np.empty((T, d))
    r_pen = np.empty(T)
    for t in range(T):
        alpha[t], beta[t], r_pen[t] = gcv_ridge(S[:, t], R[:, t])
    phi = np.empty((T - 1, d))
    Phi = np.empty((T - 1, d, d))
    s_pen = np.empty((T - 1, d))
    for t in range(T - 1):
        for j in range(d):
            phi[t, j], Phi[t, j], s_pen[t, j] = gcv_ridge(S[:, t], S[:, t + 1, j])
    e_hat = R - alpha - np.einsum("ntd,td->nt", S, beta)
    E_hat = S[:, 1:] - phi - np.einsum("tjk,ntk->ntj", Phi, S[:, :-1])
    gamma = delta1 * R.sum(axis=0) / (100.0 * N)
    Gamma = delta2 * S[:, :-1].sum(axis=0) / (100.0 * N)
    return BootstrapEnv(
        alpha=alpha, beta=beta, phi=phi, Phi=Phi, gamma=gamma, Gamma=Gamma,
        reward_resid=e_hat, state_resid=E_hat, init_states=S[:, 0].copy(),
        delta1=float(delta1), delta2=float(delta2),
        reward_penalty=r_pen, state_penalty=s_pen,
    )


def simulate_bootstrap(
    env: BootstrapEnv,
    design: Optional[DesignSpec],
    n: int,
    seed=None,
    *,
    actions: Optional[np.ndarray] = None,
    xi: Optional[np.ndarray] = None,
) -> Panel:
    """Generate ``n`` days from the bootstrap environment.

    Each day resamples a source day ``I`` and a multiplier ``xi ~ N(0, 1)``;
    the day's reward and state residual paths are ``xi * e_hat[I]`` and
    ``xi * E_hat[I]``, keeping the within-day error correlation intact.
    Actions come from ``design`` unless given explicitly.
    """
    rng = as_rng(seed)
    T, d = env.T, env.d
    if actions is None:
        if design is None:
            raise ConfigError("either design or actions is required")
        actions = generate_actions(design, n, rng)
    actions = np.asarray(actions)
    if actions.shape != (n, T):
        raise ConfigError(f"actions must have shape ({n}, {T})")
    idx = rng.integers(env.N, size=n)
    if xi is None:
        xi = rng.standard_normal(n)
    xi = np.broadcast_to(np.asarray(xi, dtype=float), (n,))
    s = env.init_states[idx]
    states = np.empty((n, T, d))
    rewards = np.empty((n, T))
    a_f = actions.astype(float)
    for t in range(T):
        states[:, t] = s
        a = a_f[:, t]
        rewards[:, t] = (env.alpha[t] + s @ env.beta[t] + env.gamma[t] * a
                         + xi * env.reward_resid[idx, t])
        if t < T - 1:
            s = (env.phi[t] + s @ env.Phi[t].T + np.outer(a, env.Gamma[t])
                 + xi[:, None] * env.state_resid[idx, t])
    return Panel(states, actions, rewards)


def synthetic_aa_panel(
    N: int = 40,
    T: int = 24,
    d: int = 2,
    seed=None,
    reward_cov: Optional[ErrorCovSpec] = None,
) -> Panel:
    """A stand-in A/A panel: linear-model days run entirely at baseline."""
    rng = as_rng(seed)
    if reward_cov is None:
        reward_cov = ErrorCovSpec.autoregressive(0.7, 1.5)
    params = draw_params(T, d, rng, reward_cov=reward_cov)
    return simulate_linear(params, np.zeros((N, T), np.int8), rng)


# ---------------------------------------------------------------- panel file IO


def write_panel(panel: Panel, path) -> None:
    """Write a panel as CSV rows ``day,t,s1..sd,a,r`` (one-based day and t)."""
    n, T, d = panel.states.shape
    header = ",".join(["day", "t"] + [f"s{j + 1}" for j in range(d)] + ["a", "r"])
    day = np.repeat(np.arange(1, n + 1), T)
    t = np.tile(np.arange(1, T + 1), n)
    buf = io.StringIO()
    buf.write(header + "\n")
    S = panel.states.reshape(n * T, d)
    A = panel.actions.reshape(-1)
    R = panel.rewards.reshape(-1)
    for k in range(n * T):
        fields = [str(day[k]), str(t[k])] + [repr(float(v)) for v in S[k]]
        fields += [str(int(A[k])), repr(float(R[k]))]
        buf.write(",".join(fields) + "\n")
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_panel(path) -> Panel:
    """Read a panel written by :func:`write_panel` (rows in any order)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if header[:2] != ["day", "t"] or header[-2:] != ["a", "r"]:
        raise ConfigError(f"{path}: header must be day,t,s1..sd,a,r")
    d = len(header) - 4
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    day = data[:, 0].astype(int)
    t = data[:, 1].astype(int)
    n, T = day.max(), t.max()
    if data.shape[0] != n * T:
        raise ConfigError(f"{path}: expected {n * T} rows for a complete panel")
    states = np.empty((n, T, d))
    actions = np.empty((n, T), dtype=np.int8)
    rewards = np.empty((n, T))
    states[day - 1, t - 1] = data[:, 2:2 + d]
    actions[day - 1, t - 1] = data[:, 2 + d]
    rewards[day - 1, t - 1] = data[:, 3 + d]
    return Panel(states, actions, rewards)
