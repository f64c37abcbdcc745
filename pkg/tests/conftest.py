from __future__ import annotations

import numpy as np
import pytest

from switchback import DesignSpec, ErrorCovSpec, LinearDgpParams, draw_params, generate_actions, simulate


def make_params(T=6, d=2, seed=0, *, shift=0.0, sigma2=1.5, rho=0.9, noise=1.5, **changes):
    """Small linear model for fast tests; keyword changes override fields."""
    p = draw_params(T, d, seed, reward_cov=ErrorCovSpec.autoregressive(rho, sigma2),
                    carryover_shift=shift, state_noise_var=noise)
    return p.replace(**changes) if changes else p


def make_panel(params, m=1, n=20, seed=0, kind="switchback"):
    design = DesignSpec(kind, params.T, params.T if kind == "alternating_day" else m)
    actions = generate_actions(design, n, np.random.default_rng([seed, 1]))
    return simulate(params, actions, np.random.default_rng([seed, 2])), design


def noiseless(params: LinearDgpParams) -> LinearDgpParams:
    return params.replace(
        reward_cov=ErrorCovSpec.uncorrelated(0.0),
        state_noise_cov=np.zeros_like(params.state_noise_cov),
    )


@pytest.fixture
def small_params():
    return make_params()


ACCEPTANCE_LINES = []


def record_criterion(k: int, ok: bool, detail: str) -> bool:
    """Print and keep one pass/fail line for an acceptance criterion."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append((k, line))
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES, key=lambda x: x[0]):
            terminalreporter.write_line(line)
