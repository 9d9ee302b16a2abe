import numpy as np
import pytest

from coupled_pimh.models import LinearGaussianModel, LinearGaussianParams, kalman_oracle, simulate_ssm


def zscore(sample, truth):
    sample = np.asarray(sample, dtype=float)
    se = sample.std(ddof=1, axis=0) / np.sqrt(sample.shape[0])
    return (sample.mean(axis=0) - truth) / se


@pytest.fixture(scope="session")
def ar1_short():
    """AR(1) with default parameters, T=20, reference data seed."""
    model = LinearGaussianModel()
    _, obs = simulate_ssm(model, 20, np.random.default_rng(10))
    return model, obs, kalman_oracle(LinearGaussianParams(), obs)


@pytest.fixture(scope="session")
def ar1_tiny():
    model = LinearGaussianModel()
    _, obs = simulate_ssm(model, 5, np.random.default_rng(3))
    return model, obs, kalman_oracle(LinearGaussianParams(), obs)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
