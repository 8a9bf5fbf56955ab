import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def se_kernel(A, B, lengthscales, variance):
    """Independent squared-exponential kernel used as a test oracle."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    ls = np.asarray(lengthscales, dtype=float)
    diff = (A[:, None, :] - B[None, :, :]) / ls
    return variance * np.exp(-0.5 * (diff**2).sum(-1))


def dense_posterior(X, y, noise_diag, Xs, lengthscales, variance):
    """Posterior mean, variance and covariance by plain dense solves."""
    S = se_kernel(X, X, lengthscales, variance) + np.diag(noise_diag)
    Ks = se_kernel(Xs, X, lengthscales, variance)
    mean = Ks @ np.linalg.solve(S, y)
    cov = se_kernel(Xs, Xs, lengthscales, variance) - Ks @ np.linalg.solve(S, Ks.T)
    return mean, np.diag(cov).copy(), cov


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from tests import acceptance_jobs

    if acceptance_jobs.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_jobs.VERDICTS:
            terminalreporter.write_line(line)
