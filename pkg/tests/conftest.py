import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_spd(rng, n=None, scale=1.0, cond=10.0):
    """Random SPD tensors with eigenvalues in ``scale * [1/cond, 1]``."""
    shape = () if n is None else (n,)
    q, _ = np.linalg.qr(rng.standard_normal(shape + (3, 3)))
    w = scale * np.exp(rng.uniform(-np.log(cond), 0.0, shape + (3,)))
    return (q * w[..., None, :]) @ np.swapaxes(q, -1, -2)


def random_sym(rng, n=None):
    shape = () if n is None else (n,)
    a = rng.standard_normal(shape + (3, 3))
    return 0.5 * (a + np.swapaxes(a, -1, -2))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def batch_se(x, n_batches=50):
    """Standard error of the mean of a correlated chain by batch means."""
    x = np.asarray(x, dtype=float)
    m = len(x) // n_batches
    means = x[: m * n_batches].reshape(n_batches, m, *x.shape[1:]).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
