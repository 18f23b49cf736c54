import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from blocktensor.grid_comm import ProcessGrid

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

# filled by test_acceptance, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])


def naive_matmul(a, b):
    """Triple-loop product, k innermost, left to right."""
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(kk):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def rel_err(got, want):
    scale = np.linalg.norm(want)
    diff = np.linalg.norm(got - want)
    return diff / scale if scale else diff


def random_sizes(rng, total, lo=1, hi=9):
    sizes, left = [], total
    while left > 0:
        s = min(int(rng.integers(lo, hi + 1)), left)
        sizes.append(s)
        left -= s
    return sizes


def square_grid(q):
    return ProcessGrid((q, q))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
