import numpy as np
import pytest

from edmddl.data import TimeSeriesDataset


def linear_dataset(A, n_pairs=500, seed=0, box=1.0):
    rng = np.random.default_rng(seed)
    A = np.asarray(A, dtype=float)
    x = rng.uniform(-box, box, size=(n_pairs, A.shape[0]))
    return TimeSeriesDataset.from_pairs(x, x @ A.T)


@pytest.fixture
def upper_triangular_data():
    return linear_dataset([[0.9, 0.1], [0.0, 0.8]])


def central_difference(f, flat, eps=1e-5):
    out = np.empty_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = eps
        out[i] = (f(flat + e) - f(flat - e)) / (2 * eps)
    return out


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_LINES, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
