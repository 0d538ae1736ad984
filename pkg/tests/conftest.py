from pathlib import Path

import numpy as np
import pytest

from funcqr.design import ClusterRecord, LongitudinalDataset
from funcqr.simgen import SimScenario, generate

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures():
    return FIXTURES


def toy_dataset(sizes=(2, 1, 2), h=11, seed=0, t_domain=(0.0, 10.0)):
    rng = np.random.default_rng(seed)
    grid = np.linspace(0, 1, h)
    clusters, start = [], 0
    for i, n in enumerate(sizes):
        clusters.append(ClusterRecord(f"k{i}", rng.normal(size=n), rng.uniform(*t_domain, n), np.arange(start, start + n)))
        start += n
    return LongitudinalDataset(clusters, grid, rng.normal(size=(start, h)), t_domain)


@pytest.fixture(scope="session")
def small_sim():
    """Small clustered dataset with a time-varying surface, tau = 0.25."""
    return generate(SimScenario(n_clusters=24, n_per_cluster=6, n_grid=30, tau=0.25, seed=11))


_ACCEPTANCE = pytest.StashKey()


@pytest.fixture
def report(request):
    """Print an acceptance line now and keep it for the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def emit(line):
        print(line)
        lines.append(line)

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
