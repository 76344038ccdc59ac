import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from currigraph.graph import Graph, generate_sbm_pair

torch.set_num_threads(1)

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_graph(n: int, p: float, d: int, seed: int, name: str = "g") -> Graph:
    rng = np.random.default_rng(seed)
    rows, cols = np.triu_indices(n, k=1)
    keep = rng.random(rows.size) < p
    return Graph(n, np.stack([rows[keep], cols[keep]], axis=1), rng.standard_normal((n, d)),
                 rng.integers(0, 3, size=n), 3, name)


@pytest.fixture
def tiny_pair():
    """12-node source/target with distinct feature widths, small enough for finite differences."""
    return random_graph(12, 0.3, 4, 1, "tiny_source"), random_graph(11, 0.3, 3, 2, "tiny_target")


@pytest.fixture(scope="session")
def small_sbm():
    return generate_sbm_pair([10, 10, 10], [10, 10, 10], 0.5, 0.05, 0.5, seed=3, feature_dim=8)


# filled by test_acceptance.py, printed once at the end of the session
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num}. {title}: {detail}")
