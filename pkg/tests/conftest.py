import numpy as np
import pytest

from evacontrol.checks import default_check_config
from evacontrol.mesh import EXIT, WALL, TriMesh
from evacontrol.scenario import build


@pytest.fixture(scope="session")
def check_scenario():
    """Coarse 8 x 6 room, about 200 triangles, N = 20, two agents."""
    return build(default_check_config())


@pytest.fixture(scope="session")
def check_traj(check_scenario):
    from evacontrol.forward import forward_sweep
    sc = check_scenario
    return forward_sweep(sc.disc, sc.controls, sc.rho0, sc.x0)


def two_triangle_mesh():
    """Skewed quadrilateral split along (0, 2); the bottom edge is an exit."""
    v = np.array([[0.0, 0.0], [1.0, 0.0], [1.2, 0.9], [0.1, 1.0]])
    t = np.array([[0, 1, 2], [0, 2, 3]])
    edges = np.array([[0, 1], [1, 2], [2, 3], [3, 0]])
    tags = np.array([EXIT, WALL, WALL, WALL])
    return TriMesh(v, t, edges, tags)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one PASS/FAIL/WARN line per acceptance criterion; printed in the terminal summary."""

    def record(name, passed, detail, soft=False):
        status = "PASS" if passed else ("WARN" if soft else "FAIL")
        line = f"[{status}] {name}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
