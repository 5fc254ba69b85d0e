import numpy as np
import pytest

from staticinv import elasticity as el
from staticinv.mesh import TetMesh
from staticinv.synth import banded_material, make_block

ACCEPTANCE_LINES = []

UNIT_TET = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


@pytest.fixture
def unit_tet():
    return TetMesh(UNIT_TET, [[0, 1, 2, 3]], [0])


@pytest.fixture(scope="session")
def small_block():
    """2x2x4-cell block, 80 tets, fixed on the x- face."""
    return make_block((2, 2, 4), 0.01, "x-")


@pytest.fixture(scope="session")
def small_banded(small_block):
    return banded_material(small_block, [3e4, 2e5, 6e5])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_material(mesh, rng, c=3):
    labels = rng.integers(0, c, mesh.n_tets)
    from staticinv.mesh import build_cluster_weights
    cmap = build_cluster_weights(mesh, labels, c)
    return el.MaterialModel(10 ** rng.uniform(4, 6, c), cmap)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def wolfe_violations(history, gamma=1e-4):
    """Accepted rest-shape steps that break g(X - b d) <= g(X) - gamma b |d|^2 (d = gradient)."""
    bad = []
    for prev, cur in zip(history, history[1:]):
        if cur.phase != prev.phase or not cur.phase.startswith("rest"):
            continue
        bound = prev.objective - gamma * cur.step * prev.grad_norm ** 2
        if cur.objective > bound:
            bad.append((cur.phase, cur.iter))
    return bad
