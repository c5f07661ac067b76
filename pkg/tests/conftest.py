import itertools

import numpy as np
import pytest

from peelfem.mesh import TetrahedralMesh

ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


# Kuhn subdivision of the unit cube into 6 tetrahedra along the main diagonal.
_KUHN = [(0, 1, 3, 7), (0, 1, 5, 7), (0, 2, 3, 7), (0, 2, 6, 7), (0, 4, 5, 7), (0, 4, 6, 7)]


def cube_mesh(n: int, h: float = 1.0, labeler=None, conductivities=None) -> TetrahedralMesh:
    """``n**3`` cubes of side ``h``, each split into 6 tetrahedra."""
    idx = np.arange((n + 1) ** 3).reshape(n + 1, n + 1, n + 1)
    g = np.arange(n + 1) * h
    nodes = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    tets = []
    for i, j, k in itertools.product(range(n), repeat=3):
        corner = [idx[i + a, j + b, k + c] for a, b, c in itertools.product((0, 1), repeat=3)]
        # corner index bits: a*4 + b*2 + c
        tets.extend([[corner[v] for v in t] for t in _KUHN])
    tets = np.array(tets)
    if labeler is None:
        labels = np.ones(len(tets), dtype=int)
    else:
        labels = np.array([labeler(c) for c in nodes[tets].mean(axis=1)])
    cond = conductivities or {int(k): 1.0 for k in np.unique(labels)}
    return TetrahedralMesh(nodes, tets, labels, cond)


@pytest.fixture
def unit_tet():
    nodes = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    return TetrahedralMesh(nodes, [[0, 1, 2, 3]], [1], {1: 1.0})


@pytest.fixture
def bi_tet():
    nodes = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1.0]])
    return TetrahedralMesh(nodes, [[0, 1, 2, 3], [1, 2, 3, 4]], [1, 1], {1: 1.0})


@pytest.fixture
def layered_cube():
    """4x4x4 cube mesh (384 tetra) with a central 2x2x2 compartment 2."""
    def lab(c):
        return 2 if np.all((c > 1) & (c < 3)) else 1
    return cube_mesh(4, 1.0, lab, {1: 1.0, 2: 0.5})


@pytest.fixture(scope="session")
def ary_coarse():
    from peelfem.sphere import ShellSpec, generate_sphere_mesh
    return generate_sphere_mesh(ShellSpec.ary(), 10.0)
