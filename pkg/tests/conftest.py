import numpy as np
import pytest

from goafem.bench import label_boundary
from goafem.mesh import build_initial


def square_mesh(label="D", diagonals=2):
    """Unit square split by one (``diagonals=1``) or both diagonals."""
    if diagonals == 1:
        verts = [(0, 0), (1, 0), (1, 1), (0, 1)]
        tris = [(0, 1, 2), (0, 2, 3)]
    else:
        verts = [(0, 0), (1, 0), (1, 1), (0, 1), (0.5, 0.5)]
        tris = [(0, 1, 4), (1, 2, 4), (2, 3, 4), (3, 0, 4)]
    rule = label if callable(label) else (lambda p: label == "D")
    return build_initial(verts, tris, label_boundary(verts, tris, rule))


def right_triangle(label="N"):
    verts = [(0, 0), (1, 0), (0, 1)]
    return build_initial(verts, [(0, 1, 2)], [(0, 1, label), (1, 2, label), (2, 0, label)])


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def unit_square():
    return square_mesh()


ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(line)
