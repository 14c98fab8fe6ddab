"""
Benchmark problems: a smooth solution with a goal supported in a corner
triangle of the unit square, and a corner singularity on a Z-shaped domain.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import GoalData, ProblemData
from .mesh import DIRICHLET, NEUMANN, Mesh, _build_edges, build_initial

ZSHAPE_EXPONENT = 4 / 7
ZSHAPE_PHASE = 3 * np.pi / 7


@dataclass(frozen=True)
class BenchmarkProblem:
    name: str
    mesh: Mesh
    data: ProblemData
    goal: GoalData
    exact_goal: float
    note: str = ""


def boundary_edges(triangles, n_vertices=None):
    """Edges that belong to exactly one triangle."""
    triangles = np.asarray(triangles, dtype=np.int64)
    n = int(triangles.max()) + 1 if n_vertices is None else n_vertices
    edges, _, _, counts = _build_edges(triangles, n)
    return edges[counts == 1]


def label_boundary(vertices, triangles, is_dirichlet):
    """Label every boundary edge ``D`` if ``is_dirichlet(midpoint)``, else ``N``."""
    vertices = np.asarray(vertices, dtype=float)
    rows = []
    for a, b in boundary_edges(triangles, len(vertices)):
        mid = 0.5 * (vertices[a] + vertices[b])
        rows.append((a, b, DIRICHLET if is_dirichlet(mid) else NEUMANN))
    return rows


def _grid(xs, ys):
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    return np.column_stack([X.ravel(), Y.ravel()])


def square_goal_mesh() -> Mesh:
    """16 triangles: the 2x2 grid of the unit square with both diagonals per cell."""
    h = np.array([0.0, 0.5, 1.0])
    vertices = list(map(tuple, _grid(h, h)))
    triangles = []
    for j in range(2):
        for i in range(2):
            c = [3 * j + i, 3 * j + i + 1, 3 * (j + 1) + i + 1, 3 * (j + 1) + i]
            vertices.append((0.25 + 0.5 * i, 0.25 + 0.5 * j))
            mid = len(vertices) - 1
            for s in range(4):
                triangles.append((c[s], c[(s + 1) % 4], mid))
    labels = label_boundary(vertices, triangles, lambda p: True)
    return build_initial(vertices, triangles, labels)


def problem_square_goal() -> BenchmarkProblem:
    """Unit square, ``-Laplace u = 2x(x-1) + 2y(y-1)``, homogeneous Dirichlet data.

    Goal ``G(v) = int_omega dv/dx`` over ``omega = {x + y >= 3/2}``.
    """
    data = ProblemData(f=lambda x, y: 2 * x * (x - 1) + 2 * y * (y - 1))
    goal = GoalData(gvec=lambda x, y: (-np.ones_like(x), np.zeros_like(x)),
                    region=lambda x, y: x + y > 1.5)
    return BenchmarkProblem(
        name="square-goal", mesh=square_goal_mesh(), data=data, goal=goal,
        exact_goal=11 / 960,
        note="G(u) = 11/960 for the solution u = -x(1-x)y(1-y) of -Laplace u = f")


def zshape_solution(x, y):
    r = np.hypot(x, y)
    phi = np.arctan2(y, x)
    return r ** ZSHAPE_EXPONENT * np.sin(ZSHAPE_EXPONENT * phi + ZSHAPE_PHASE)


def exact_gradient_zshape(x, y):
    """Gradient of ``r^(4/7) sin(4 phi / 7 + 3 pi / 7)``; stacked along the last axis."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    r = np.hypot(x, y)
    if np.any(r == 0):
        raise ValueError("the gradient is singular at the re-entrant corner")
    phi = np.arctan2(y, x)
    arg = ZSHAPE_EXPONENT * phi + ZSHAPE_PHASE
    radial = ZSHAPE_EXPONENT * r ** (ZSHAPE_EXPONENT - 1) * np.sin(arg)
    angular = ZSHAPE_EXPONENT * r ** (ZSHAPE_EXPONENT - 1) * np.cos(arg)
    c, s = np.cos(phi), np.sin(phi)
    return np.stack([radial * c - angular * s, radial * s + angular * c], axis=-1)


def _on_cut(p, tol=1e-12):
    x, y = p
    return x <= tol and (abs(y) <= tol or abs(y - x) <= tol)


def zshape_mesh() -> Mesh:
    """Grid of spacing 1/2 on (-1, 1)^2 minus conv{(-1,-1), (0,0), (-1,0)}.

    Mesh lines resolve the cut, the Dirichlet edges and the goal square.
    """
    h = np.linspace(-1.0, 1.0, 5)
    vertices = _grid(h, h)
    idx = lambda i, j: 5 * j + i
    triangles = []
    for j in range(4):
        for i in range(4):
            x0, y0 = h[i], h[j]
            lower = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1))
            upper = (idx(i, j), idx(i + 1, j + 1), idx(i, j + 1))
            if x0 < 0 and y0 < 0 and i == j:
                triangles.append(lower)  # diagonal cell, upper half is cut away
            elif x0 < -0.5 + 1e-12 and -0.5 - 1e-12 < y0 < 0:
                continue  # [-1, -1/2] x [-1/2, 0] lies inside the cut
            else:
                triangles += [lower, upper]
    used = np.unique(triangles)
    renumber = -np.ones(len(vertices), dtype=np.int64)
    renumber[used] = np.arange(len(used))
    vertices = vertices[used]
    triangles = renumber[np.asarray(triangles)]
    labels = label_boundary(vertices, triangles, _on_cut)
    return build_initial(vertices, triangles, labels)


def _zshape_neumann(x, y, nx, ny):
    grad = exact_gradient_zshape(x, y)
    return grad[..., 0] * nx + grad[..., 1] * ny


def problem_zshape() -> BenchmarkProblem:
    """Z-shape with ``u = r^(4/7) sin(4 phi / 7 + 3 pi / 7)``, ``f = 0``.

    Dirichlet data on the two cut edges at the re-entrant corner, Neumann
    data ``grad u . n`` elsewhere. Goal ``G(v) = int_omega dv/dx + dv/dy``
    with ``omega = (-1/2, 1/2)^2`` intersected with the domain.
    """
    data = ProblemData(f=None, neumann=_zshape_neumann)
    goal = GoalData(gvec=lambda x, y: (-np.ones_like(x), -np.ones_like(x)),
                    region=lambda x, y: (np.abs(x) < 0.5) & (np.abs(y) < 0.5))
    return BenchmarkProblem(
        name="zshape", mesh=zshape_mesh(), data=data, goal=goal,
        exact_goal=0.82962247157810,
        note="omega = (-1/2, 1/2)^2 cap domain; boundary integration of u gives 0.829622471578")


PROBLEMS = {
    "square-goal": problem_square_goal,
    "zshape": problem_zshape,
}


def get_problem(name: str) -> BenchmarkProblem:
    try:
        return PROBLEMS[name]()
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; expected one of {sorted(PROBLEMS)}") from None
