import numpy as np
import pytest
import scipy.sparse as sp

from goafem.assembly import (CoefficientField, DofMap, assemble_operator, assemble_primal_load,
                             direct_solve, energy_norm)
from goafem.bench import get_problem
from goafem.mesh import prolongate, refine_nvb, refine_uniform
from goafem.solver import (MultilevelHierarchy, SolverBreakdown, build_hierarchy, make_preconditioner,
                           measure_contraction, pcg_init, pcg_step, precondition, residual_drift)

from conftest import square_mesh


def adaptive_meshes(problem_name, levels, seed=0, fraction=0.3):
    """Nested meshes refined at random elements near the origin-weighted corner."""
    rng = np.random.default_rng(seed)
    meshes = [get_problem(problem_name).mesh]
    for _ in range(levels):
        m = meshes[-1]
        k = max(1, int(fraction * m.n_elements))
        meshes.append(refine_nvb(m, rng.choice(m.n_elements, k, replace=False)))
    return meshes


def system(meshes, problem_name="square-goal"):
    mesh = meshes[-1]
    dofmaps = [DofMap.from_mesh(m) for m in meshes]
    op = assemble_operator(mesh, CoefficientField.laplace(mesh), dofmaps[-1])
    rhs = assemble_primal_load(mesh, get_problem(problem_name).data, dofmaps[-1])
    return op, rhs, dofmaps


def explicit_preconditioner(meshes, dofmaps):
    """Dense sum_j P_j D_j^-1 P_j^T built from hat-function interpolation matrices."""
    fine = meshes[-1]
    n = fine.n_vertices
    total = np.zeros((n, n))
    for j, mesh in enumerate(meshes):
        # columns: level-j hat functions interpolated to the finest mesh
        P = np.eye(mesh.n_vertices)
        for later in meshes[j + 1:]:
            P = np.vstack([P, 0.5 * (P[later.vertex_parents[:, 0]] + P[later.vertex_parents[:, 1]])])
        from goafem.assembly import assemble_full_operator
        d = assemble_full_operator(mesh, CoefficientField.laplace(mesh)).diagonal()
        if j == 0:
            active = dofmaps[0].free
        else:
            prev = meshes[j - 1].n_vertices
            active = np.unique(np.concatenate([np.arange(prev, mesh.n_vertices),
                                               mesh.vertex_parents.ravel()]))
            active = np.intersect1d(active, dofmaps[j].free)
        total += P[:, active] @ np.diag(1 / d[active]) @ P[:, active].T
    free = dofmaps[-1].free
    return total[np.ix_(free, free)]


# --- hierarchy ---------------------------------------------------------------

def test_depth_one_is_jacobi(rng):
    mesh = refine_uniform(square_mesh(), 2)
    dofmap = DofMap.from_mesh(mesh)
    op = assemble_operator(mesh, CoefficientField.laplace(mesh), dofmap)
    hierarchy = build_hierarchy([mesh], [dofmap])
    assert hierarchy.depth == 1
    r = rng.standard_normal(dofmap.n_free)
    assert np.allclose(precondition(hierarchy, dofmap, r), r / op.diagonal(), rtol=1e-15)


def test_uniform_refinement_new_vertices_are_midpoints():
    coarse = square_mesh(label="N")
    fine = refine_uniform(coarse, 1)
    hierarchy = build_hierarchy([coarse, fine], [DofMap.from_mesh(coarse), DofMap.from_mesh(fine)])
    new = hierarchy.new_vertices(1)
    # one bisection per element splits exactly the four outer refinement edges
    assert len(new) == 4
    mids = {tuple(0.5 * (coarse.coordinates[a] + coarse.coordinates[b])) for a, b in coarse.boundary_edges}
    assert {tuple(p) for p in fine.coordinates[new]} == mids
    # changed: the midpoints plus the four corners bounding the bisected edges
    assert set(hierarchy.changed_vertices(1)) == set(new) | {0, 1, 2, 3}


def test_depth_equals_levels():
    meshes = adaptive_meshes("zshape", 4)
    assert build_hierarchy(meshes, [DofMap.from_mesh(m) for m in meshes]).depth == 5


def test_non_nested_input_is_rejected():
    a = square_mesh()
    b = refine_uniform(square_mesh(diagonals=1), 1)
    with pytest.raises(ValueError):
        build_hierarchy([a, b], [DofMap.from_mesh(a), DofMap.from_mesh(b)])


def test_unknown_coarse_option():
    with pytest.raises(ValueError):
        MultilevelHierarchy(coarse="amg")


def test_matches_explicit_galerkin_sum():
    meshes = adaptive_meshes("square-goal", 4, seed=3)
    dofmaps = [DofMap.from_mesh(m) for m in meshes]
    hierarchy = build_hierarchy(meshes, dofmaps)
    B = explicit_preconditioner(meshes, dofmaps)
    n = dofmaps[-1].n_free
    applied = np.column_stack([precondition(hierarchy, dofmaps[-1], e) for e in np.eye(n)])
    assert np.allclose(applied, B, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("coarse", ["jacobi", "exact"])
def test_preconditioner_linear_symmetric_positive(coarse, rng):
    meshes = adaptive_meshes("zshape", 5, seed=1)
    dofmaps = [DofMap.from_mesh(m) for m in meshes]
    hierarchy = build_hierarchy(meshes, dofmaps, coarse=coarse)
    B = lambda r: precondition(hierarchy, dofmaps[-1], r)
    n = dofmaps[-1].n_free
    for _ in range(5):
        r, s = rng.standard_normal((2, n))
        a = rng.standard_normal()
        assert np.allclose(B(a * r + s), a * B(r) + B(s), rtol=1e-12, atol=1e-12)
        assert s @ B(r) == pytest.approx(r @ B(s), rel=1e-11)
        assert r @ B(r) > 0


# --- pcg ---------------------------------------------------------------------

def test_identity_solves_in_one_step(rng):
    op = sp.identity(6, format="csr")
    rhs = rng.standard_normal(6)
    state = pcg_step(op, rhs, pcg_init(op, rhs, np.zeros(6), lambda r: r.copy()), lambda r: r.copy())
    assert state.k == 1
    assert np.allclose(state.x, rhs, atol=1e-14)


def test_finite_termination(rng):
    meshes = [refine_uniform(square_mesh(), 2)]
    op, rhs, _ = system(meshes)
    n = op.shape[0]
    x_star = direct_solve(op, rhs)
    cg = make_preconditioner("cg", op)
    state = pcg_init(op, rhs, np.zeros(n), cg)
    for _ in range(n):
        state = pcg_step(op, rhs, state, cg)
    assert state.k == n
    assert np.linalg.norm(state.x - x_star) <= 1e-10 * np.linalg.norm(x_star)


@pytest.mark.parametrize("solver", ["ml-pcg", "jacobi-pcg", "cg"])
def test_energy_error_is_monotone(solver):
    meshes = adaptive_meshes("square-goal", 5, seed=2)
    op, rhs, dofmaps = system(meshes)
    hierarchy = build_hierarchy(meshes, dofmaps)
    B = make_preconditioner(solver, op, hierarchy, dofmaps[-1])
    x_star = direct_solve(op, rhs)
    state = pcg_init(op, rhs, np.zeros(op.shape[0]), B)
    err = energy_norm(op, x_star)
    floor = 1e-12 * err
    for _ in range(50):
        previous = state
        state = pcg_step(op, rhs, state, B)
        new_err = energy_norm(op, x_star - state.x)
        assert new_err <= err * (1 + 1e-12) + floor
        # increment energy equals the energy of the actual update
        assert state.increment_energy == pytest.approx(energy_norm(op, state.x - previous.x),
                                                       rel=1e-8, abs=1e-14)
        assert residual_drift(op, rhs, state) <= 1e-10
        err = new_err


def test_counter_increments_after_convergence():
    op = sp.identity(2, format="csr")
    rhs = np.ones(2)
    ident = lambda r: r.copy()
    state = pcg_step(op, rhs, pcg_init(op, rhs, np.zeros(2), ident), ident)
    state = pcg_step(op, rhs, state, ident)
    assert state.k == 2 and state.increment_energy == 0.0


def test_breakdown_on_indefinite_operator():
    op = sp.diags([1.0, -1.0]).tocsr()
    rhs = np.array([0.0, 1.0])
    ident = lambda r: r.copy()
    with pytest.raises(SolverBreakdown):
        pcg_step(op, rhs, pcg_init(op, rhs, np.zeros(2), ident), ident)


def test_unknown_solver_name():
    with pytest.raises(ValueError):
        make_preconditioner("gmres", sp.identity(2))
    with pytest.raises(ValueError):
        make_preconditioner("ml-pcg", sp.identity(2))


# --- contraction -------------------------------------------------------------

def test_contraction_on_identity_offset():
    op = sp.identity(4, format="csr")
    rhs = np.arange(1.0, 5.0)
    x0 = rhs.copy(); x0[0] += 1.0
    assert measure_contraction(op, rhs, x0, 3)[0] == 0.0


def test_contraction_requires_nonzero_error():
    op = sp.identity(3, format="csr")
    with pytest.raises(ValueError):
        measure_contraction(op, np.ones(3), np.ones(3), 2)


def test_contraction_factors_lie_in_unit_interval():
    meshes = adaptive_meshes("zshape", 6, seed=4)
    op, rhs, dofmaps = system(meshes, "zshape")
    B = make_preconditioner("ml-pcg", op, build_hierarchy(meshes, dofmaps), dofmaps[-1])
    q = measure_contraction(op, rhs, np.zeros(op.shape[0]), 30, B)
    assert len(q) > 0 and all(0 <= f <= 1 for f in q)


def test_plain_cg_contraction_deteriorates_under_refinement():
    problem = get_problem("square-goal")
    worst_cg, worst_ml = [], []
    meshes = [problem.mesh]
    for _ in range(5):
        meshes.append(refine_uniform(meshes[-1], 1))
    for depth in (2, 4, 6):
        op, rhs, dofmaps = system(meshes[:depth])
        x_star = direct_solve(op, rhs)
        cg = measure_contraction(op, rhs, np.zeros(op.shape[0]), 20, x_star=x_star)
        B = make_preconditioner("ml-pcg", op, build_hierarchy(meshes[:depth], dofmaps), dofmaps[-1])
        ml = measure_contraction(op, rhs, np.zeros(op.shape[0]), 20, B, x_star=x_star)
        worst_cg.append(max(cg))
        worst_ml.append(max(ml))
    assert worst_cg[0] < worst_cg[1] < worst_cg[2]
    assert worst_ml[-1] < worst_cg[-1]


def test_solve_is_deterministic():
    meshes = adaptive_meshes("zshape", 4, seed=5)
    results = []
    for _ in range(2):
        op, rhs, dofmaps = system(meshes, "zshape")
        B = make_preconditioner("ml-pcg", op, build_hierarchy(meshes, dofmaps), dofmaps[-1])
        state = pcg_init(op, rhs, np.zeros(op.shape[0]), B)
        for _ in range(10):
            state = pcg_step(op, rhs, state, B)
        results.append(state.x)
    assert np.array_equal(results[0], results[1])


def test_prolongated_start_is_consistent():
    meshes = adaptive_meshes("square-goal", 2, seed=6)
    coarse, fine = meshes[-2], meshes[-1]
    values = coarse.coordinates[:, 0] * coarse.coordinates[:, 1]
    assert np.allclose(prolongate(fine, values)[: coarse.n_vertices], values)
