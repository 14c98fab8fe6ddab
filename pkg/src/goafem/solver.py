"""
Contractive iterative solvers for the SPD Galerkin systems.

The multilevel preconditioner is a local multilevel diagonal scaling
(additive Schwarz over hat functions): level 0 contributes a Jacobi sweep
over all free vertices (or an exact solve on the initial mesh), every finer
level a Jacobi sweep over the vertices that were
created by its refinement and the endpoints of the bisected edges. Since
refinement only appends vertices, all levels share one vertex numbering and
the intergrid transfers reduce to midpoint averaging over the new vertices,
so one application costs O(sum of new/changed vertices) = O(#elements).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .assembly import DofMap, assemble_full_operator, direct_solve, energy_norm
from .mesh import Mesh

SOLVERS = ("ml-pcg", "jacobi-pcg", "cg")


class SolverBreakdown(RuntimeError):
    """Nonpositive curvature in (P)CG, i.e. the operator or preconditioner is not SPD."""


@dataclass(frozen=True)
class _Level:
    n_vertices: int
    free_mask: np.ndarray
    vertex_parents: np.ndarray  # parents of vertices [n_prev, n_vertices)
    new_vertices: np.ndarray
    changed: np.ndarray  # free new-or-changed vertices
    inv_diag: np.ndarray  # 1 / a(phi_i, phi_i) on this level, for ``changed``
    coarse_inverse: np.ndarray | None = None  # exact solve on level 0


class MultilevelHierarchy:
    """Nested meshes with per-level diagonals on the new/changed vertices."""

    def __init__(self, coarse="jacobi"):
        if coarse not in ("exact", "jacobi"):
            raise ValueError("coarse must be 'exact' or 'jacobi'")
        self.coarse = coarse
        self.levels: list[_Level] = []
        self._last_mesh = None

    def __len__(self):
        return len(self.levels)

    @property
    def depth(self):
        return len(self.levels)

    def append_level(self, mesh: Mesh, dofmap: DofMap, matrix):
        """Add the next finer mesh.

        ``matrix`` is the full vertex stiffness matrix of ``mesh`` (Dirichlet
        rows included); only its diagonal is kept on levels above 0.
        """
        diagonal = np.asarray(matrix.diagonal(), dtype=float)
        coarse_inverse = None
        free_mask = np.zeros(mesh.n_vertices, dtype=bool)
        free_mask[dofmap.free] = True
        if not self.levels:
            changed = dofmap.free
            new = np.arange(mesh.n_vertices)
            parents = np.zeros((0, 2), dtype=np.int64)
            if self.coarse == "exact" and len(changed):
                block = matrix[changed][:, changed].toarray()
                coarse_inverse = np.linalg.inv(block)
        else:
            prev = self._last_mesh
            n_prev = prev.n_vertices
            parents = mesh.vertex_parents
            if (mesh.n_vertices != n_prev + len(parents)
                    or not np.array_equal(mesh.coordinates[:n_prev], prev.coordinates)
                    or (len(parents) and parents.max() >= n_prev)):
                raise ValueError("mesh is not a refinement of the previous level")
            new = np.arange(n_prev, mesh.n_vertices)
            changed = np.unique(np.concatenate([new, parents.ravel()]))
            changed = changed[free_mask[changed]]
        self.levels.append(_Level(mesh.n_vertices, free_mask, parents, new, changed,
                                  1.0 / diagonal[changed], coarse_inverse))
        self._last_mesh = mesh
        return self

    def new_vertices(self, level):
        return self.levels[level].new_vertices

    def changed_vertices(self, level):
        return self.levels[level].changed

    def apply(self, r_full):
        """Preconditioner on vertex vectors of the finest level (Dirichlet entries ignored)."""
        work = np.array(r_full, dtype=float)
        top = self.levels[-1]
        work[~top.free_mask] = 0.0
        coeffs = [None] * len(self.levels)
        for j in range(len(self.levels) - 1, 0, -1):
            lvl = self.levels[j]
            coeffs[j] = work[lvl.changed] * lvl.inv_diag
            half = 0.5 * work[lvl.new_vertices]
            np.add.at(work, lvl.vertex_parents[:, 0], half)
            np.add.at(work, lvl.vertex_parents[:, 1], half)
        base = self.levels[0]
        x = np.zeros_like(work)
        if base.coarse_inverse is None:
            x[base.changed] = work[base.changed] * base.inv_diag
        else:
            x[base.changed] = base.coarse_inverse @ work[base.changed]
        for j in range(1, len(self.levels)):
            lvl = self.levels[j]
            vp = lvl.vertex_parents
            x[lvl.new_vertices] = 0.5 * (x[vp[:, 0]] + x[vp[:, 1]])
            x[lvl.changed] += coeffs[j]
        return x


def build_hierarchy(meshes, dofmaps, coefficients=None, coarse="jacobi") -> MultilevelHierarchy:
    """Hierarchy for the nested meshes ``T_0, ..., T_l``.

    ``coefficients`` is a sequence of per-level coefficient fields; the
    Laplacian is used when omitted.
    """
    from .assembly import CoefficientField

    hierarchy = MultilevelHierarchy(coarse)
    for j, (mesh, dofmap) in enumerate(zip(meshes, dofmaps)):
        coef = CoefficientField.laplace(mesh) if coefficients is None else coefficients[j]
        hierarchy.append_level(mesh, dofmap, assemble_full_operator(mesh, coef).tocsr())
    return hierarchy


def precondition(hierarchy: MultilevelHierarchy, dofmap: DofMap, r):
    """Multilevel diagonal scaling of a free-DOF residual on the finest level."""
    return dofmap.restrict(hierarchy.apply(dofmap.expand(r)))


def make_preconditioner(kind: str, op, hierarchy=None, dofmap=None):
    """Callable ``r -> B r`` for the solver names in :data:`SOLVERS`."""
    if kind == "cg":
        return lambda r: r.copy()
    if kind == "jacobi-pcg":
        inv = 1.0 / op.diagonal()
        return lambda r: inv * r
    if kind == "ml-pcg":
        if hierarchy is None or dofmap is None:
            raise ValueError("ml-pcg needs a hierarchy and the finest dofmap")
        return lambda r: precondition(hierarchy, dofmap, r)
    raise ValueError(f"unknown solver {kind!r}; expected one of {SOLVERS}")


@dataclass(frozen=True)
class PcgState:
    x: np.ndarray
    r: np.ndarray
    z: np.ndarray
    p: np.ndarray
    rz: float
    k: int = 0
    increment_energy: float = 0.0  # |||x_k - x_{k-1}|||


def pcg_init(op, rhs, x0, preconditioner) -> PcgState:
    x0 = np.array(x0, dtype=float)
    r = rhs - op @ x0
    z = preconditioner(r)
    return PcgState(x=x0, r=r, z=z, p=z.copy(), rz=float(r @ z))


def pcg_step(op, rhs, state: PcgState, preconditioner) -> PcgState:
    """One preconditioned CG iteration."""
    if state.rz == 0.0:
        return replace(state, k=state.k + 1, increment_energy=0.0)
    q = op @ state.p
    pq = float(state.p @ q)
    if not pq > 0.0 or not state.rz > 0.0:
        raise SolverBreakdown(f"PCG breakdown at step {state.k + 1} (p'Ap = {pq:.3e})")
    alpha = state.rz / pq
    x = state.x + alpha * state.p
    r = state.r - alpha * q
    z = preconditioner(r)
    rz = float(r @ z)
    p = z + (rz / state.rz) * state.p
    return PcgState(x=x, r=r, z=z, p=p, rz=rz, k=state.k + 1,
                    increment_energy=float(abs(alpha) * np.sqrt(pq)))


def residual_drift(op, rhs, state: PcgState) -> float:
    """Relative gap between the updated and the recomputed residual."""
    true = rhs - op @ state.x
    scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
    return float(np.linalg.norm(true - state.r) / scale)


def measure_contraction(op, rhs, x0, n_steps, preconditioner=None, x_star=None):
    """Per-step energy-error factors ``|||x* - x_k||| / |||x* - x_{k-1}|||``.

    Stops early once the error has dropped below ``1e-10`` of the initial
    error, where the ratios only measure rounding.
    """
    if preconditioner is None:
        preconditioner = lambda r: r.copy()
    if x_star is None:
        x_star = direct_solve(op, rhs)
    e_prev = energy_norm(op, x_star - x0)
    if e_prev == 0.0:
        raise ValueError("initial guess is already exact")
    floor = 1e-10 * e_prev
    state = pcg_init(op, rhs, x0, preconditioner)
    factors = []
    for _ in range(n_steps):
        state = pcg_step(op, rhs, state, preconditioner)
        e = energy_norm(op, x_star - state.x)
        factors.append(e / e_prev)
        if e <= floor:
            break
        e_prev = e
    return factors
