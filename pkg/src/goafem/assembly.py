"""
P1 finite element assembly.

Bilinear form ``a(u, v) = int A grad u . grad v + c u v``, loads
``F(v) = int f v - flux . grad v + int_{Gamma_N} phi v`` and goal functionals
``G(v) = int g v - gvec . grad v`` (with ``gvec`` optionally restricted to a
region). Dirichlet vertices are eliminated; vectors over the remaining free
vertices are plain numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, NEUMANN, prolongate

# barycentric points / weights (weights sum to one)
_TRIANGLE_RULES = {
    1: (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    2: (np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]),
        np.full(3, 1 / 3)),
    5: (np.array([
        [1 / 3, 1 / 3, 1 / 3],
        [0.059715871789770, 0.470142064105115, 0.470142064105115],
        [0.470142064105115, 0.059715871789770, 0.470142064105115],
        [0.470142064105115, 0.470142064105115, 0.059715871789770],
        [0.797426985353087, 0.101286507323456, 0.101286507323456],
        [0.101286507323456, 0.797426985353087, 0.101286507323456],
        [0.101286507323456, 0.101286507323456, 0.797426985353087]]),
        np.array([0.225, 0.132394152788506, 0.132394152788506, 0.132394152788506,
                  0.125939180544827, 0.125939180544827, 0.125939180544827])),
}


def triangle_rule(degree: int = 2):
    """Barycentric quadrature exact for polynomials up to ``degree`` (max 5)."""
    for d in sorted(_TRIANGLE_RULES):
        if d >= degree:
            return _TRIANGLE_RULES[d]
    raise ValueError(f"no triangle rule of degree {degree}")


def edge_rule(degree: int = 2):
    """Gauss-Legendre points on [0, 1] (at least two) and weights summing to one."""
    n = max(2, (degree + 2) // 2)
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _vector(value, shape):
    """Normalize a vector-field return value to shape ``shape + (2,)``."""
    if isinstance(value, (tuple, list)):
        return np.stack([np.broadcast_to(np.asarray(v, float), shape) for v in value], axis=-1)
    value = np.asarray(value, dtype=float)
    return np.broadcast_to(value, shape + (2,))


def _scalar(value, shape):
    return np.broadcast_to(np.asarray(value, dtype=float), shape)


@dataclass
class CoefficientField:
    """Elementwise constant diffusion ``A`` (M, 2, 2) and reaction ``c`` (M,)."""

    A: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        if not np.allclose(self.A, np.swapaxes(self.A, 1, 2)):
            raise ValueError("diffusion coefficient must be symmetric")
        if np.any(np.linalg.eigvalsh(self.A) <= 0):
            raise ValueError("diffusion coefficient must be positive definite")
        if np.any(self.c < 0):
            raise ValueError("reaction coefficient must be nonnegative")

    @classmethod
    def laplace(cls, mesh: Mesh) -> "CoefficientField":
        return cls(np.broadcast_to(np.eye(2), (mesh.n_elements, 2, 2)).copy(),
                   np.zeros(mesh.n_elements))

    @classmethod
    def from_functions(cls, mesh: Mesh, diffusion=None, reaction=None) -> "CoefficientField":
        """Evaluate coefficient functions of ``(x, y)`` at element centroids."""
        x, y = mesh.centroids.T
        if diffusion is None:
            A = np.broadcast_to(np.eye(2), (mesh.n_elements, 2, 2)).copy()
        else:
            A = np.broadcast_to(np.asarray(diffusion(x, y), float), (mesh.n_elements, 2, 2)).copy()
        c = np.zeros(mesh.n_elements) if reaction is None else _scalar(reaction(x, y), x.shape).copy()
        return cls(A, c)


@dataclass
class ProblemData:
    """Data of the primal problem.

    ``f(x, y)`` volume load, ``flux(x, y)`` vector load entering as
    ``-int flux . grad v``, ``neumann(x, y, nx, ny)`` Neumann datum and
    optional ``flux_div(x, y)`` (used by the estimator only). Diffusion and
    reaction are functions of ``(x, y)`` evaluated at centroids; ``None``
    means the Laplacian.
    """

    f: Optional[Callable] = None
    flux: Optional[Callable] = None
    neumann: Optional[Callable] = None
    flux_div: Optional[Callable] = None
    diffusion: Optional[Callable] = None
    reaction: Optional[Callable] = None

    def coefficients(self, mesh: Mesh) -> CoefficientField:
        return CoefficientField.from_functions(mesh, self.diffusion, self.reaction)


@dataclass
class GoalData:
    """Goal functional ``G(v) = int g v - int_omega gvec . grad v``.

    ``region(x, y)`` selects the elements (by centroid) carrying ``gvec``;
    meshes are expected to resolve the region boundary.
    """

    g: Optional[Callable] = None
    gvec: Optional[Callable] = None
    region: Optional[Callable] = None
    gvec_div: Optional[Callable] = None

    def region_mask(self, mesh: Mesh):
        if self.region is None:
            return np.ones(mesh.n_elements, dtype=bool)
        x, y = mesh.centroids.T
        return np.asarray(self.region(x, y), dtype=bool)


class DofMap:
    """Free (non-Dirichlet) vertices and their DOF numbers."""

    def __init__(self, n_vertices: int, constrained):
        constrained = np.unique(np.asarray(constrained, dtype=np.int64))
        mask = np.ones(n_vertices, dtype=bool)
        mask[constrained] = False
        self.n_vertices = n_vertices
        self.free = np.flatnonzero(mask)
        self.vertex_to_dof = -np.ones(n_vertices, dtype=np.int64)
        self.vertex_to_dof[self.free] = np.arange(len(self.free))

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "DofMap":
        return cls(mesh.n_vertices, mesh.dirichlet_vertices())

    @property
    def n_free(self) -> int:
        return len(self.free)

    def __len__(self):
        return self.n_free

    def expand(self, v):
        """Free-DOF vector to vertex values (zero on Dirichlet vertices)."""
        out = np.zeros(self.n_vertices)
        out[self.free] = v
        return out

    def restrict(self, values):
        return np.asarray(values)[self.free]

    def restriction_matrix(self):
        n = self.n_free
        return sp.csr_matrix((np.ones(n), (np.arange(n), self.free)), shape=(n, self.n_vertices))


def p1_gradients(mesh: Mesh):
    """Gradients (M, 3, 2) of the three hat functions and areas (M,)."""
    p = mesh.coordinates[mesh.elements]
    area = mesh.areas
    grads = np.empty((mesh.n_elements, 3, 2))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        grads[:, i, 0] = p[:, j, 1] - p[:, k, 1]
        grads[:, i, 1] = p[:, k, 0] - p[:, j, 0]
    grads /= (2.0 * area)[:, None, None]
    return grads, area


def element_gradients(mesh: Mesh, values):
    """Gradient (M, 2) of the P1 function with the given vertex values."""
    grads, _ = p1_gradients(mesh)
    return np.einsum("mi,mik->mk", np.asarray(values)[mesh.elements], grads)


def quadrature_points(mesh: Mesh, degree: int = 2):
    """Physical points (M, Q, 2), barycentric coordinates (Q, 3) and weights (Q,)."""
    bary, w = triangle_rule(degree)
    pts = np.einsum("qi,mik->mqk", bary, mesh.coordinates[mesh.elements])
    return pts, bary, w


def _local_matrices(mesh: Mesh, coefficients: CoefficientField):
    grads, area = p1_gradients(mesh)
    agrad = np.einsum("mkl,mjl->mjk", coefficients.A, grads)
    local = np.einsum("mik,mjk->mij", grads, agrad) * area[:, None, None]
    if np.any(coefficients.c):
        mass = (np.ones((3, 3)) + np.eye(3)) / 12.0
        local = local + (coefficients.c * area)[:, None, None] * mass
    return local


def assemble_full_operator(mesh: Mesh, coefficients: CoefficientField):
    """Operator over all vertices, Dirichlet rows included."""
    local = _local_matrices(mesh, coefficients)
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    n = mesh.n_vertices
    K = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    K.sum_duplicates()
    return K


def assemble_operator(mesh: Mesh, coefficients: CoefficientField, dofmap: DofMap):
    """Stiffness-plus-mass matrix restricted to the free DOFs (CSR)."""
    if dofmap.n_vertices != mesh.n_vertices:
        raise ValueError("dofmap does not belong to this mesh")
    if len(coefficients.c) != mesh.n_elements:
        raise ValueError("coefficient field does not belong to this mesh")
    K = assemble_full_operator(mesh, coefficients)
    return K[dofmap.free][:, dofmap.free].tocsr()


def _volume_load(mesh, scalar, vector, degree, vector_mask=None):
    """Vertex vector of ``int scalar * phi_i - vector . grad phi_i``."""
    pts, bary, w = quadrature_points(mesh, degree)
    grads, area = p1_gradients(mesh)
    x, y = pts[..., 0], pts[..., 1]
    local = np.zeros((mesh.n_elements, 3))
    if scalar is not None:
        fq = _scalar(scalar(x, y), x.shape)
        local += area[:, None] * np.einsum("mq,q,qi->mi", fq, w, bary)
    if vector is not None:
        vq = _vector(vector(x, y), x.shape)
        mean = np.einsum("mqk,q->mk", vq, w)
        if vector_mask is not None:
            mean = mean * vector_mask[:, None]
        local -= area[:, None] * np.einsum("mk,mik->mi", mean, grads)
    return np.bincount(mesh.elements.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)


def outward_normals(mesh: Mesh, edges):
    """Unit outward normals (B, 2) and lengths (B,) of boundary edges."""
    edges = np.asarray(edges).reshape(-1, 2)
    a, b = mesh.coordinates[edges[:, 0]], mesh.coordinates[edges[:, 1]]
    d = b - a
    length = np.linalg.norm(d, axis=1)
    n = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
    keys_all = mesh.edges[:, 0] * mesh.n_vertices + mesh.edges[:, 1]
    keys = np.minimum(edges[:, 0], edges[:, 1]) * mesh.n_vertices + np.maximum(edges[:, 0], edges[:, 1])
    owner = mesh.edge2elements[np.searchsorted(keys_all, keys), 0]
    inward = mesh.centroids[owner] - 0.5 * (a + b)
    flip = np.einsum("ij,ij->i", n, inward) > 0
    n[flip] *= -1
    return n, length


def _neumann_load(mesh, neumann, degree):
    out = np.zeros(mesh.n_vertices)
    edges = mesh.boundary_edges_with(NEUMANN)
    if neumann is None or len(edges) == 0:
        return out
    s, w = edge_rule(degree)
    n, length = outward_normals(mesh, edges)
    a, b = mesh.coordinates[edges[:, 0]], mesh.coordinates[edges[:, 1]]
    pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    shape = pts.shape[:2]
    nx = np.broadcast_to(n[:, None, 0], shape)
    ny = np.broadcast_to(n[:, None, 1], shape)
    phi = _scalar(neumann(pts[..., 0], pts[..., 1], nx, ny), shape)
    out += np.bincount(edges[:, 0], weights=length * (phi * (1 - s) * w).sum(1), minlength=mesh.n_vertices)
    out += np.bincount(edges[:, 1], weights=length * (phi * s * w).sum(1), minlength=mesh.n_vertices)
    return out


def assemble_primal_load(mesh: Mesh, data: ProblemData, dofmap: DofMap, quadrature_degree: int = 2):
    """``F(phi_i)`` for all free DOFs."""
    full = _volume_load(mesh, data.f, data.flux, quadrature_degree)
    full += _neumann_load(mesh, data.neumann, quadrature_degree)
    return full[dofmap.free]


def assemble_dual_load(mesh: Mesh, goal: GoalData, dofmap: DofMap, quadrature_degree: int = 2):
    """``G(phi_i)`` for all free DOFs."""
    full = _volume_load(mesh, goal.g, goal.gvec, quadrature_degree, goal.region_mask(mesh))
    return full[dofmap.free]


def evaluate_goal(mesh: Mesh, dofmap: DofMap, v, goal: GoalData, quadrature_degree: int = 2) -> float:
    """``G(v)`` by quadrature of the P1 function with free-DOF coefficients ``v``."""
    values = dofmap.expand(v)
    pts, bary, w = quadrature_points(mesh, quadrature_degree)
    area = mesh.areas
    x, y = pts[..., 0], pts[..., 1]
    total = 0.0
    if goal.g is not None:
        vq = values[mesh.elements] @ bary.T
        total += np.sum(area * np.einsum("mq,mq,q->m", _scalar(goal.g(x, y), x.shape), vq, w))
    if goal.gvec is not None:
        grad = element_gradients(mesh, values)
        mean = np.einsum("mqk,q->mk", _vector(goal.gvec(x, y), x.shape), w)
        mean = mean * goal.region_mask(mesh)[:, None]
        total -= np.sum(area * np.einsum("mk,mk->m", mean, grad))
    return float(total)


def energy_norm(op, v) -> float:
    v = np.asarray(v, dtype=float)
    q = float(v @ (op @ v))
    if q < 0:
        scale = float(np.abs(op.diagonal()).max()) * float(v @ v)
        if q < -1e-12 * scale:
            raise ValueError(f"negative quadratic form {q:.3e}: operator is not positive definite")
        return 0.0
    return float(np.sqrt(q))


def direct_solve(op, rhs):
    """Sparse LU solve of an SPD system (diagnostic oracle)."""
    rhs = np.asarray(rhs, dtype=float)
    if op.shape[0] == 0:
        return np.zeros(0)
    if np.any(op.diagonal() <= 0):
        raise np.linalg.LinAlgError("operator has a nonpositive diagonal entry")
    if not np.any(rhs):
        return np.zeros_like(rhs)
    try:
        x = spla.splu(sp.csc_matrix(op)).solve(rhs)
    except RuntimeError as exc:
        raise np.linalg.LinAlgError(str(exc)) from exc
    if not np.all(np.isfinite(x)) or float(x @ rhs) <= 0:
        raise np.linalg.LinAlgError("factorization breakdown: operator is not SPD")
    return x


def prolongate_dofs(fine: Mesh, coarse_dofmap: DofMap, fine_dofmap: DofMap, v):
    """Free-DOF vector on the parent mesh to the free DOFs of ``fine``."""
    return fine_dofmap.restrict(prolongate(fine, coarse_dofmap.expand(v)))
