"""
Weighted-residual refinement indicators for the primal and the dual problem.

For a P1 function ``v`` with flux ``sigma = A grad v + b`` (``b`` is the
flux load for the primal and the goal direction for the dual problem):

    mu(T)^2 = h_T^2 ||s - c v + div b||_T^2
              + h_T ||[sigma . n]||^2_{dT inside}
              + h_T ||sigma . n - phi||^2_{dT on Gamma_N}

with ``h_T = |T|^(1/2)``. Every interior edge jump is charged in full to
both neighbours. The Neumann term is only present for the primal problem.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .assembly import (DofMap, GoalData, ProblemData, _scalar, _vector, edge_rule,
                       outward_normals, p1_gradients, quadrature_points)
from .mesh import NEUMANN, Mesh


@dataclass(frozen=True)
class Indicators:
    """Squared elementwise indicators with cached total."""

    squared: np.ndarray
    total_squared: float

    @classmethod
    def from_squares(cls, squared):
        squared = np.asarray(squared, dtype=float)
        if np.any(squared < 0):
            raise ValueError("indicators must be nonnegative")
        return cls(squared, float(squared.sum()))

    @property
    def total(self) -> float:
        return float(np.sqrt(self.total_squared))

    def __len__(self):
        return len(self.squared)


def restricted_total(ind: Indicators, subset) -> float:
    """``mu(U) = (sum_{T in U} mu(T)^2)^(1/2)``."""
    subset = np.asarray(subset, dtype=np.int64).ravel()
    if subset.size and (subset.min() < 0 or subset.max() >= len(ind.squared)):
        raise IndexError("element index out of range")
    return float(np.sqrt(ind.squared[np.unique(subset)].sum()))


class ResidualEstimator:
    """Residual indicators on one mesh, with the data-dependent parts precomputed.

    Per evaluation only a few sparse products are needed, so indicators can
    be recomputed after every solver step at O(#elements) cost.
    """

    def __init__(self, mesh: Mesh, dofmap: DofMap, coefficients, source=None,
                 flux=None, flux_mask=None, flux_div=None, neumann=None,
                 quadrature_degree: int = 2):
        self.mesh = mesh
        self.dofmap = dofmap
        M = mesh.n_elements
        grads, area = p1_gradients(mesh)
        self.h = np.sqrt(area)
        el = mesh.elements
        free_col = dofmap.vertex_to_dof

        # volume residual s + div b - c v at triangle quadrature points
        pts, bary, w = quadrature_points(mesh, quadrature_degree)
        x, y = pts[..., 0], pts[..., 1]
        vol = np.zeros(x.shape)
        if source is not None:
            vol = vol + _scalar(source(x, y), x.shape)
        if flux_div is not None:
            div = _scalar(flux_div(x, y), x.shape)
            if flux_mask is not None:
                div = div * flux_mask[:, None]
            vol = vol + div
        self._vol_q = vol
        self._w = w
        self._area = area
        self._reaction = coefficients.c
        self._mass_q = None
        if np.any(coefficients.c):
            rows = np.repeat(np.arange(M * len(w)), 3)
            cols = np.tile(el, (1, len(w))).reshape(M, len(w), 3)
            vals = np.broadcast_to(bary[None], (M, len(w), 3))
            keep = free_col[cols.ravel()] >= 0
            self._mass_q = sp.csr_matrix(
                (vals.ravel()[keep], (rows[keep], free_col[cols.ravel()][keep])),
                shape=(M * len(w), dofmap.n_free))
        self._volume_static = self.h ** 2 * area * (vol ** 2 @ w)

        agrad = np.einsum("mkl,mjl->mjk", coefficients.A, grads)  # A grad phi_i
        s, we = edge_rule(quadrature_degree)
        self._we = we

        def flux_at(elements_idx, qpts):
            if flux is None:
                return 0.0
            val = _vector(flux(qpts[..., 0], qpts[..., 1]), qpts.shape[:-1])
            if flux_mask is not None:
                val = val * flux_mask[elements_idx][:, None, None]
            return val

        # interior edges
        interior = np.flatnonzero(mesh.edge2elements[:, 1] >= 0)
        edges = mesh.edges[interior]
        tp, tm = mesh.edge2elements[interior, 0], mesh.edge2elements[interior, 1]
        a, b = mesh.coordinates[edges[:, 0]], mesh.coordinates[edges[:, 1]]
        d = b - a
        length = np.linalg.norm(d, axis=1)
        n = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
        qpts = a[:, None, :] + s[None, :, None] * d[:, None, :]
        self._jump_matrix = self._flux_matrix(
            np.concatenate([tp, tm]), np.concatenate([n, -n]),
            np.concatenate([np.arange(len(interior))] * 2), len(interior), agrad, el, free_col)
        if flux is None:
            self._jump_data = np.zeros((len(interior), len(we)))
        else:
            self._jump_data = np.einsum("eqk,ek->eq", flux_at(tp, qpts) - flux_at(tm, qpts), n)
        self._int_owner = np.concatenate([tp, tm])
        self._int_weight = np.concatenate([self.h[tp] * length, self.h[tm] * length])

        # Neumann edges
        nedges = mesh.boundary_edges_with(NEUMANN) if neumann is not None else np.zeros((0, 2), int)
        if len(nedges):
            nn, nlen = outward_normals(mesh, nedges)
            keys_all = mesh.edges[:, 0] * mesh.n_vertices + mesh.edges[:, 1]
            keys = (np.minimum(nedges[:, 0], nedges[:, 1]) * mesh.n_vertices
                    + np.maximum(nedges[:, 0], nedges[:, 1]))
            owner = mesh.edge2elements[np.searchsorted(keys_all, keys), 0]
            na, nb = mesh.coordinates[nedges[:, 0]], mesh.coordinates[nedges[:, 1]]
            nq = na[:, None, :] + s[None, :, None] * (nb - na)[:, None, :]
            shape = nq.shape[:2]
            phi = _scalar(neumann(nq[..., 0], nq[..., 1],
                                  np.broadcast_to(nn[:, None, 0], shape),
                                  np.broadcast_to(nn[:, None, 1], shape)), shape)
            data = -phi
            if flux is not None:
                data = data + np.einsum("eqk,ek->eq", flux_at(owner, nq), nn)
            self._neumann_matrix = self._flux_matrix(owner, nn, np.arange(len(nedges)),
                                                     len(nedges), agrad, el, free_col)
            self._neumann_data = data
            self._neu_owner = owner
            self._neu_weight = self.h[owner] * nlen
        else:
            self._neumann_matrix = None

    def _flux_matrix(self, owners, normals, rows, n_rows, agrad, el, free_col):
        """Sparse map from free-DOF coefficients to ``sum_rows (A grad v)|_owner . normal``."""
        vals = np.einsum("rik,rk->ri", agrad[owners], normals)
        cols = free_col[el[owners]]
        r = np.repeat(rows, 3)
        keep = cols.ravel() >= 0
        return sp.csr_matrix((vals.ravel()[keep], (r[keep], cols.ravel()[keep])),
                             shape=(n_rows, self.dofmap.n_free))

    def _edge_integrals(self, const, data):
        # int_E (const + data(s))^2 / |E|, by Gauss quadrature
        return ((const[:, None] + data) ** 2) @ self._we

    def __call__(self, v) -> Indicators:
        v = np.asarray(v, dtype=float)
        M = self.mesh.n_elements
        if v.shape != (self.dofmap.n_free,):
            raise ValueError("vector does not match the mesh degrees of freedom")
        if self._mass_q is None:
            eta2 = self._volume_static.copy()
        else:
            res = self._vol_q - self._reaction[:, None] * (self._mass_q @ v).reshape(M, -1)
            eta2 = self.h ** 2 * self._area * (res ** 2 @ self._w)
        jump = self._edge_integrals(self._jump_matrix @ v, self._jump_data)
        eta2 += np.bincount(self._int_owner, weights=self._int_weight * np.tile(jump, 2), minlength=M)
        if self._neumann_matrix is not None:
            neu = self._edge_integrals(self._neumann_matrix @ v, self._neumann_data)
            eta2 += np.bincount(self._neu_owner, weights=self._neu_weight * neu, minlength=M)
        return Indicators.from_squares(eta2)


def primal_estimator(mesh, dofmap, data: ProblemData, coefficients=None, quadrature_degree=2):
    coefficients = data.coefficients(mesh) if coefficients is None else coefficients
    return ResidualEstimator(mesh, dofmap, coefficients, source=data.f, flux=data.flux,
                             flux_div=data.flux_div, neumann=data.neumann,
                             quadrature_degree=quadrature_degree)


def dual_estimator(mesh, dofmap, goal: GoalData, coefficients, quadrature_degree=2):
    return ResidualEstimator(mesh, dofmap, coefficients, source=goal.g, flux=goal.gvec,
                             flux_mask=goal.region_mask(mesh), flux_div=goal.gvec_div,
                             quadrature_degree=quadrature_degree)


def estimate_primal(mesh: Mesh, u_h, data: ProblemData, dofmap: DofMap | None = None,
                    quadrature_degree: int = 2) -> Indicators:
    dofmap = DofMap.from_mesh(mesh) if dofmap is None else dofmap
    return primal_estimator(mesh, dofmap, data, quadrature_degree=quadrature_degree)(u_h)


def estimate_dual(mesh: Mesh, z_h, goal: GoalData, dofmap: DofMap | None = None,
                  coefficients=None, quadrature_degree: int = 2) -> Indicators:
    from .assembly import CoefficientField

    dofmap = DofMap.from_mesh(mesh) if dofmap is None else dofmap
    coefficients = CoefficientField.laplace(mesh) if coefficients is None else coefficients
    return dual_estimator(mesh, dofmap, goal, coefficients, quadrature_degree)(z_h)
