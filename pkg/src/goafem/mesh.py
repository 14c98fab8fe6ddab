"""
Conforming triangulations and newest vertex bisection.

Triangles are stored counterclockwise as ``(v0, v1, v2)`` with the
refinement edge always being ``(v0, v1)``, i.e. the edge opposite the
newest vertex ``v2``. Refinement never renumbers existing vertices, so a
vertex index is valid on every finer mesh of the same hierarchy; the
midpoints created by a refinement are appended and their parent edge
endpoints are kept in :attr:`Mesh.vertex_parents`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

DIRICHLET = "D"
NEUMANN = "N"

# local edge j of a triangle joins LOCAL_EDGES[j]; edge 0 is the refinement edge
LOCAL_EDGES = np.array([[0, 1], [1, 2], [2, 0]])


class MeshError(ValueError):
    """Invalid mesh input."""


class NonConformingMeshError(MeshError):
    pass


class DegenerateElementError(MeshError):
    pass


class BoundaryLabelError(MeshError):
    pass


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def signed_areas(coordinates, elements):
    p0 = coordinates[elements[:, 0]]
    d1 = coordinates[elements[:, 1]] - p0
    d2 = coordinates[elements[:, 2]] - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _edge_keys(pairs, n_vertices):
    lo = np.minimum(pairs[..., 0], pairs[..., 1]).astype(np.int64)
    hi = np.maximum(pairs[..., 0], pairs[..., 1]).astype(np.int64)
    return lo * n_vertices + hi


def _build_edges(elements, n_vertices):
    """Unique edges, element-to-edge map and edge-to-element adjacency."""
    local = elements[:, LOCAL_EDGES]  # (M, 3, 2)
    keys = _edge_keys(local, n_vertices).ravel()
    ukeys, inverse = np.unique(keys, return_inverse=True)
    edges = np.column_stack([ukeys // n_vertices, ukeys % n_vertices])
    element2edges = inverse.reshape(-1, 3)

    n_edges = len(ukeys)
    edge2elements = -np.ones((n_edges, 2), dtype=np.int64)
    owner = np.repeat(np.arange(len(elements)), 3)
    counts = np.bincount(inverse, minlength=n_edges)
    order = np.argsort(inverse, kind="stable")
    first = np.concatenate([[0], np.cumsum(counts)[:-1]])
    edge2elements[:, 0] = owner[order[first]]
    two = counts >= 2
    edge2elements[two, 1] = owner[order[first[two] + 1]]
    return edges, element2edges, edge2elements, counts


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable conforming triangulation.

    Attributes
    ----------
    coordinates : (N, 2) float array
    elements : (M, 3) int array, counterclockwise, refinement edge ``(v0, v1)``
    boundary_edges : (B, 2) int array
    boundary_labels : (B,) array of ``"D"`` / ``"N"``
    generation : (M,) int array, number of bisections since the initial mesh
    parent : (M,) int array or None, element index in the previous mesh
    vertex_parents : (K, 2) int array, edge endpoints of the K vertices
        created by the refinement that produced this mesh (appended last)
    edges, element2edges, edge2elements : adjacency; ``edge2elements[e, 1]``
        is -1 on boundary edges
    """

    coordinates: np.ndarray
    elements: np.ndarray
    boundary_edges: np.ndarray
    boundary_labels: np.ndarray
    generation: np.ndarray
    parent: np.ndarray | None = None
    vertex_parents: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    edges: np.ndarray = None
    element2edges: np.ndarray = None
    edge2elements: np.ndarray = None

    @classmethod
    def _assemble(cls, coordinates, elements, boundary_edges, boundary_labels,
                  generation, parent=None, vertex_parents=None):
        coordinates = np.asarray(coordinates, dtype=float)
        elements = np.asarray(elements, dtype=np.int64)
        edges, element2edges, edge2elements, _ = _build_edges(elements, len(coordinates))
        if vertex_parents is None:
            vertex_parents = np.zeros((0, 2), dtype=np.int64)
        return cls(
            coordinates=_frozen(coordinates, float),
            elements=_frozen(elements, np.int64),
            boundary_edges=_frozen(np.asarray(boundary_edges).reshape(-1, 2), np.int64),
            boundary_labels=_frozen(boundary_labels, "<U1"),
            generation=_frozen(generation, np.int64),
            parent=None if parent is None else _frozen(parent, np.int64),
            vertex_parents=_frozen(vertex_parents, np.int64),
            edges=_frozen(edges, np.int64),
            element2edges=_frozen(element2edges, np.int64),
            edge2elements=_frozen(edge2elements, np.int64),
        )

    @property
    def n_vertices(self) -> int:
        return len(self.coordinates)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def __len__(self):
        return self.n_elements

    @property
    def areas(self):
        return signed_areas(self.coordinates, self.elements)

    @property
    def centroids(self):
        return self.coordinates[self.elements].mean(axis=1)

    def boundary_edges_with(self, label):
        return self.boundary_edges[self.boundary_labels == label]

    def dirichlet_vertices(self):
        return np.unique(self.boundary_edges_with(DIRICHLET))

    def boundary_edge_index(self):
        """Index into :attr:`edges` of every boundary edge."""
        keys = _edge_keys(self.edges, self.n_vertices)
        bkeys = _edge_keys(self.boundary_edges, self.n_vertices)
        return np.searchsorted(keys, bkeys)

    def min_angle(self):
        """Smallest interior angle of every triangle (radians)."""
        p = self.coordinates[self.elements]
        angles = []
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            c = np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            angles.append(np.arccos(np.clip(c, -1.0, 1.0)))
        return np.min(angles, axis=0)


def _refinement_edge_rotation(coordinates, elements):
    """Local index of the vertex opposite the longest edge.

    Ties are broken by the smallest (sorted) vertex-index pair.
    """
    p = coordinates[elements]
    # squared length of the edge opposite local vertex i
    lengths = np.stack([np.sum((p[:, (i + 2) % 3] - p[:, (i + 1) % 3]) ** 2, axis=1)
                        for i in range(3)], axis=1)
    longest = lengths.max(axis=1, keepdims=True)
    candidate = lengths >= longest * (1.0 - 1e-12)
    n = max(int(elements.max()) + 1, 1)
    keys = np.stack([_edge_keys(elements[:, [(i + 1) % 3, (i + 2) % 3]], n) for i in range(3)], axis=1)
    keys = np.where(candidate, keys, np.iinfo(np.int64).max)
    return np.argmin(keys, axis=1)


def _rotate(elements, opposite):
    """Cyclically rotate rows so that local vertex ``opposite`` becomes v2."""
    idx = (np.arange(3)[None, :] + opposite[:, None] + 1) % 3
    return np.take_along_axis(elements, idx, axis=1)


def _parse_labels(boundary_labels):
    if isinstance(boundary_labels, dict):
        rows = [(a, b, lab) for (a, b), lab in boundary_labels.items()]
    else:
        rows = list(boundary_labels)
    if not rows:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype="<U1")
    edges = np.array([[int(r[0]), int(r[1])] for r in rows], dtype=np.int64)
    labels = np.array([str(r[2]).upper() for r in rows], dtype="<U1")
    bad = ~np.isin(labels, [DIRICHLET, NEUMANN])
    if bad.any():
        raise BoundaryLabelError(f"unknown boundary label {labels[bad][0]!r}")
    return edges, labels


def build_initial(vertices, triangles, boundary_labels, refinement_edges=None) -> Mesh:
    """Create the initial mesh.

    Parameters
    ----------
    vertices : (N, 2) array_like
    triangles : (M, 3) array_like of vertex indices
    boundary_labels : iterable of ``(a, b, label)`` rows or ``{(a, b): label}``
        with label ``"D"`` or ``"N"``; every boundary edge needs exactly one.
    refinement_edges : (M,) array_like, optional
        Local index of the vertex opposite each refinement edge. Defaults to
        the longest edge of each triangle.
    """
    coordinates = np.asarray(vertices, dtype=float)
    elements = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if coordinates.ndim != 2 or coordinates.shape[1] != 2:
        raise MeshError("vertices must have shape (N, 2)")
    if not np.all(np.isfinite(coordinates)):
        raise MeshError("vertex coordinates must be finite")
    if len(elements) == 0:
        raise MeshError("mesh needs at least one triangle")
    if elements.min() < 0 or elements.max() >= len(coordinates):
        raise MeshError("triangle references a nonexistent vertex")

    area = signed_areas(coordinates, elements)
    scale = np.max(np.ptp(coordinates, axis=0)) ** 2
    if np.any(np.abs(area) <= 1e-14 * scale):
        raise DegenerateElementError(f"zero-area triangle {int(np.argmin(np.abs(area)))}")
    elements = elements.copy()
    cw = area < 0
    elements[cw] = elements[cw][:, [0, 2, 1]]

    if refinement_edges is None:
        opposite = _refinement_edge_rotation(coordinates, elements)
    else:
        opposite = np.asarray(refinement_edges, dtype=np.int64)
        opposite = np.where(cw, np.array([0, 2, 1])[opposite], opposite)
    elements = _rotate(elements, opposite)

    bedges, blabels = _parse_labels(boundary_labels)
    mesh = Mesh._assemble(coordinates, elements, bedges, blabels,
                          generation=np.zeros(len(elements), dtype=np.int64))
    report = check_conformity(mesh)
    if not report.ok:
        if report.hanging or report.overshared:
            raise NonConformingMeshError("; ".join(report.violations))
        raise BoundaryLabelError("; ".join(report.violations))
    return mesh


def refine_nvb(mesh: Mesh, marked) -> Mesh:
    """Newest vertex bisection of the marked elements plus closure.

    Every marked triangle is bisected once through the midpoint of its
    refinement edge. Further bisections are added until the mesh is
    conforming again: whenever an edge of a triangle is split, its
    refinement edge is split as well.
    """
    marked = np.unique(np.asarray(marked, dtype=np.int64).ravel())
    if marked.size and (marked[0] < 0 or marked[-1] >= mesh.n_elements):
        raise IndexError("marked element index out of range")
    if marked.size == 0:
        return mesh

    el = mesh.elements
    e2e = mesh.element2edges
    edge_marked = np.zeros(len(mesh.edges), dtype=bool)
    edge_marked[e2e[marked, 0]] = True
    while True:
        me = edge_marked[e2e]
        swap = ~me[:, 0] & (me[:, 1] | me[:, 2])
        if not swap.any():
            break
        edge_marked[e2e[swap, 0]] = True

    n_old = mesh.n_vertices
    split = np.flatnonzero(edge_marked)
    midpoint_of = -np.ones(len(mesh.edges), dtype=np.int64)
    midpoint_of[split] = n_old + np.arange(len(split))
    parents = mesh.edges[split]
    coordinates = np.vstack([mesh.coordinates, 0.5 * mesh.coordinates[parents].sum(axis=1)])

    me = edge_marked[e2e]
    n1, n2, n3 = el[:, 0], el[:, 1], el[:, 2]
    m0, m1, m2 = (midpoint_of[e2e[:, j]] for j in range(3))
    gen = mesh.generation

    none = ~me[:, 0]
    green = me[:, 0] & ~me[:, 1] & ~me[:, 2]
    right = me[:, 0] & me[:, 1] & ~me[:, 2]
    left = me[:, 0] & ~me[:, 1] & me[:, 2]
    red = me[:, 0] & me[:, 1] & me[:, 2]

    blocks = []  # (parent indices, child elements, generation increment)

    def add(mask, child, inc):
        idx = np.flatnonzero(mask)
        if idx.size:
            blocks.append((idx, np.column_stack([c[idx] for c in child]), inc))

    add(none, (n1, n2, n3), 0)
    add(green, (n3, n1, m0), 1)
    add(green, (n2, n3, m0), 1)
    add(right, (n3, n1, m0), 1)
    add(right, (m0, n2, m1), 2)
    add(right, (n3, m0, m1), 2)
    add(left, (n1, m0, m2), 2)
    add(left, (m0, n3, m2), 2)
    add(left, (n2, n3, m0), 1)
    add(red, (n1, m0, m2), 2)
    add(red, (m0, n3, m2), 2)
    add(red, (m0, n2, m1), 2)
    add(red, (n3, m0, m1), 2)

    parent = np.concatenate([b[0] for b in blocks])
    elements = np.vstack([b[1] for b in blocks])
    generation = np.concatenate([gen[b[0]] + b[2] for b in blocks])
    order = np.argsort(parent, kind="stable")
    parent, elements, generation = parent[order], elements[order], generation[order]

    # boundary edges inherit their label on both halves
    bidx = mesh.boundary_edge_index()
    bsplit = edge_marked[bidx]
    be, bl = mesh.boundary_edges, mesh.boundary_labels
    mids = midpoint_of[bidx[bsplit]]
    new_be = np.vstack([be[~bsplit],
                        np.column_stack([be[bsplit, 0], mids]),
                        np.column_stack([mids, be[bsplit, 1]])])
    new_bl = np.concatenate([bl[~bsplit], bl[bsplit], bl[bsplit]])

    return Mesh._assemble(coordinates, elements, new_be, new_bl, generation,
                          parent=parent, vertex_parents=parents)


def refine_uniform(mesh: Mesh, times: int = 1) -> Mesh:
    for _ in range(times):
        mesh = refine_nvb(mesh, np.arange(mesh.n_elements))
    return mesh


@dataclass
class ConformityReport:
    ok: bool
    violations: list
    hanging: bool = False
    overshared: bool = False

    def __bool__(self):
        return self.ok


def check_conformity(mesh: Mesh) -> ConformityReport:
    """Check positivity, adjacency consistency, conformity and labels."""
    violations = []
    hanging = overshared = False
    el = mesh.elements
    xy = mesh.coordinates

    area = signed_areas(xy, el)
    for t in np.flatnonzero(area <= 0)[:10]:
        violations.append(f"element {t} has nonpositive area {area[t]:.3e}")

    edges, e2e, e2el, counts = _build_edges(el, mesh.n_vertices)
    if mesh.edges is None or mesh.edges.shape != edges.shape or np.any(mesh.edges != edges):
        violations.append("stored edge list is inconsistent with the triangles")
    else:
        if mesh.element2edges.shape != e2e.shape or np.any(mesh.element2edges != e2e):
            bad = np.flatnonzero(np.any(mesh.element2edges != e2e, axis=1))
            violations.append(f"element-to-edge map wrong for element {bad[0]}")
        stored = np.sort(mesh.edge2elements, axis=1)
        fresh = np.sort(e2el, axis=1)
        for e in np.flatnonzero(np.any(stored != fresh, axis=1))[:10]:
            violations.append(f"adjacency of edge {e} ({edges[e, 0]}, {edges[e, 1]}) is inconsistent")

    for e in np.flatnonzero(counts > 2)[:10]:
        overshared = True
        violations.append(f"edge {e} ({edges[e, 0]}, {edges[e, 1]}) shared by {counts[e]} elements")

    # an interior edge must be traversed in opposite directions by its two elements
    local = el[:, LOCAL_EDGES].reshape(-1, 2)
    forward = (local[:, 0] < local[:, 1]).astype(int) * 2 - 1
    orient = np.bincount(e2e.ravel(), weights=forward, minlength=len(edges))
    for e in np.flatnonzero((counts == 2) & (orient != 0))[:10]:
        violations.append(f"edge {e} ({edges[e, 0]}, {edges[e, 1]}) has inconsistent orientation")

    single = edges[counts == 1]
    if len(single):
        lengths = np.linalg.norm(xy[single[:, 1]] - xy[single[:, 0]], axis=1)
        mids = 0.5 * (xy[single[:, 0]] + xy[single[:, 1]])
        tree = cKDTree(xy)
        hits = tree.query_ball_point(mids, 0.5 * lengths * (1 + 1e-9))
        for j, cand in enumerate(hits):
            a, b = single[j]
            for v in cand:
                if v == a or v == b:
                    continue
                d = xy[b] - xy[a]
                w = xy[v] - xy[a]
                cross = d[0] * w[1] - d[1] * w[0]
                s = np.dot(w, d) / np.dot(d, d)
                if abs(cross) <= 1e-10 * np.dot(d, d) and 1e-12 < s < 1 - 1e-12:
                    hanging = True
                    violations.append(f"hanging vertex {v} on edge ({a}, {b})")

    bkeys = _edge_keys(mesh.boundary_edges, mesh.n_vertices) if len(mesh.boundary_edges) else np.zeros(0, np.int64)
    skeys = _edge_keys(single, mesh.n_vertices) if len(single) else np.zeros(0, np.int64)
    ukeys, nlab = np.unique(bkeys, return_counts=True)
    for k in ukeys[nlab > 1][:10]:
        violations.append(f"boundary edge ({k // mesh.n_vertices}, {k % mesh.n_vertices}) labeled twice")
    for k in np.setdiff1d(skeys, bkeys)[:10]:
        violations.append(f"boundary edge ({k // mesh.n_vertices}, {k % mesh.n_vertices}) has no label")
    for k in np.setdiff1d(bkeys, skeys)[:10]:
        violations.append(f"labeled edge ({k // mesh.n_vertices}, {k % mesh.n_vertices}) is not a boundary edge")

    return ConformityReport(not violations, violations, hanging, overshared)


def sons_estimate_holds(coarse: Mesh, fine: Mesh) -> bool:
    """``#(T_H minus T_h) + #T_H <= #T_h`` for a single refinement step."""
    if fine is coarse:
        return True
    counts = np.bincount(fine.parent, minlength=coarse.n_elements)
    n_refined = int(np.sum(counts > 1))
    return n_refined + coarse.n_elements <= fine.n_elements


def closure_ratio(marked_counts, n_elements, n_initial) -> float:
    """``(#T_l - #T_0) / sum_j #M_j``, an empirical mesh-closure constant."""
    total = int(np.sum(marked_counts))
    if len(marked_counts) == 0:
        raise ValueError("closure ratio needs at least one refinement step")
    if total == 0:
        raise ZeroDivisionError("no element has been marked")
    return (n_elements - n_initial) / total


def prolongate(mesh: Mesh, values):
    """Interpolate vertex values of the parent mesh onto ``mesh`` (exact for P1)."""
    values = np.asarray(values)
    vp = mesh.vertex_parents
    return np.concatenate([values, 0.5 * (values[vp[:, 0]] + values[vp[:, 1]])])


def read_mesh(path) -> Mesh:
    """Read the plain-text mesh format written by :func:`write_mesh`."""
    tokens = Path(path).read_text().split("\n")
    lines = [ln.split() for ln in tokens if ln.strip() and not ln.lstrip().startswith("#")]
    pos = 0
    nv = int(lines[pos][0]); pos += 1
    vertices = np.array([[float(x) for x in lines[pos + i][:2]] for i in range(nv)])
    pos += nv
    nt = int(lines[pos][0]); pos += 1
    rows = np.array([[int(x) for x in lines[pos + i][:4]] for i in range(nt)], dtype=np.int64)
    pos += nt
    labels = [(int(r[0]), int(r[1]), r[2]) for r in lines[pos:]]
    return build_initial(vertices, rows[:, :3], labels, refinement_edges=rows[:, 3])


def write_mesh(mesh: Mesh, path) -> None:
    """Write vertices, triangles (with refinement-edge index) and boundary labels.

    The refinement-edge index is the local index of the vertex opposite the
    refinement edge, which is always 2 in this representation.
    """
    out = [f"{mesh.n_vertices}"]
    out += [f"{x:.17g} {y:.17g}" for x, y in mesh.coordinates]
    out.append(f"{mesh.n_elements}")
    out += [f"{a} {b} {c} 2" for a, b, c in mesh.elements]
    out += [f"{a} {b} {lab}" for (a, b), lab in zip(mesh.boundary_edges, mesh.boundary_labels)]
    Path(path).write_text("\n".join(out) + "\n")
