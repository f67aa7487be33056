"""
Triangular meshes: structured generation, uniform 'red' refinement with
parent maps, per-element geometry and transfer between nested meshes.
"""
from __future__ import annotations

import contextlib
import dataclasses
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateElementError,
    HierarchyMismatchError,
    InvalidArgumentError,
    ParseError,
)

__all__ = [
    "REFERENCE_AREA",
    "INFLOW",
    "OUTFLOW",
    "WALL",
    "TriMesh",
    "ElementGeometry",
    "build_structured_mesh",
    "uniform_refine",
    "count_refinements",
    "element_geometry",
    "geometry_arrays",
    "prolong",
    "inject",
    "project_indicator",
    "PointLocator",
    "interpolate",
    "mirror_mesh",
    "translate_mesh",
    "swap_markers",
    "read_mesh",
    "write_mesh",
]

# area of the reference triangle (0,0), (1,0), (0,1)
REFERENCE_AREA = 0.5

INFLOW, OUTFLOW, WALL = 1, 2, 3


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    """
    A 2D triangulation with boundary markers.

    :arg vertices: (N, 2) coordinates in metres
    :arg triangles: (M, 3) counter-clockwise vertex indices
    :arg boundary_edges: (B, 2) vertex pairs on the domain boundary
    :arg boundary_markers: (B,) markers, 1=inflow, 2=outflow, 3=wall
    :kwarg parent_map: (M,) coarse element index of each element, if the
        mesh was produced by :func:`uniform_refine`
    :kwarg vertex_parents: (N, 2) coarse vertex pair whose midpoint each
        vertex is (original vertices point to themselves twice)
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_markers: np.ndarray
    parent_map: Optional[np.ndarray] = None
    vertex_parents: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, float).reshape(-1, 2))
        object.__setattr__(self, "triangles", _frozen(self.triangles, np.int64).reshape(-1, 3))
        object.__setattr__(self, "boundary_edges", _frozen(self.boundary_edges, np.int64).reshape(-1, 2))
        object.__setattr__(self, "boundary_markers", _frozen(self.boundary_markers, np.int64).reshape(-1))
        if self.parent_map is not None:
            object.__setattr__(self, "parent_map", _frozen(self.parent_map, np.int64))
        if self.vertex_parents is not None:
            object.__setattr__(self, "vertex_parents", _frozen(self.vertex_parents, np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def _edge_data(self):
        t = self.triangles
        local = np.stack([t, np.roll(t, -1, axis=1)], axis=2).reshape(-1, 2)
        lo = local.min(axis=1)
        hi = local.max(axis=1)
        keys = lo * max(self.n_vertices, 1) + hi
        uniq, inverse = np.unique(keys, return_inverse=True)
        edges = np.stack([uniq // max(self.n_vertices, 1), uniq % max(self.n_vertices, 1)], axis=1)
        element_edges = inverse.reshape(-1, 3)
        owner = np.repeat(np.arange(self.n_elements), 3)
        order = np.argsort(inverse, kind="stable")
        counts = np.bincount(inverse, minlength=len(uniq))
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        edge_elements = -np.ones((len(uniq), 2), dtype=np.int64)
        edge_elements[:, 0] = owner[order[start]]
        two = counts >= 2
        edge_elements[two, 1] = owner[order[start[two] + 1]]
        return edges, element_edges, edge_elements, counts, uniq

    @property
    def edges(self) -> np.ndarray:
        """(E, 2) unique edges, each stored with the smaller index first."""
        return self._edge_data[0]

    @property
    def element_edges(self) -> np.ndarray:
        """(M, 3) edge index of local edge i = (t[i], t[i+1])."""
        return self._edge_data[1]

    @property
    def edge_elements(self) -> np.ndarray:
        """(E, 2) adjacent elements of each edge, -1 where absent."""
        return self._edge_data[2]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_index(self, pairs) -> np.ndarray:
        """Edge indices of vertex pairs; -1 for pairs that are not edges."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        n = max(self.n_vertices, 1)
        keys = pairs.min(axis=1) * n + pairs.max(axis=1)
        uniq = self._edge_data[4]
        idx = np.searchsorted(uniq, keys)
        idx = np.clip(idx, 0, len(uniq) - 1)
        found = uniq[idx] == keys
        return np.where(found, idx, -1)

    @cached_property
    def boundary_element(self) -> np.ndarray:
        """(B,) element owning each boundary edge."""
        eid = self.edge_index(self.boundary_edges)
        if np.any(eid < 0):
            raise InvalidArgumentError("boundary edge is not an edge of the mesh")
        return self.edge_elements[eid, 0]

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    @cached_property
    def vertex_markers(self) -> dict:
        """Map marker -> sorted array of vertices on edges with that marker."""
        out = {}
        for m in np.unique(self.boundary_markers):
            out[int(m)] = np.unique(self.boundary_edges[self.boundary_markers == m])
        return out

    @cached_property
    def element_boundary_length(self) -> np.ndarray:
        p = self.vertices[self.boundary_edges]
        lengths = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
        out = np.zeros(self.n_elements)
        np.add.at(out, self.boundary_element, lengths)
        return out

    def validate(self):
        """
        Check the mesh invariants, raising :class:`InvalidArgumentError` on
        the first violation.
        """
        if self.n_elements == 0:
            raise InvalidArgumentError("mesh has no elements")
        if self.triangles.min() < 0 or self.triangles.max() >= self.n_vertices:
            raise InvalidArgumentError("triangle references a missing vertex")
        if not np.all(np.isfinite(self.vertices)):
            raise InvalidArgumentError("non-finite vertex coordinates")
        if np.any(self.signed_areas <= 0.0):
            k = int(np.argmin(self.signed_areas))
            raise InvalidArgumentError(f"element {k} has non-positive signed area")
        counts = self._edge_data[3]
        if np.any(counts > 2):
            raise InvalidArgumentError("non-manifold edge shared by more than two elements")
        topo = self.edges[counts == 1]
        given = np.sort(self.boundary_edges, axis=1)
        if len(given) != len(topo):
            raise InvalidArgumentError(
                f"{len(given)} marked boundary edges but {len(topo)} topological ones"
            )
        n = max(self.n_vertices, 1)
        if not np.array_equal(np.sort(given[:, 0] * n + given[:, 1]), np.sort(topo[:, 0] * n + topo[:, 1])):
            raise InvalidArgumentError("boundary markers do not cover the boundary exactly")
        if self.parent_map is not None:
            if len(self.parent_map) != self.n_elements:
                raise InvalidArgumentError("parent map length mismatch")
            if np.any(np.bincount(self.parent_map) != 4):
                raise InvalidArgumentError("parent map must have exactly four children per parent")
        return self


def build_structured_mesh(width_m: float, height_m: float, h_target: float) -> TriMesh:
    """
    Right-triangle mesh of the rectangle ``[0, width] x [0, height]``.

    Each of the ``nx x ny`` cells is split along its south-west to
    north-east diagonal. Left edges are marked inflow, right edges outflow
    and the top and bottom walls.
    """
    if not (width_m > 0 and height_m > 0 and h_target > 0):
        raise InvalidArgumentError("mesh dimensions and target size must be positive")
    nx = max(1, int(math.floor(width_m / h_target + 0.5)))
    ny = max(1, int(math.floor(height_m / h_target + 0.5)))
    x = np.linspace(0.0, width_m, nx + 1)
    y = np.linspace(0.0, height_m, ny + 1)
    X, Y = np.meshgrid(x, y)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i = i.ravel()
    j = j.ravel()
    v00, v10, v11, v01 = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    ii = np.arange(nx)
    jj = np.arange(ny)
    bottom = np.column_stack([vid(ii, 0), vid(ii + 1, 0)])
    top = np.column_stack([vid(ii + 1, ny), vid(ii, ny)])
    right = np.column_stack([vid(nx, jj), vid(nx, jj + 1)])
    left = np.column_stack([vid(0, jj + 1), vid(0, jj)])
    edges = np.concatenate([bottom, right, top, left])
    markers = np.concatenate([
        np.full(nx, WALL), np.full(ny, OUTFLOW), np.full(nx, WALL), np.full(ny, INFLOW)
    ])
    return TriMesh(vertices, triangles, edges, markers)


_refine_hooks = []


@contextlib.contextmanager
def count_refinements():
    """
    Context manager yielding a one-element list that counts calls to
    :func:`uniform_refine` made inside the block.
    """
    counter = [0]

    def hook(mesh):
        counter[0] += 1

    _refine_hooks.append(hook)
    try:
        yield counter
    finally:
        _refine_hooks.remove(hook)


def uniform_refine(mesh: TriMesh) -> TriMesh:
    """
    Split every triangle into four at its edge midpoints.

    Original vertices keep their indices; the midpoint of edge ``e`` is
    vertex ``N + e``. Child ``4k + i`` has parent ``k``.
    """
    for hook in list(_refine_hooks):
        hook(mesh)
    N = mesh.n_vertices
    edges = mesh.edges
    mid = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.concatenate([mesh.vertices, mid])
    t = mesh.triangles
    m = N + mesh.element_edges  # m[:, 0] on (t0, t1), m[:, 1] on (t1, t2), m[:, 2] on (t2, t0)
    children = np.stack([
        np.column_stack([t[:, 0], m[:, 0], m[:, 2]]),
        np.column_stack([m[:, 0], t[:, 1], m[:, 1]]),
        np.column_stack([m[:, 2], m[:, 1], t[:, 2]]),
        np.column_stack([m[:, 0], m[:, 1], m[:, 2]]),
    ], axis=1).reshape(-1, 3)
    parent_map = np.repeat(np.arange(mesh.n_elements), 4)

    be = mesh.boundary_edges
    bm = N + mesh.edge_index(be)
    new_edges = np.stack([
        np.column_stack([be[:, 0], bm]), np.column_stack([bm, be[:, 1]])
    ], axis=1).reshape(-1, 2)
    new_markers = np.repeat(mesh.boundary_markers, 2)
    vertex_parents = np.concatenate([np.column_stack([np.arange(N), np.arange(N)]), edges])
    return TriMesh(vertices, children, new_edges, new_markers, parent_map, vertex_parents)


@dataclass(frozen=True)
class ElementGeometry:
    h1: float
    h2: float
    theta: float
    d: float
    s: float
    area: float
    boundary_length: float


def geometry_arrays(mesh: TriMesh) -> dict:
    """
    Vectorised element geometry for every element of ``mesh``.

    ``J`` maps the reference triangle (0,0), (1,0), (0,1) onto the element,
    so its columns are ``v1 - v0`` and ``v2 - v0``. The eigenvalues of
    ``J^T J`` (ascending) give ``h_i = 1 / sqrt(lambda_i)``.
    """
    p = mesh.vertices[mesh.triangles]
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
    detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    bad = np.abs(detJ) <= 1e-14 * np.maximum(np.einsum("kij,kij->k", J, J), 1e-300)
    if np.any(bad):
        raise DegenerateElementError(f"element {int(np.flatnonzero(bad)[0])} has zero area")
    JtJ = np.einsum("kji,kjl->kil", J, J)
    lam, vec = np.linalg.eigh(JtJ)
    h1 = 1.0 / np.sqrt(lam[:, 0])
    h2 = 1.0 / np.sqrt(lam[:, 1])
    v = vec[:, :, 0]
    flip = (v[:, 0] < 0) | ((v[:, 0] == 0) & (v[:, 1] < 0))
    v = np.where(flip[:, None], -v, v)
    theta = np.mod(np.arctan2(v[:, 1], v[:, 0]), 2 * np.pi)
    return {
        "h1": h1,
        "h2": h2,
        "theta": theta,
        "d": h1 * h2,
        "s": h1 / h2,
        "area": REFERENCE_AREA * np.abs(detJ),
        "detJ": detJ,
        "boundary_length": mesh.element_boundary_length,
    }


def element_geometry(mesh: TriMesh, k: int) -> ElementGeometry:
    if not 0 <= k < mesh.n_elements:
        raise InvalidArgumentError(f"element index {k} out of range")
    sub = TriMesh(mesh.vertices, mesh.triangles[k:k + 1], np.zeros((0, 2)), np.zeros(0))
    g = geometry_arrays(sub)
    return ElementGeometry(
        h1=float(g["h1"][0]),
        h2=float(g["h2"][0]),
        theta=float(g["theta"][0]),
        d=float(g["d"][0]),
        s=float(g["s"][0]),
        area=float(g["area"][0]),
        boundary_length=float(mesh.element_boundary_length[k]),
    )


def _check_hierarchy(coarse: TriMesh, fine: TriMesh):
    if fine.parent_map is None or fine.vertex_parents is None:
        raise HierarchyMismatchError("fine mesh carries no refinement hierarchy")
    if len(fine.parent_map) != 4 * coarse.n_elements or fine.n_vertices != coarse.n_vertices + coarse.n_edges:
        raise HierarchyMismatchError("fine mesh was not refined from this mesh")


def prolong(coarse_field, fine_mesh: TriMesh):
    """
    Transfer a P0, P1 or vector P1 field onto a uniformly refined mesh.

    Lagrange fields are reproduced exactly: each new vertex takes the mean
    of its parent edge's endpoint values. P0 children inherit the parent
    value.
    """
    _check_hierarchy(coarse_field.mesh, fine_mesh)
    v = coarse_field.values
    if coarse_field.space == "P0":
        values = v[fine_mesh.parent_map]
    else:
        vp = fine_mesh.vertex_parents
        values = 0.5 * (v[vp[:, 0]] + v[vp[:, 1]])
    return dataclasses.replace(coarse_field, mesh=fine_mesh, values=values)


def inject(fine_field, coarse_mesh: TriMesh):
    """Restrict a P1 field on a refined mesh to the coarse vertices."""
    _check_hierarchy(coarse_mesh, fine_field.mesh)
    if fine_field.space == "P0":
        raise InvalidArgumentError("injection applies to vertex-based fields")
    values = fine_field.values[: coarse_mesh.n_vertices]
    return dataclasses.replace(fine_field, mesh=coarse_mesh, values=values)


def project_indicator(fine_indicator, parent_map=None) -> np.ndarray:
    """
    Conservative projection of per-element contributions onto the parent
    mesh: each parent receives the sum of its four children.

    :arg fine_indicator: array of fine-element values, or an object with
        ``values`` and ``mesh`` attributes
    :kwarg parent_map: child to parent map; taken from the field's mesh when
        omitted
    """
    values = getattr(fine_indicator, "values", fine_indicator)
    if parent_map is None:
        mesh = getattr(fine_indicator, "mesh", None)
        parent_map = None if mesh is None else mesh.parent_map
    if parent_map is None:
        raise HierarchyMismatchError("no parent map available for projection")
    parent_map = np.asarray(parent_map)
    if len(parent_map) != len(values):
        raise HierarchyMismatchError("indicator and parent map lengths differ")
    return np.bincount(parent_map, weights=np.asarray(values, dtype=float),
                       minlength=len(parent_map) // 4)


class PointLocator:
    """
    Locate points in a mesh, returning the containing element and
    barycentric coordinates. Points outside every element snap to the
    element with the nearest centroid.
    """

    def __init__(self, mesh: TriMesh, k: int = 4):
        self.mesh = mesh
        self.k = min(k, mesh.n_elements)
        self.tree = cKDTree(mesh.centroids)
        p = mesh.vertices[mesh.triangles]
        T = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        self.origin = p[:, 0]
        self.Tinv = np.linalg.inv(T)

    def _bary(self, points, elems):
        rs = np.einsum("...ij,...j->...i", self.Tinv[elems], points - self.origin[elems])
        return np.stack([1.0 - rs[..., 0] - rs[..., 1], rs[..., 0], rs[..., 1]], axis=-1)

    def locate(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        _, cand = self.tree.query(points, k=self.k)
        cand = cand.reshape(len(points), -1)
        bary = self._bary(points[:, None, :], cand)
        inside = bary.min(axis=2) >= -1e-10
        first = np.argmax(inside, axis=1)
        rows = np.arange(len(points))
        elems = cand[rows, first]
        found = inside[rows, first]
        # widen the candidate set for misses, then fall back to brute force
        miss = np.flatnonzero(~found)
        k = self.k
        while len(miss) and k < min(256, self.mesh.n_elements):
            k = min(4 * k, self.mesh.n_elements)
            _, cand = self.tree.query(points[miss], k=k)
            cand = cand.reshape(len(miss), -1)
            bary = self._bary(points[miss][:, None, :], cand)
            inside = bary.min(axis=2) >= -1e-10
            first = np.argmax(inside, axis=1)
            hit = inside[np.arange(len(miss)), first]
            elems[miss[hit]] = cand[np.flatnonzero(hit), first[hit]]
            found[miss[hit]] = True
            miss = miss[~hit]
        for i in miss:
            b = self._bary(np.broadcast_to(points[i], (self.mesh.n_elements, 2)), np.arange(self.mesh.n_elements))
            mn = b.min(axis=1)
            elems[i] = int(np.argmax(mn))
        b = self._bary(points, elems)
        b = np.clip(b, 0.0, None)
        b /= b.sum(axis=1, keepdims=True)
        return elems, b


def interpolate(field, mesh: TriMesh, locator: Optional[PointLocator] = None):
    """Evaluate a P0/P1 field of another mesh at the dofs of ``mesh``."""
    locator = locator or PointLocator(field.mesh)
    if field.space == "P0":
        elems, _ = locator.locate(mesh.centroids)
        values = field.values[elems]
    else:
        elems, b = locator.locate(mesh.vertices)
        vals = field.values[field.mesh.triangles[elems]]
        values = np.einsum("ka,ka...->k...", b, vals)
    return dataclasses.replace(field, mesh=mesh, values=values)


def mirror_mesh(mesh: TriMesh, width: float) -> TriMesh:
    """Reflect through the line x = width / 2, keeping counter-clockwise order."""
    v = mesh.vertices.copy()
    v[:, 0] = width - v[:, 0]
    t = mesh.triangles[:, [0, 2, 1]]
    return TriMesh(v, t, mesh.boundary_edges[:, ::-1], mesh.boundary_markers)


def translate_mesh(mesh: TriMesh, shift) -> TriMesh:
    return dataclasses.replace(mesh, vertices=mesh.vertices + np.asarray(shift, dtype=float))


def swap_markers(mesh: TriMesh, a: int = INFLOW, b: int = OUTFLOW) -> TriMesh:
    m = mesh.boundary_markers.copy()
    ia, ib = m == a, m == b
    m[ia], m[ib] = b, a
    return dataclasses.replace(mesh, boundary_markers=m)


def write_mesh(mesh: TriMesh, path):
    lines = ["E2NMESH 1", str(mesh.n_vertices)]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in mesh.vertices]
    lines.append(str(mesh.n_elements))
    lines += [f"{a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(str(len(mesh.boundary_edges)))
    lines += [f"{a} {b} {m}" for (a, b), m in zip(mesh.boundary_edges, mesh.boundary_markers)]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _read_block(lines, pos, count, width, conv, what):
    rows = []
    for i in range(count):
        lineno = pos + i + 1
        if pos + i >= len(lines):
            raise ParseError(f"unexpected end of file reading {what}", lineno)
        parts = lines[pos + i].split()
        if len(parts) != width:
            raise ParseError(f"expected {width} values for {what}", lineno)
        try:
            rows.append([conv(p) for p in parts])
        except ValueError:
            raise ParseError(f"malformed {what}", lineno) from None
    return rows, pos + count


def _read_count(lines, pos, what):
    if pos >= len(lines):
        raise ParseError(f"unexpected end of file, expected {what} count", pos + 1)
    try:
        n = int(lines[pos].strip())
    except ValueError:
        raise ParseError(f"expected {what} count", pos + 1) from None
    if n < 0:
        raise ParseError(f"negative {what} count", pos + 1)
    return n, pos + 1


def read_mesh(path) -> TriMesh:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "E2NMESH 1":
        raise ParseError("missing 'E2NMESH 1' header", 1)
    n, pos = _read_count(lines, 1, "vertex")
    verts, pos = _read_block(lines, pos, n, 2, float, "vertex")
    m, pos = _read_count(lines, pos, "triangle")
    tris, pos = _read_block(lines, pos, m, 3, int, "triangle")
    b, pos = _read_count(lines, pos, "boundary edge")
    bnd, pos = _read_block(lines, pos, b, 3, int, "boundary edge")
    bnd = np.array(bnd, dtype=np.int64).reshape(-1, 3)
    return TriMesh(np.array(verts).reshape(-1, 2), np.array(tris).reshape(-1, 3), bnd[:, :2], bnd[:, 2])
