"""
Clement recovery of gradients and Hessians, and the goal-oriented
anisotropic metric built from error indicators and recovered curvature.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateIndicatorError, InvalidArgumentError, InvalidMetricError, ParseError
from .fem import Field, basis_gradients
from .mesh import REFERENCE_AREA, TriMesh

__all__ = [
    "MetricField",
    "clement_interpolate",
    "recover_gradient",
    "recover_hessian",
    "element_hessian",
    "build_metric",
    "complexity",
    "complexity_schedule",
    "stretching",
    "write_metric",
    "read_metric",
    "MAX_STRETCH",
    "INDICATOR_FLOOR",
]

MAX_STRETCH = 10.0
INDICATOR_FLOOR = 1e-30
SCHEDULE = (0.25, 0.5, 1.0)


@dataclass(frozen=True, eq=False)
class MetricField:
    """Piecewise-constant field of 2x2 SPD tensors, shape (M, 2, 2)."""

    tensors: np.ndarray
    mesh: TriMesh

    def __post_init__(self):
        t = np.asarray(self.tensors, dtype=float)
        if t.shape != (self.mesh.n_elements, 2, 2):
            raise InvalidArgumentError("metric needs one 2x2 tensor per element")
        t = 0.5 * (t + np.swapaxes(t, 1, 2))
        t.setflags(write=False)
        object.__setattr__(self, "tensors", t)

    def check(self):
        """Raise :class:`InvalidMetricError` unless every tensor is finite SPD."""
        t = self.tensors
        if not np.all(np.isfinite(t)):
            raise InvalidMetricError("metric has non-finite entries")
        det = t[:, 0, 0] * t[:, 1, 1] - t[:, 0, 1] ** 2
        bad = np.flatnonzero((t[:, 0, 0] <= 0) | (det <= 0))
        if len(bad):
            raise InvalidMetricError(f"{len(bad)} tensors are not positive definite (first: element {bad[0]})")
        return self

    @property
    def determinants(self) -> np.ndarray:
        t = self.tensors
        return t[:, 0, 0] * t[:, 1, 1] - t[:, 0, 1] ** 2


def _values_and_mesh(field, mesh):
    if isinstance(field, Field):
        return field.values, field.mesh
    if mesh is None:
        raise InvalidArgumentError("a mesh is required when passing raw arrays")
    return np.asarray(field, dtype=float), mesh


def clement_interpolate(p0_field, mesh: TriMesh = None):
    """
    Area-weighted average of element values over each vertex patch.

    Accepts a P0 :class:`Field` (returning a P1 :class:`Field`) or an array
    of shape (M, ...) with ``mesh`` (returning an array of shape (N, ...)).
    """
    values, mesh = _values_and_mesh(p0_field, mesh)
    if values.shape[0] != mesh.n_elements:
        raise InvalidArgumentError("Clement interpolation needs element values")
    area = mesh.areas
    tri = mesh.triangles.ravel()
    flat = values.reshape(mesh.n_elements, -1)
    w = np.repeat(area, 3)
    patch = np.bincount(tri, weights=w, minlength=mesh.n_vertices)
    out = np.empty((mesh.n_vertices, flat.shape[1]))
    for j in range(flat.shape[1]):
        out[:, j] = np.bincount(tri, weights=w * np.repeat(flat[:, j], 3), minlength=mesh.n_vertices)
    out /= patch[:, None]
    out = out.reshape((mesh.n_vertices,) + values.shape[1:])
    if isinstance(p0_field, Field):
        if out.ndim == 1:
            return Field("P1", out, mesh)
        if out.shape[1:] == (2,):
            return Field("VP1", out, mesh)
    return out


def _element_gradient(values, mesh, G=None):
    """Element-wise gradient of P1 data of shape (N, ...) -> (M, ..., 2)."""
    G = basis_gradients(mesh) if G is None else G
    v = values[mesh.triangles]  # (M, 3, ...)
    return np.einsum("ka...,kad->k...d", v, G)


def recover_gradient(p1_field, mesh: TriMesh = None) -> np.ndarray:
    """Clement-recovered vertex gradient (N, 2) of a scalar P1 field."""
    values, mesh = _values_and_mesh(p1_field, mesh)
    return clement_interpolate(_element_gradient(values, mesh), mesh)


def element_hessian(p1_field, mesh: TriMesh = None) -> np.ndarray:
    """
    Element-wise (P0) Hessian (M, 2, 2): the gradient of the recovered
    gradient, symmetrised.
    """
    values, mesh = _values_and_mesh(p1_field, mesh)
    H = _element_gradient(recover_gradient(values, mesh), mesh)
    return 0.5 * (H + np.swapaxes(H, 1, 2))


def recover_hessian(p1_field, mesh: TriMesh = None) -> np.ndarray:
    """
    Vertex Hessian (N, 2, 2) by two Clement recovery stages, symmetrised.
    """
    values, mesh = _values_and_mesh(p1_field, mesh)
    H = clement_interpolate(_element_gradient(recover_gradient(values, mesh), mesh), mesh)
    return 0.5 * (H + np.swapaxes(H, 1, 2))


def stretching(H: np.ndarray, max_stretch: float = MAX_STRETCH):
    """
    Stretching factor and orientation of symmetric tensors (M, 2, 2).

    :returns: ``(s, V)`` with ``s = sqrt(|lambda_max / lambda_min|)`` (by
        magnitude) clamped to [1, max_stretch], and ``V`` whose first column
        is the eigenvector of the largest-magnitude eigenvalue
    """
    lam, vec = np.linalg.eigh(H)
    order = np.argsort(np.abs(lam), axis=1)[:, ::-1]
    lam = np.take_along_axis(lam, order, axis=1)
    V = np.take_along_axis(vec, order[:, None, :], axis=2)
    big, small = np.abs(lam[:, 0]), np.abs(lam[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.sqrt(big / small)
    s = np.where(big == 0.0, 1.0, s)
    s = np.clip(np.nan_to_num(s, nan=1.0, posinf=max_stretch), 1.0, max_stretch)
    return s, V


def complexity(metric: MetricField) -> float:
    """Metric complexity ``sum_K sqrt(det M_K) |K|``."""
    metric.check()
    return float(np.sum(np.sqrt(metric.determinants) * metric.mesh.areas))


def complexity_schedule(iteration: int, target: float) -> float:
    """Ramp the target complexity: 1/4, 1/2 then the full target from iteration 2 on."""
    if iteration < 0:
        raise InvalidArgumentError("iteration must be non-negative")
    return target * SCHEDULE[min(iteration, len(SCHEDULE) - 1)]


def build_metric(indicators, u_h: Field, target_complexity: float, alpha: float = 1.0,
                 max_stretch: float = MAX_STRETCH, scaling: str = "density") -> MetricField:
    """
    Anisotropic goal-oriented metric.

    The size of each tensor follows the indicator scaling
    ``m(K) = C |E_K|^(1/(alpha+1)) / sum_J |E_J|^(1/(alpha+1))`` multiplied
    by ``|K^|/|K|`` (``scaling="density"``, the default) or by ``|K|/|K^|``
    (``scaling="literal"``). Since contributions ``E_K`` scale with the
    element area, the density form makes the new element size depend on
    the current one with exponent 1/2, a contracting fixed point; the
    literal form has exponent 3/2 and drives the adaptation loop into
    oscillation. Shape and orientation come from the entry-wise mean of the recovered
    Hessians of the velocity components at the centroid. All tensors are
    finally rescaled by one constant so that the complexity equals
    ``target_complexity``.

    :arg indicators: per-element contributions (IndicatorField, P0 Field or
        array)
    :arg u_h: vector P1 forward solution on the same mesh
    """
    if alpha < 1:
        raise InvalidArgumentError("alpha must be at least 1")
    if target_complexity <= 0:
        raise InvalidArgumentError("target complexity must be positive")
    mesh = u_h.mesh
    E = np.asarray(getattr(indicators, "values", indicators), dtype=float)
    ind_mesh = getattr(indicators, "mesh", mesh)
    if E.shape != (mesh.n_elements,) or ind_mesh.n_elements != mesh.n_elements:
        raise InvalidArgumentError("indicators and solution live on different meshes")
    if not np.all(np.isfinite(E)):
        raise InvalidArgumentError("indicators must be finite")
    if not np.any(E != 0.0):
        raise DegenerateIndicatorError("all indicators vanish")
    if scaling not in ("density", "literal"):
        raise InvalidArgumentError(f"unknown scaling '{scaling}'")
    e = np.maximum(np.abs(E), INDICATOR_FLOOR) ** (1.0 / (alpha + 1.0))
    ratio = mesh.areas / REFERENCE_AREA
    if scaling == "density":
        ratio = 1.0 / ratio
    m = ratio * target_complexity * e / e.sum()

    comps = u_h.values.reshape(mesh.n_vertices, -1)
    H = np.mean([recover_hessian(comps[:, c], mesh) for c in range(comps.shape[1])], axis=0)
    Hc = H[mesh.triangles].mean(axis=1)
    s, V = stretching(Hc, max_stretch)
    D = np.zeros((mesh.n_elements, 2, 2))
    D[:, 0, 0] = s
    D[:, 1, 1] = 1.0 / s
    T = m[:, None, None] * np.einsum("kij,kjl,kml->kim", V, D, V)
    # det(V diag(s, 1/s) V^T) = 1, so sqrt(det M_K) = m(K)
    T *= target_complexity / np.sum(m * mesh.areas)
    return MetricField(T, mesh).check()


def write_metric(metric: MetricField, path):
    t = metric.tensors
    with open(path, "w") as f:
        f.write("E2NMETRIC 1\n")
        f.write(f"{len(t)}\n")
        for a, b, c in zip(t[:, 0, 0], t[:, 0, 1], t[:, 1, 1]):
            f.write(f"{float(a)!r} {float(b)!r} {float(c)!r}\n")


def read_metric(path, mesh: TriMesh) -> MetricField:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "E2NMETRIC 1":
        raise ParseError("expected header 'E2NMETRIC 1'", 1)
    try:
        n = int(lines[1])
    except (IndexError, ValueError):
        raise ParseError("expected element count", 2) from None
    if n != mesh.n_elements:
        raise InvalidArgumentError(f"metric has {n} tensors, mesh has {mesh.n_elements} elements")
    t = np.zeros((n, 2, 2))
    for i in range(n):
        lineno = i + 3
        if lineno > len(lines):
            raise ParseError("unexpected end of file", lineno)
        parts = lines[lineno - 1].split()
        if len(parts) != 3:
            raise ParseError("expected three tensor entries", lineno)
        try:
            a, b, c = (float(p) for p in parts)
        except ValueError:
            raise ParseError("malformed number", lineno) from None
        t[i] = [[a, b], [b, c]]
    return MetricField(t, mesh).check()
