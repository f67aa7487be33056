"""
P0/P1 Lagrange fields, triangle quadrature, sparse assembly and the
linear/nonlinear solvers.

Vector P1 fields store values as an (N, 2) array; the corresponding
degree-of-freedom vector is component-major, i.e. all x-components
followed by all y-components.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidArgumentError, NonConvergenceError, SingularSystemError
from .mesh import TriMesh

__all__ = [
    "Field",
    "triangle_quadrature",
    "basis_gradients",
    "Problem",
    "PoissonProblem",
    "assemble",
    "apply_dirichlet",
    "solve_linear",
    "newton_solve",
    "centroid_eval",
]

log = logging.getLogger(__name__)

SPACES = ("P0", "P1", "VP1")


@dataclass(frozen=True, eq=False)
class Field:
    """
    Coefficients of a finite element field.

    :arg space: ``"P0"`` (one value per element), ``"P1"`` (one per vertex)
        or ``"VP1"`` (two components per vertex)
    :arg values: coefficient array of shape (M,), (N,) or (N, 2)
    :arg mesh: the :class:`TriMesh` the field lives on
    """

    space: str
    values: np.ndarray
    mesh: TriMesh

    def __post_init__(self):
        if self.space not in SPACES:
            raise InvalidArgumentError(f"unknown space '{self.space}'")
        v = np.asarray(self.values, dtype=float)
        expected = {
            "P0": (self.mesh.n_elements,),
            "P1": (self.mesh.n_vertices,),
            "VP1": (self.mesh.n_vertices, 2),
        }[self.space]
        if v.shape != expected:
            raise InvalidArgumentError(f"{self.space} field needs shape {expected}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("field values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def dofs(self) -> np.ndarray:
        return self.values.T.ravel() if self.space == "VP1" else self.values.ravel()

    @classmethod
    def from_dofs(cls, space, mesh, dofs):
        dofs = np.asarray(dofs, dtype=float)
        if space == "VP1":
            return cls(space, dofs.reshape(2, -1).T.copy(), mesh)
        return cls(space, dofs.copy(), mesh)

    @classmethod
    def zeros(cls, space, mesh):
        shape = {"P0": (mesh.n_elements,), "P1": (mesh.n_vertices,), "VP1": (mesh.n_vertices, 2)}[space]
        return cls(space, np.zeros(shape), mesh)


# Symmetric rules on the reference triangle in barycentric coordinates;
# weights sum to one and multiply the element area.
def _orbit3(a):
    b = 1.0 - 2.0 * a
    return [[a, a, b], [a, b, a], [b, a, a]]


_W4A, _A4A = 0.22338158967801146569500700843312, 0.44594849091596488631832925388305
_W4B, _A4B = 0.10995174365532186763832632490021, 0.091576213509770743459571463402202
_S15 = np.sqrt(15.0)

_RULES = {
    1: (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    2: (np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]), np.full(3, 1 / 3)),
    4: (np.array(_orbit3(_A4A) + _orbit3(_A4B)), np.array([_W4A] * 3 + [_W4B] * 3)),
    5: (
        np.array([[1 / 3, 1 / 3, 1 / 3]] + _orbit3((6 - _S15) / 21) + _orbit3((6 + _S15) / 21)),
        np.array([9 / 40] + [(155 - _S15) / 1200] * 3 + [(155 + _S15) / 1200] * 3),
    ),
}


def triangle_quadrature(degree: int):
    """
    Return ``(points, weights)`` for the cheapest stored rule exact to at
    least ``degree``. Points are barycentric (n, 3); weights sum to one.
    """
    for d in sorted(_RULES):
        if d >= degree:
            pts, w = _RULES[d]
            return pts.copy(), w.copy()
    raise InvalidArgumentError(f"no quadrature rule of degree {degree}")


def basis_gradients(mesh: TriMesh) -> np.ndarray:
    """(M, 3, 2) gradients of the three P1 basis functions on each element."""
    p = mesh.vertices[mesh.triangles]
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
    Jinv = np.linalg.inv(J)
    G = np.empty((mesh.n_elements, 3, 2))
    G[:, 1] = Jinv[:, 0]
    G[:, 2] = Jinv[:, 1]
    G[:, 0] = -G[:, 1] - G[:, 2]
    return G


class Problem:
    """
    Interface consumed by :func:`assemble` and :func:`newton_solve`.

    Subclasses provide element-local residual vectors and Jacobian blocks
    together with Dirichlet constraints.
    """

    space = "VP1"

    def __init__(self, mesh: TriMesh):
        self.mesh = mesh

    @property
    def n_dofs(self) -> int:
        return self.mesh.n_vertices * (2 if self.space == "VP1" else 1)

    @cached_property
    def element_dofs(self) -> np.ndarray:
        t = self.mesh.triangles
        if self.space == "VP1":
            return np.concatenate([t, t + self.mesh.n_vertices], axis=1)
        return t

    @cached_property
    def _scatter(self):
        d = self.element_dofs
        L = d.shape[1]
        rows = np.repeat(d, L, axis=1).ravel()
        cols = np.tile(d, (1, L)).ravel()
        return rows, cols

    def element_terms(self, dofs, jacobian=True):
        raise NotImplementedError

    def dirichlet(self):
        """Return ``(dof indices, prescribed values)``."""
        raise NotImplementedError

    def with_mesh(self, mesh):
        raise NotImplementedError

    def field(self, dofs) -> Field:
        return Field.from_dofs(self.space, self.mesh, dofs)


def _scatter_vector(problem, r_loc):
    return np.bincount(problem.element_dofs.ravel(), weights=r_loc.ravel(), minlength=problem.n_dofs)


def _scatter_matrix(problem, J_loc):
    rows, cols = problem._scatter
    n = problem.n_dofs
    return sp.csr_matrix((J_loc.ravel(), (rows, cols)), shape=(n, n))


def apply_dirichlet(A, dofs, diagonal=1.0, columns=False):
    """
    Replace the rows (and optionally the columns) of ``dofs`` by those of
    the identity.
    """
    n = A.shape[0]
    keep = np.ones(n)
    keep[dofs] = 0.0
    K = sp.diags(keep)
    A = K @ A
    if columns:
        A = A @ K
    D = np.zeros(n)
    D[dofs] = diagonal
    return (A + sp.diags(D)).tocsr()


def assemble(problem: Problem, state, jacobian=True):
    """
    Assemble the global residual and its Jacobian.

    Dirichlet rows of the residual become ``state - boundary value`` and the
    matching Jacobian rows carry a single unit diagonal.

    :arg state: a :class:`Field` in the problem's space or a dof vector
    :returns: ``(residual, jacobian)`` with ``jacobian`` a CSR matrix or
        ``None`` when not requested
    """
    if isinstance(state, Field):
        if state.mesh is not problem.mesh and state.mesh.n_vertices != problem.mesh.n_vertices:
            raise InvalidArgumentError("state and problem live on different meshes")
        if state.space != problem.space:
            raise InvalidArgumentError(f"state in {state.space}, problem expects {problem.space}")
        x = state.dofs
    else:
        x = np.asarray(state, dtype=float)
    if x.shape != (problem.n_dofs,):
        raise InvalidArgumentError("state size does not match the problem's space")
    r_loc, J_loc = problem.element_terms(x, jacobian=jacobian)
    r = _scatter_vector(problem, r_loc)
    bc_dofs, bc_vals = problem.dirichlet()
    r[bc_dofs] = x[bc_dofs] - bc_vals
    if not jacobian:
        return r, None
    A = apply_dirichlet(_scatter_matrix(problem, J_loc), bc_dofs)
    return r, A


def solve_linear(A, b) -> np.ndarray:
    """
    Direct sparse LU solve of ``A x = b``.

    :raises SingularSystemError: if the factorisation breaks down
    """
    A = sp.csc_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise InvalidArgumentError("matrix must be square")
    b = np.asarray(b, dtype=float)
    if A.nnz and not np.all(np.isfinite(A.data)):
        raise SingularSystemError("matrix has non-finite entries")
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SingularSystemError(str(exc)) from None
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise SingularSystemError("solution is not finite")
    # one step of iterative refinement when the residual bound is missed
    res = b - A @ x
    Anorm = abs(A).sum(axis=1).max() if A.nnz else 0.0
    bound = 1e-10 * (Anorm * np.abs(x).max(initial=0.0) + np.abs(b).max(initial=0.0))
    if np.abs(res).max(initial=0.0) >= bound:
        x = x + lu.solve(res)
    return x


def newton_solve(problem: Problem, initial, abs_tol=1e-8, rel_tol=1e-10, max_iter=50, max_halvings=8):
    """
    Damped Newton iteration with a halving line search.

    A step is accepted at the first damping factor (1, 1/2, ..., 2^-max_halvings)
    that reduces the Euclidean residual norm.

    :returns: ``(solution Field, number of Newton steps taken)``
    :raises NonConvergenceError: when ``max_iter`` is exhausted or the line
        search stagnates; the error carries the last iterate
    """
    x = initial.dofs.copy() if isinstance(initial, Field) else np.asarray(initial, dtype=float).copy()
    r, _ = assemble(problem, x, jacobian=False)
    norm0 = norm = np.linalg.norm(r)
    it = 0
    while True:
        log.debug("newton %d: |r| = %.3e", it, norm)
        if norm <= abs_tol or norm <= rel_tol * norm0:
            return problem.field(x), it
        if it >= max_iter:
            raise NonConvergenceError(
                f"Newton failed to converge in {max_iter} iterations (|r| = {norm:.3e})",
                state=problem.field(x), iterations=it,
            )
        # the Jacobian is only assembled once a step is actually needed
        _, A = assemble(problem, x)
        dx = solve_linear(A, -r)
        alpha = 1.0
        for _ in range(max_halvings + 1):
            x_try = x + alpha * dx
            r_try, _ = assemble(problem, x_try, jacobian=False)
            n_try = np.linalg.norm(r_try)
            if n_try < norm:
                break
            alpha *= 0.5
        else:
            raise NonConvergenceError(
                f"line search stagnated at |r| = {norm:.3e}", state=problem.field(x), iterations=it,
            )
        x, r, norm = x_try, r_try, n_try
        it += 1


def centroid_eval(field: Field, k: int):
    """Value of a field at the centroid of element ``k``."""
    if field.space == "P0":
        return field.values[k]
    return field.values[field.mesh.triangles[k]].mean(axis=0)


class PoissonProblem(Problem):
    """
    Scalar reaction-diffusion ``-div(kappa grad u) + c u = f`` with
    Dirichlet data on the listed boundary markers.
    """

    space = "P1"

    def __init__(self, mesh, kappa=1.0, reaction=0.0, source=0.0, markers=(1, 2, 3), boundary_value=0.0):
        super().__init__(mesh)
        self.kappa = kappa
        self.reaction = reaction
        self.source = source
        self.markers = tuple(markers)
        self.boundary_value = boundary_value

    def with_mesh(self, mesh):
        return PoissonProblem(mesh, self.kappa, self.reaction, self.source, self.markers, self.boundary_value)

    @cached_property
    def _local(self):
        G = basis_gradients(self.mesh)
        area = self.mesh.areas
        K = self.kappa * area[:, None, None] * np.einsum("kad,kbd->kab", G, G)
        mass = area[:, None, None] * (np.ones((3, 3)) + np.eye(3)) / 12.0
        A = K + self.reaction * mass
        pts, w = triangle_quadrature(4)
        xq = np.einsum("qa,kad->kqd", pts, self.mesh.vertices[self.mesh.triangles])
        f = self.source(xq) if callable(self.source) else np.full(xq.shape[:2], float(self.source))
        load = area[:, None] * np.einsum("q,kq,qa->ka", w, f, pts)
        return A, load

    def element_terms(self, dofs, jacobian=True):
        A, load = self._local
        u = dofs[self.mesh.triangles]
        r = np.einsum("kab,kb->ka", A, u) - load
        return r, (A if jacobian else None)

    def dirichlet(self):
        mask = np.isin(self.mesh.boundary_markers, self.markers)
        dofs = np.unique(self.mesh.boundary_edges[mask])
        g = self.boundary_value
        vals = g(self.mesh.vertices[dofs]) if callable(g) else np.full(len(dofs), float(g))
        return dofs, vals
