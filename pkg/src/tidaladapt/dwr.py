"""
Dual weighted residual error estimation.

The residual is ``rho(u, v) = -F(u; v)`` where ``F`` is the weak form
assembled by the model, so that ``J(u) - J(u_h) ~ rho(u_h, u* - u*_h)``.
Element indicators are signed error contributions that sum to the global
estimator.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import IllConditionedEffectivityError, InvalidArgumentError
from .fem import Field
from .mesh import TriMesh, project_indicator, prolong, uniform_refine
from .model import MomentumProblem, Scenario, solve_forward

__all__ = [
    "IndicatorField",
    "coarse_indicator",
    "enriched_indicator",
    "estimator_effectivity",
    "element_residual",
]


@dataclass(frozen=True, eq=False)
class IndicatorField:
    """Per-element (P0) error contributions on a single mesh."""

    values: np.ndarray
    mesh: TriMesh

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.mesh.n_elements,):
            raise InvalidArgumentError("indicator needs one value per element")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @cached_property
    def total(self) -> float:
        return float(np.sum(self.values))

    def field(self) -> Field:
        return Field("P0", self.values.copy(), self.mesh)

    def __len__(self):
        return len(self.values)


def _same_mesh(a: TriMesh, b: TriMesh) -> bool:
    if a is b:
        return True
    return (
        a.vertices.shape == b.vertices.shape
        and a.triangles.shape == b.triangles.shape
        and np.array_equal(a.triangles, b.triangles)
        and np.array_equal(a.vertices, b.vertices)
    )


def _problem(scenario, mesh, problem):
    if problem is None:
        return MomentumProblem(scenario, mesh)
    return problem if problem.mesh is mesh else problem.with_mesh(mesh)


def element_residual(problem, u: Field, weight: Field) -> np.ndarray:
    """Per-element ``rho(u, weight)|_K`` for the given problem."""
    return -problem.element_functional(u.dofs, weight.dofs)


def coarse_indicator(scenario: Scenario, u_h: Field, u_star_h: Field, problem=None) -> IndicatorField:
    """
    Base-space indicator ``rho(u_h, u*_h)|_K``: the weak residual weighted
    by the adjoint itself. Cheap, but its total vanishes by Galerkin
    orthogonality.

    :kwarg problem: discretisation to use (defaults to :class:`MomentumProblem`)
    """
    if not _same_mesh(u_h.mesh, u_star_h.mesh):
        raise InvalidArgumentError("forward and adjoint fields live on different meshes")
    prob = _problem(scenario, u_h.mesh, problem)
    return IndicatorField(element_residual(prob, u_h, u_star_h), u_h.mesh)


def enriched_indicator(scenario: Scenario, base_mesh: TriMesh, u_h: Field, u_star_h: Field, problem=None):
    """
    Enrichment-based indicator. The adjoint is re-solved on the uniformly
    refined mesh, linearised about the prolonged forward state, and the
    residual of the prolonged state is weighted with the enriched adjoint
    error ``u*_{h/2} - P[u*_h]``. Fine contributions are summed onto their
    parents.

    :returns: ``(IndicatorField on base_mesh, estimator)``
    """
    if not (_same_mesh(u_h.mesh, base_mesh) and _same_mesh(u_star_h.mesh, base_mesh)):
        raise InvalidArgumentError("fields must live on the base mesh")
    fine = uniform_refine(base_mesh)
    prob = _problem(scenario, fine, problem)
    u_f = prolong(u_h, fine)
    z_f = prob.adjoint(u_f)
    w = Field("VP1", z_f.values - prolong(u_star_h, fine).values, fine)
    fine_values = element_residual(prob, u_f, w)
    ind = IndicatorField(project_indicator(fine_values, fine.parent_map), base_mesh)
    return ind, ind.total


def estimator_effectivity(scenario: Scenario, base_mesh: TriMesh, reference_levels: int, problem=None) -> float:
    """
    Ratio of the enriched estimator to the true error ``J(u_ref) - J(u_h)``
    where ``u_ref`` is solved ``reference_levels`` uniform refinements
    beyond ``base_mesh``.

    :raises IllConditionedEffectivityError: when the true error vanishes
        to round-off
    """
    if reference_levels < 0:
        raise InvalidArgumentError("reference_levels must be non-negative")
    prob = _problem(scenario, base_mesh, problem)
    u_h, _ = solve_forward(prob)
    z_h = prob.adjoint(u_h)
    _, est = enriched_indicator(scenario, base_mesh, u_h, z_h, prob)
    ref_mesh = base_mesh
    for _ in range(reference_levels):
        ref_mesh = uniform_refine(ref_mesh)
    ref = prob.with_mesh(ref_mesh)
    u_ref, _ = solve_forward(ref)
    j_ref, j_h = ref.qoi(u_ref.dofs), prob.qoi(u_h.dofs)
    if abs(j_ref - j_h) <= 1e-14 * abs(j_ref):
        raise IllConditionedEffectivityError(f"true error {j_ref - j_h:.3e} is at round-off level")
    return est / (j_ref - j_h)
