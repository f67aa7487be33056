"""
Steady fixed-depth momentum model with turbine drag, the tidal-farm power
functional and its discrete adjoint.

The velocity satisfies

    u . grad(u) + C_D |u| u / b - div(nu grad(u)) = 0

with ``u = (u_in, 0)`` on the inflow boundary, zero normal stress on the
outflow and free slip (normal velocity zero) on the walls. Turbines raise
the drag coefficient inside square footprints.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Tuple, Union

import numpy as np

from .errors import InvalidArgumentError, ParseError
from .fem import Field, Problem, _scatter_matrix, apply_dirichlet, basis_gradients, solve_linear, triangle_quadrature
from .mesh import INFLOW, WALL, TriMesh, build_structured_mesh, swap_markers

__all__ = [
    "BACKGROUND_DRAG",
    "SEAWATER_DENSITY",
    "GRAVITY",
    "Turbine",
    "Scenario",
    "FootprintRule",
    "footprint_rule",
    "drag_coefficient",
    "bathymetry_at",
    "MomentumProblem",
    "LinearisedMomentumProblem",
    "residual_form",
    "qoi",
    "adjoint_solve",
    "initial_mesh",
    "solve_forward",
    "mirror_scenario",
    "translate_scenario",
    "read_scenario",
    "write_scenario",
]

BACKGROUND_DRAG = 0.0025
SEAWATER_DENSITY = 1030.0
GRAVITY = 9.81  # documentation only: the fixed-depth model has no free surface
DEFAULT_DIAMETER = 18.0
DEFAULT_THRUST = 0.8
MIN_SPACING = 50.0


@dataclass(frozen=True)
class Turbine:
    x: float
    y: float
    diameter: float = DEFAULT_DIAMETER
    thrust_coefficient: float = DEFAULT_THRUST

    @property
    def center(self):
        return (self.x, self.y)

    @property
    def bounds(self):
        r = 0.5 * self.diameter
        return self.x - r, self.x + r, self.y - r, self.y + r

    @property
    def footprint_area(self) -> float:
        return self.diameter ** 2

    @property
    def swept_area(self) -> float:
        return math.pi * (0.5 * self.diameter) ** 2

    @property
    def drag(self) -> float:
        """Footprint drag coefficient ``0.5 * A_swept / A_footprint * c_T``."""
        return 0.5 * self.swept_area / self.footprint_area * self.thrust_coefficient

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        x0, x1, y0, y1 = self.bounds
        return (p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)


@dataclass(frozen=True)
class Scenario:
    """
    A tidal farm configuration.

    ``bathymetry`` is either a constant depth in metres or ``"trench"``,
    the parabolic valley ``160 + 40 y~ (1 - y~)`` with ``y~`` the height
    rescaled to [0, 1]. ``inflow_side`` selects which vertical boundary is
    the inflow; ``inflow_speed`` is the signed x-velocity imposed there.
    """

    turbines: Tuple[Turbine, ...] = ()
    width: float = 1200.0
    height: float = 500.0
    viscosity: float = 0.5
    bathymetry: Union[float, str] = 40.0
    inflow_speed: float = 5.0
    inflow_side: str = "left"
    background_drag: float = BACKGROUND_DRAG
    density: float = SEAWATER_DENSITY
    gravity: float = GRAVITY
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "turbines", tuple(self.turbines))

    def validate(self, margin=MIN_SPACING, spacing=MIN_SPACING):
        if not (self.width > 0 and self.height > 0):
            raise InvalidArgumentError("domain dimensions must be positive")
        if self.viscosity <= 0:
            raise InvalidArgumentError("viscosity must be positive")
        if self.background_drag <= 0:
            raise InvalidArgumentError("background drag must be positive")
        if self.inflow_side not in ("left", "right"):
            raise InvalidArgumentError("inflow_side must be 'left' or 'right'")
        if isinstance(self.bathymetry, str):
            if self.bathymetry != "trench":
                raise InvalidArgumentError(f"unknown bathymetry profile '{self.bathymetry}'")
        elif self.bathymetry <= 0:
            raise InvalidArgumentError("bathymetry must be positive")
        for t in self.turbines:
            if t.diameter <= 0 or not 0 < t.thrust_coefficient < 1:
                raise InvalidArgumentError("turbine needs D > 0 and 0 < c_T < 1")
            if not (margin <= t.x <= self.width - margin and margin <= t.y <= self.height - margin):
                raise InvalidArgumentError(f"turbine at ({t.x}, {t.y}) too close to the boundary")
        c = np.array([t.center for t in self.turbines]).reshape(-1, 2)
        if len(c) > 1:
            d = np.linalg.norm(c[:, None] - c[None], axis=2)
            np.fill_diagonal(d, np.inf)
            if d.min() < spacing:
                raise InvalidArgumentError("turbines closer than the minimum spacing")
        return self

    @property
    def inflow_velocity(self):
        return np.array([self.inflow_speed, 0.0])


def bathymetry_at(scenario: Scenario, points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    if isinstance(scenario.bathymetry, str):
        yt = p[..., 1] / scenario.height
        return 160.0 + 40.0 * yt * (1.0 - yt)
    return np.full(p.shape[:-1], float(scenario.bathymetry))


def drag_coefficient(scenario: Scenario, point) -> float:
    """Total drag coefficient at a point: background plus any footprint drag."""
    p = np.asarray(point, dtype=float).reshape(1, 2)
    c = scenario.background_drag
    for t in scenario.turbines:
        if t.contains(p)[0]:
            c += t.drag
    return c


@dataclass(frozen=True)
class FootprintRule:
    """
    Quadrature points covering the parts of elements inside turbine
    footprints. ``weights`` are absolute (they include the sub-area) and
    ``drag`` holds the footprint drag coefficient at each point.
    """

    elements: np.ndarray
    bary: np.ndarray
    weights: np.ndarray
    drag: np.ndarray

    def element_area(self, n_elements) -> np.ndarray:
        return np.bincount(self.elements, weights=self.weights, minlength=n_elements)

    def element_drag(self, n_elements) -> np.ndarray:
        return np.bincount(self.elements, weights=self.weights * self.drag, minlength=n_elements)


def _clip_polygon(poly, bounds):
    x0, x1, y0, y1 = bounds
    planes = [(0, x0, 1.0), (0, x1, -1.0), (1, y0, 1.0), (1, y1, -1.0)]
    for axis, c, sgn in planes:
        if not poly:
            break
        out = []
        n = len(poly)
        for i in range(n):
            p, q = poly[i], poly[(i + 1) % n]
            fp, fq = sgn * (p[axis] - c), sgn * (q[axis] - c)
            if fp >= 0:
                out.append(p)
            if (fp >= 0) != (fq >= 0):
                s = fp / (fp - fq)
                out.append((p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])))
        poly = out
    return poly


def footprint_rule(scenario: Scenario, mesh: TriMesh, degree: int = 4) -> FootprintRule:
    """
    Degree-``degree`` quadrature over the intersection of each element with
    each footprint. Elements cut by a footprint edge are clipped exactly and
    the clipped polygon is fan-triangulated.
    """
    pts, w = triangle_quadrature(degree)
    P = mesh.vertices[mesh.triangles]
    lo, hi = P.min(axis=1), P.max(axis=1)
    T = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=2)
    elems, bary, weights, drag = [], [], [], []
    for t in scenario.turbines:
        x0, x1, y0, y1 = t.bounds
        cand = np.flatnonzero((hi[:, 0] > x0) & (lo[:, 0] < x1) & (hi[:, 1] > y0) & (lo[:, 1] < y1))
        if len(cand) == 0:
            continue
        inside = np.all(t.contains(P[cand].reshape(-1, 2)).reshape(-1, 3), axis=1)
        full = cand[inside]
        if len(full):
            elems.append(np.repeat(full, len(w)))
            bary.append(np.tile(pts, (len(full), 1)))
            weights.append(np.outer(mesh.areas[full], w).ravel())
            drag.append(np.full(len(full) * len(w), t.drag))
        # clipped elements: fan-triangulate, then map all sub-rules at once
        sub_k, sub_tri = [], []
        for k in cand[~inside]:
            poly = _clip_polygon([tuple(p) for p in P[k]], t.bounds)
            for i in range(1, len(poly) - 1):
                sub_k.append(k)
                sub_tri.append((poly[0], poly[i], poly[i + 1]))
        if not sub_k:
            continue
        sk = np.array(sub_k, dtype=np.int64)
        tri = np.array(sub_tri, dtype=float)  # (S, 3, 2)
        e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
        sub = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        keep = sub > 1e-14 * mesh.areas[sk]
        sk, tri, sub = sk[keep], tri[keep], sub[keep]
        xq = np.einsum("qa,sad->sqd", pts, tri)
        rs = np.einsum("sij,sqj->sqi", np.linalg.inv(T[sk]), xq - P[sk, 0][:, None, :])
        b = np.concatenate([1.0 - rs.sum(axis=2, keepdims=True), rs], axis=2)
        elems.append(np.repeat(sk, len(w)))
        bary.append(b.reshape(-1, 3))
        weights.append(np.outer(sub, w).ravel())
        drag.append(np.full(len(sk) * len(w), t.drag))
    if not elems:
        return FootprintRule(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0), np.zeros(0))
    return FootprintRule(
        np.concatenate(elems).astype(np.int64), np.concatenate(bary), np.concatenate(weights), np.concatenate(drag)
    )


def _wall_and_inflow_constraints(mesh: TriMesh, inflow_value):
    """Dirichlet dofs: both components on inflow, the normal one on walls."""
    N = mesh.n_vertices
    wall = mesh.boundary_markers == WALL
    we = mesh.boundary_edges[wall]
    tvec = mesh.vertices[we[:, 1]] - mesh.vertices[we[:, 0]]
    comp = np.where(np.abs(tvec[:, 0]) >= np.abs(tvec[:, 1]), 1, 0)
    wall_dofs = np.unique(np.concatenate([we[:, 0] + comp * N, we[:, 1] + comp * N]))
    inflow_v = np.unique(mesh.boundary_edges[mesh.boundary_markers == INFLOW])
    g = inflow_value(mesh.vertices[inflow_v])
    inflow_dofs = np.concatenate([inflow_v, inflow_v + N])
    inflow_vals = np.concatenate([g[:, 0], g[:, 1]])
    wall_dofs = np.setdiff1d(wall_dofs, inflow_dofs)
    dofs = np.concatenate([inflow_dofs, wall_dofs])
    vals = np.concatenate([inflow_vals, np.zeros(len(wall_dofs))])
    order = np.argsort(dofs)
    return dofs[order], vals[order]


class _MomentumBase(Problem):
    space = "VP1"

    def __init__(self, scenario: Scenario, mesh: TriMesh, stabilise=True, degree=4):
        super().__init__(mesh)
        self.scenario = scenario
        self.stabilise = stabilise
        self.degree = degree

    @cached_property
    def gradients(self):
        return basis_gradients(self.mesh)

    @cached_property
    def quadrature(self):
        # the bulk integrands are quadratic apart from the weak |u| factor
        # of the background drag; footprints use the ``degree`` rule
        return triangle_quadrature(2)

    @cached_property
    def depth(self) -> np.ndarray:
        """Element-mean bathymetry (P0)."""
        pts, w = triangle_quadrature(2)
        xq = np.einsum("qa,kad->kqd", pts, self.mesh.vertices[self.mesh.triangles])
        return bathymetry_at(self.scenario, xq) @ w

    @cached_property
    def element_size(self) -> np.ndarray:
        p = self.mesh.vertices[self.mesh.triangles]
        return np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2).max(axis=1)

    @cached_property
    def footprints(self) -> FootprintRule:
        return footprint_rule(self.scenario, self.mesh, self.degree)

    @cached_property
    def element_drag(self) -> np.ndarray:
        """Element-mean drag coefficient."""
        fp = self.footprints
        return self.scenario.background_drag + fp.element_drag(self.mesh.n_elements) / self.mesh.areas

    def inflow_value(self, x):
        return np.tile(self.scenario.inflow_velocity, (len(x), 1))

    def dirichlet(self):
        return self._bc

    @cached_property
    def _bc(self):
        return _wall_and_inflow_constraints(self.mesh, self.inflow_value)

    def _values(self, dofs):
        N = self.mesh.n_vertices
        return np.asarray(dofs, dtype=float).reshape(2, N).T

    def element_functional(self, dofs, test_dofs) -> np.ndarray:
        """Per-element weak residual with ``test_dofs`` as the test function."""
        r_loc, _ = self.element_terms(dofs, jacobian=False)
        z = np.asarray(test_dofs)[self.element_dofs]
        return np.einsum("ka,ka->k", r_loc, z)

    def adjoint(self, state) -> Field:
        """
        Solve the discrete adjoint problem linearised about ``state``.
        Dirichlet dofs of the adjoint are zero.
        """
        x = state.dofs if isinstance(state, Field) else np.asarray(state, dtype=float)
        r_loc, J_loc = self.element_terms(x, jacobian=True)
        bc, _ = self.dirichlet()
        A = apply_dirichlet(_scatter_matrix(self, J_loc), bc, columns=True)
        j = self.qoi_gradient(x)
        j[bc] = 0.0
        return self.field(solve_linear(A.T.tocsc(), j))

    def initial_state(self) -> Field:
        """Uniform inflow velocity with the Dirichlet data applied."""
        U = np.tile(self.scenario.inflow_velocity, (self.mesh.n_vertices, 1))
        x = U.T.ravel().copy()
        bc, vals = self.dirichlet()
        x[bc] = vals
        return self.field(x)


class MomentumProblem(_MomentumBase):
    """
    Galerkin discretisation with streamline-upwind stabilisation
    ``tau = h / (2 |u|) min(1, Pe / 3)``, ``Pe = |u| h / (2 nu)``, where
    ``|u|`` is taken at the element centroid and ``h`` is the longest edge.

    :kwarg forcing: optional body force ``f(x) -> (..., 2)`` added to the
        right-hand side (used for manufactured solutions)
    :kwarg dirichlet_value: optional inflow velocity ``g(x) -> (n, 2)``
    """

    def __init__(self, scenario, mesh, stabilise=True, degree=4, forcing=None, dirichlet_value=None):
        super().__init__(scenario, mesh, stabilise, degree)
        self.forcing = forcing
        self.dirichlet_value = dirichlet_value

    def with_mesh(self, mesh):
        return MomentumProblem(self.scenario, mesh, self.stabilise, self.degree, self.forcing, self.dirichlet_value)

    def inflow_value(self, x):
        if self.dirichlet_value is not None:
            return np.asarray(self.dirichlet_value(x), dtype=float).reshape(-1, 2)
        return super().inflow_value(x)

    @cached_property
    def _forcing_at_quadrature(self):
        pts, _ = self.quadrature
        xq = np.einsum("qa,kad->qkd", pts, self.mesh.vertices[self.mesh.triangles])
        return np.asarray(self.forcing(xq), dtype=float)

    def _tau(self, Ubar):
        nu = self.scenario.viscosity
        h = self.element_size
        M = len(h)
        if not self.stabilise:
            return np.zeros(M), np.zeros((M, 2))
        s = np.linalg.norm(Ubar, axis=1)
        pe = s * h / (2.0 * nu)
        adv = pe >= 3.0
        safe = np.where(adv, s, 1.0)
        tau = np.where(adv, h / (2.0 * safe), h * h / (12.0 * nu))
        dtau_ds = np.where(adv, -h / (2.0 * safe ** 2), 0.0)
        # d|Ubar|/dU_{b,e} = Ubar_e / (3 |Ubar|) for every local node b
        dtau = (dtau_ds / (3.0 * safe))[:, None] * np.where(adv[:, None], Ubar, 0.0)
        return tau, dtau

    def element_terms(self, dofs, jacobian=True):
        mesh = self.mesh
        G = self.gradients
        area = mesh.areas
        nu = self.scenario.viscosity
        U = self._values(dofs)
        Ue = U[mesh.triangles]  # (M, 3, 2) [node, component]
        L = np.einsum("kac,kad->kcd", Ue, G)  # L[c, d] = dU_c / dx_d
        tau, dtau = self._tau(Ue.mean(axis=1))
        M = mesh.n_elements
        eye = np.eye(2)

        r = nu * area[:, None, None] * np.einsum("kcd,kad->kca", L, G)
        Jac = None
        if jacobian:
            Jac = np.zeros((M, 2, 3, 2, 3))
            GG = nu * area[:, None, None] * np.einsum("kad,kbd->kab", G, G)
            Jac[:, 0, :, 0, :] += GG
            Jac[:, 1, :, 1, :] += GG

        pts, wts = self.quadrature
        cb = self.scenario.background_drag / self.depth
        for q, (Nq, wq) in enumerate(zip(pts, wts)):
            Uq = Nq @ Ue  # (M, 2)
            A = np.einsum("kd,kcd->kc", Uq, L)
            s = np.linalg.norm(Uq, axis=1)
            R = A + (cb * s)[:, None] * Uq
            if self.forcing is not None:
                R = R - self._forcing_at_quadrature[q]
            UG = np.einsum("kc,kac->ka", Uq, G)
            test = Nq[None, :] + tau[:, None] * UG
            wA = wq * area
            r += wA[:, None, None] * R[:, :, None] * test[:, None, :]
            if jacobian:
                safe = np.where(s > 0, s, 1.0)
                Dd = cb[:, None, None] * (s[:, None, None] * eye + np.where(
                    (s > 0)[:, None, None], Uq[:, :, None] * Uq[:, None, :] / safe[:, None, None], 0.0))
                # dR[c, e, b] = N_b (L + Dd)[c, e] + delta_ce (u . grad phi_b)
                dR = Nq[None, None, None, :] * (L + Dd)[:, :, :, None] + eye[None, :, :, None] * UG[:, None, None, :]
                Jac += wA[:, None, None, None, None] * (
                    test[:, None, :, None, None] * dR[:, :, None, :, :]
                    + R[:, :, None, None, None] * (
                        dtau[:, None, None, :, None] * UG[:, None, :, None, None]
                        + tau[:, None, None, None, None] * Nq[None, None, None, None, :] * G[:, None, :, :, None]
                    )
                )

        fp = self.footprints
        if len(fp.elements):
            k = fp.elements
            Nq = fp.bary
            Uk = Ue[k]
            Uq = np.einsum("pa,pac->pc", Nq, Uk)
            s = np.linalg.norm(Uq, axis=1)
            c = fp.drag / self.depth[k]
            D = (c * s)[:, None] * Uq
            UG = np.einsum("pc,pac->pa", Uq, G[k])
            test = Nq + tau[k][:, None] * UG
            np.add.at(r, k, fp.weights[:, None, None] * D[:, :, None] * test[:, None, :])
            if jacobian:
                safe = np.where(s > 0, s, 1.0)
                Dd = c[:, None, None] * (s[:, None, None] * eye + np.where(
                    (s > 0)[:, None, None], Uq[:, :, None] * Uq[:, None, :] / safe[:, None, None], 0.0))
                add = fp.weights[:, None, None, None, None] * (
                    test[:, None, :, None, None] * Dd[:, :, None, :, None] * Nq[:, None, None, None, :]
                    + D[:, :, None, None, None] * (
                        dtau[k][:, None, None, :, None] * UG[:, None, :, None, None]
                        + tau[k][:, None, None, None, None] * Nq[:, None, None, None, :] * G[k][:, None, :, :, None]
                    )
                )
                np.add.at(Jac, k, add)

        r_loc = r.reshape(M, 6)
        return r_loc, (Jac.reshape(M, 6, 6) if jacobian else None)

    def qoi(self, dofs) -> float:
        """Power ``J = int rho C_T |u|^3 dx`` over the turbine footprints."""
        fp = self.footprints
        if len(fp.elements) == 0:
            return 0.0
        U = self._values(dofs)
        Uq = np.einsum("pa,pac->pc", fp.bary, U[self.mesh.triangles[fp.elements]])
        s = np.linalg.norm(Uq, axis=1)
        return float(self.scenario.density * np.sum(fp.weights * fp.drag * s ** 3))

    def qoi_gradient(self, dofs) -> np.ndarray:
        N = self.mesh.n_vertices
        g = np.zeros(2 * N)
        fp = self.footprints
        if len(fp.elements) == 0:
            return g
        U = self._values(dofs)
        tri = self.mesh.triangles[fp.elements]
        Uq = np.einsum("pa,pac->pc", fp.bary, U[tri])
        s = np.linalg.norm(Uq, axis=1)
        coef = 3.0 * self.scenario.density * fp.weights * fp.drag * s
        for c in range(2):
            np.add.at(g, tri + c * N, (coef * Uq[:, c])[:, None] * fp.bary)
        return g


class LinearisedMomentumProblem(_MomentumBase):
    """
    Linear surrogate of :class:`MomentumProblem`: advection by a frozen
    constant velocity ``a`` and drag linearised as ``C_D |a| u / b``. The
    functional is the linearised power ``int rho C_T |a| (a . u) dx``.
    """

    def __init__(self, scenario, mesh, stabilise=True, degree=4, velocity=None):
        super().__init__(scenario, mesh, stabilise, degree)
        self.velocity = np.asarray(scenario.inflow_velocity if velocity is None else velocity, dtype=float)

    def with_mesh(self, mesh):
        return LinearisedMomentumProblem(self.scenario, mesh, self.stabilise, self.degree, self.velocity)

    @cached_property
    def _local(self):
        mesh = self.mesh
        G = self.gradients
        area = mesh.areas
        nu = self.scenario.viscosity
        a = self.velocity
        speed = np.linalg.norm(a)
        h = self.element_size
        M = mesh.n_elements
        if self.stabilise and speed > 0:
            pe = speed * h / (2 * nu)
            tau = np.where(pe >= 3.0, h / (2 * speed), h * h / (12 * nu))
        else:
            tau = np.zeros(M)
        aG = G @ a  # (M, 3) a . grad(phi)
        pts, wts = self.quadrature
        sigma_b = self.scenario.background_drag * speed / self.depth
        # scalar block, identical for both components
        S = nu * area[:, None, None] * np.einsum("kad,kbd->kab", G, G)
        for Nq, wq in zip(pts, wts):
            test = Nq[None, :] + tau[:, None] * aG
            trial = aG + sigma_b[:, None] * Nq[None, :]
            S += (wq * area)[:, None, None] * test[:, :, None] * trial[:, None, :]
        fp = self.footprints
        if len(fp.elements):
            k = fp.elements
            test = fp.bary + tau[k][:, None] * aG[k]
            sig = fp.drag * speed / self.depth[k]
            np.add.at(S, k, (fp.weights * sig)[:, None, None] * test[:, :, None] * fp.bary[:, None, :])
        Jac = np.zeros((M, 6, 6))
        Jac[:, :3, :3] = S
        Jac[:, 3:, 3:] = S
        return Jac

    def element_terms(self, dofs, jacobian=True):
        Jac = self._local
        x = np.asarray(dofs, dtype=float)[self.element_dofs]
        r = np.einsum("kab,kb->ka", Jac, x)
        return r, (Jac if jacobian else None)

    def qoi(self, dofs) -> float:
        return float(self.qoi_gradient(dofs) @ np.asarray(dofs, dtype=float))

    def qoi_gradient(self, dofs=None) -> np.ndarray:
        N = self.mesh.n_vertices
        g = np.zeros(2 * N)
        fp = self.footprints
        if len(fp.elements) == 0:
            return g
        a = self.velocity
        coef = self.scenario.density * fp.weights * fp.drag * np.linalg.norm(a)
        tri = self.mesh.triangles[fp.elements]
        for c in range(2):
            np.add.at(g, tri + c * N, (coef * a[c])[:, None] * fp.bary)
        return g


def residual_form(scenario: Scenario, u: Field, test: Optional[Field] = None):
    """
    Weak residual of the momentum model at ``u``.

    Without ``test`` the unconstrained residual vector ``rho(u, phi_i)`` is
    returned (one entry per basis function); with a test field the scalar
    ``rho(u, test)`` is returned.
    """
    problem = MomentumProblem(scenario, u.mesh)
    r_loc, _ = problem.element_terms(u.dofs, jacobian=False)
    if test is None:
        return np.bincount(problem.element_dofs.ravel(), weights=r_loc.ravel(), minlength=problem.n_dofs)
    return float(np.sum(problem.element_functional(u.dofs, test.dofs)))


def qoi(scenario: Scenario, u: Field) -> float:
    return MomentumProblem(scenario, u.mesh).qoi(u.dofs)


def adjoint_solve(scenario: Scenario, u_h: Field) -> Field:
    return MomentumProblem(scenario, u_h.mesh).adjoint(u_h)


def initial_mesh(scenario: Scenario, h: float = DEFAULT_DIAMETER) -> TriMesh:
    """Structured mesh of the scenario's domain with markers matching its inflow side."""
    mesh = build_structured_mesh(scenario.width, scenario.height, h)
    return swap_markers(mesh) if scenario.inflow_side == "right" else mesh


def mirror_scenario(scenario: Scenario) -> Scenario:
    """Reflect left-right: turbines mirrored, inflow side and velocity sign swapped."""
    turbines = tuple(dataclasses.replace(t, x=scenario.width - t.x) for t in scenario.turbines)
    side = "right" if scenario.inflow_side == "left" else "left"
    return dataclasses.replace(scenario, turbines=turbines, inflow_side=side, inflow_speed=-scenario.inflow_speed)


def translate_scenario(scenario: Scenario, shift) -> Scenario:
    """Shift turbine positions; pair with :func:`tidaladapt.mesh.translate_mesh`."""
    dx, dy = shift
    turbines = tuple(dataclasses.replace(t, x=t.x + dx, y=t.y + dy) for t in scenario.turbines)
    return dataclasses.replace(scenario, turbines=turbines)


# scenario files ------------------------------------------------------------

_DOMAIN_KEYS = {"width": float, "height": float}
_PHYSICS_KEYS = {
    "viscosity": float,
    "bathymetry": str,
    "inflow_speed": float,
    "inflow_side": str,
    "background_drag": float,
    "density": float,
    "name": str,
}
_TURBINE_KEYS = {"x": float, "y": float, "diameter": float, "thrust_coefficient": float}


def read_scenario(path) -> Scenario:
    """
    Parse a scenario file: ``[domain]``, ``[physics]`` and any number of
    ``[turbine]`` sections of ``key = value`` lines; ``#`` starts a comment.
    """
    with open(path) as f:
        lines = f.read().splitlines()
    section = None
    kwargs = {}
    turbines = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section == "turbine":
                turbines.append({})
            elif section not in ("domain", "physics"):
                raise ParseError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        table = {"domain": _DOMAIN_KEYS, "physics": _PHYSICS_KEYS, "turbine": _TURBINE_KEYS}.get(section)
        if table is None:
            raise ParseError("key outside of a section", lineno)
        if key not in table:
            raise ParseError(f"unknown key '{key}' in [{section}]", lineno)
        try:
            val = table[key](value)
        except ValueError:
            raise ParseError(f"bad value for '{key}'", lineno) from None
        if key == "bathymetry":
            try:
                val = float(value)
            except ValueError:
                val = value
        if section == "turbine":
            turbines[-1][key] = val
        else:
            kwargs[key] = val
    try:
        ts = tuple(Turbine(**t) for t in turbines)
    except TypeError as exc:
        raise ParseError(f"incomplete turbine section: {exc}") from None
    return Scenario(turbines=ts, **kwargs)


def write_scenario(scenario: Scenario, path):
    out = ["[domain]", f"width = {float(scenario.width)!r}", f"height = {float(scenario.height)!r}", "", "[physics]"]
    if scenario.name:
        out.append(f"name = {scenario.name}")
    out += [
        f"viscosity = {float(scenario.viscosity)!r}",
        f"bathymetry = {scenario.bathymetry!r}".replace("'", ""),
        f"inflow_speed = {float(scenario.inflow_speed)!r}",
        f"inflow_side = {scenario.inflow_side}",
        f"background_drag = {float(scenario.background_drag)!r}",
        f"density = {float(scenario.density)!r}",
    ]
    for t in scenario.turbines:
        out += ["", "[turbine]", f"x = {float(t.x)!r}", f"y = {float(t.y)!r}", f"diameter = {float(t.diameter)!r}",
                f"thrust_coefficient = {float(t.thrust_coefficient)!r}"]
    with open(path, "w") as f:
        f.write("\n".join(out) + "\n")


def solve_forward(problem: _MomentumBase, initial: Optional[Field] = None, **newton_kwargs):
    """
    Newton solve of ``problem`` starting from ``initial`` (Dirichlet values
    are imposed on it) or from the uniform inflow state.

    :returns: ``(Field, iterations)``
    """
    from .fem import newton_solve

    if initial is None:
        x0 = problem.initial_state().dofs
    else:
        x0 = initial.dofs.copy()
        bc, vals = problem.dirichlet()
        x0[bc] = vals
    newton_kwargs.setdefault("abs_tol", 1e-10)
    newton_kwargs.setdefault("rel_tol", 1e-13)
    return newton_solve(problem, x0, **newton_kwargs)
