"""
Scenario presets and sampling, the fixed-point adaptation loop, dataset
harvesting, and convergence and timing studies.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .dwr import coarse_indicator, enriched_indicator
from .errors import InvalidArgumentError, NonConvergenceError, RemeshFailureError, SingularSystemError
from .features import Dataset, extract_features
from .mesh import TriMesh, interpolate, uniform_refine
from .metric import build_metric, complexity_schedule
from .model import MIN_SPACING, MomentumProblem, Scenario, Turbine, initial_mesh, solve_forward
from .network import MLP, load, predict_indicator
from .remesh import RemeshConfig, adapt_mesh

__all__ = [
    "PRESETS",
    "ESTIMATORS",
    "COMPONENTS",
    "preset_scenario",
    "generate_scenarios",
    "AdaptConfig",
    "IterationRecord",
    "RunRecord",
    "fixed_point_adapt",
    "harvest_dataset",
    "HarvestSummary",
    "convergence_study",
    "ConvergenceRow",
    "benchmark",
    "write_rows",
]

log = logging.getLogger(__name__)

PRESETS = ("aligned", "offset", "reversed", "trench")
ESTIMATORS = ("standard", "coarse", "e2n")
COMPONENTS = ("forward", "adjoint", "estimation", "metric", "adapt")

_ALIGNED = ((456.0, 250.0), (744.0, 250.0))
_OFFSET = ((456.0, 232.0), (744.0, 268.0))


def preset_scenario(name: str) -> Scenario:
    """
    The four named test configurations: ``aligned`` and ``offset`` pairs of
    turbines, ``reversed`` (aligned with the flow coming from the right)
    and ``trench`` (offset turbines over a parabolic valley with higher
    viscosity and inflow speed).
    """
    if name not in PRESETS:
        raise InvalidArgumentError(f"unknown preset '{name}' (choose from {', '.join(PRESETS)})")
    coords = _OFFSET if name in ("offset", "trench") else _ALIGNED
    turbines = tuple(Turbine(x, y) for x, y in coords)
    if name == "trench":
        return Scenario(turbines, viscosity=2.0, bathymetry="trench", inflow_speed=10.0, name=name)
    if name == "reversed":
        return Scenario(turbines, inflow_speed=-5.0, inflow_side="right", name=name)
    return Scenario(turbines, viscosity=0.5, bathymetry=40.0, inflow_speed=5.0, name=name)


def generate_scenarios(n: int, seed: int = 0) -> List[Scenario]:
    """
    Random training scenarios: 1 to 8 turbines with centres uniform in
    [50, 1150] x [50, 450] and at least 50 m apart; depth, inflow speed
    and viscosity uniform in [20, 100], [0.5, 6] and [0.1, 1].
    """
    if n < 1:
        raise InvalidArgumentError("n must be at least 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        count = int(rng.integers(1, 9))
        centres: list = []
        while len(centres) < count:
            p = (rng.uniform(50.0, 1150.0), rng.uniform(50.0, 450.0))
            if all(math.hypot(p[0] - q[0], p[1] - q[1]) >= MIN_SPACING for q in centres):
                centres.append(p)
        depth = rng.uniform(20.0, 100.0)
        speed = rng.uniform(0.5, 6.0)
        nu = rng.uniform(0.1, 1.0)
        out.append(Scenario(
            tuple(Turbine(x, y) for x, y in centres),
            viscosity=float(nu), bathymetry=float(depth), inflow_speed=float(speed), name=f"scenario-{i:03d}",
        ))
    return out


# ---------------------------------------------------------------------------
# fixed-point loop


@dataclass(frozen=True)
class AdaptConfig:
    """
    Settings of the fixed-point adaptation loop. Convergence checks are
    skipped for the first ``min_iterations`` iterations.
    """

    target_complexity: float = 3200.0
    min_iterations: int = 3
    max_iterations: int = 35
    qoi_rtol: float = 0.005
    element_rtol: float = 0.01
    estimator: str = "standard"
    checkpoint: Optional[str] = None
    alpha: float = 1.0
    max_stretch: float = 10.0
    initial_h: float = 18.0
    remesh: RemeshConfig = field(default_factory=RemeshConfig)

    def validate(self):
        if self.estimator not in ESTIMATORS:
            raise InvalidArgumentError(f"unknown estimator '{self.estimator}'")
        if not 0 <= self.min_iterations <= self.max_iterations or self.max_iterations < 1:
            raise InvalidArgumentError("need 0 <= min_iterations <= max_iterations and max_iterations >= 1")
        if self.qoi_rtol <= 0 or self.element_rtol <= 0:
            raise InvalidArgumentError("tolerances must be positive")
        if self.target_complexity <= 0 or self.initial_h <= 0:
            raise InvalidArgumentError("complexity and initial mesh size must be positive")
        self.remesh.validate()
        return self


@dataclass
class IterationRecord:
    iteration: int
    n_dofs: int
    n_elements: int
    qoi: float
    newton_iterations: int
    timings: dict = field(default_factory=lambda: dict.fromkeys(COMPONENTS, 0.0))
    estimate: Optional[float] = None


@dataclass
class RunRecord:
    """Per-iteration history of one adaptation run."""

    scenario: str
    estimator: str
    iterations: List[IterationRecord] = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    mesh: Optional[TriMesh] = None
    refinements: int = 0

    @property
    def final_qoi(self) -> float:
        return self.iterations[-1].qoi if self.iterations else float("nan")

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)

    @property
    def final_dofs(self) -> int:
        return self.iterations[-1].n_dofs if self.iterations else 0

    def total_timings(self) -> dict:
        return {c: sum(r.timings[c] for r in self.iterations) for c in COMPONENTS}

    def rows(self):
        """Header and rows of the per-iteration table."""
        header = ["iteration", "dofs", "elements", "qoi", "newton"] + [f"t_{c}" for c in COMPONENTS]
        rows = [[r.iteration, r.n_dofs, r.n_elements, r.qoi, r.newton_iterations] + [r.timings[c] for c in COMPONENTS]
                for r in self.iterations]
        return header, rows


class _Clock:
    """Process-time stopwatch accumulating into a timing dict."""

    def __init__(self, timings, key):
        self.timings, self.key = timings, key

    def __enter__(self):
        self.t0 = time.process_time()

    def __exit__(self, *exc):
        self.timings[self.key] += time.process_time() - self.t0


def _load_network(config: AdaptConfig, network):
    if config.estimator != "e2n":
        return None
    if network is not None:
        return network
    if config.checkpoint is None:
        raise InvalidArgumentError("the e2n estimator needs a trained network or checkpoint")
    return load(config.checkpoint)


def _indicate(kind, scenario, mesh, u, z, problem, network):
    if kind == "standard":
        ind, _ = enriched_indicator(scenario, mesh, u, z, problem)
    elif kind == "coarse":
        ind = coarse_indicator(scenario, u, z, problem)
    else:
        ind = predict_indicator(network, scenario, mesh, u, z, problem)
    return ind


def fixed_point_adapt(scenario: Scenario, config: AdaptConfig = None, network: MLP = None,
                      mesh: TriMesh = None, observer: Callable = None) -> RunRecord:
    """
    Goal-oriented fixed-point adaptation loop. Each iteration solves the
    forward problem (starting from the previous solution), checks the QoI
    for convergence, solves the adjoint, computes error indicators with the
    configured estimator, builds a metric with the scheduled complexity and
    adapts the mesh, then checks the element count for convergence.

    :kwarg network: trained MLP for ``estimator="e2n"`` (otherwise loaded
        from ``config.checkpoint``)
    :kwarg observer: called as ``observer(i, mesh, u, z, indicator, problem)``
        after each estimation step; a true return value stops the loop
    :raises NonConvergenceError, SingularSystemError, RemeshFailureError:
        with the partial :class:`RunRecord` attached as ``record``
    """
    from .mesh import count_refinements

    config = (config or AdaptConfig()).validate()
    scenario.validate()
    net = _load_network(config, network)
    mesh = mesh if mesh is not None else initial_mesh(scenario, config.initial_h)
    record = RunRecord(scenario.name, config.estimator)
    u_prev = None
    with count_refinements() as refinements:
        try:
            for i in range(config.max_iterations):
                timings = dict.fromkeys(COMPONENTS, 0.0)
                with _Clock(timings, "forward"):
                    problem = MomentumProblem(scenario, mesh)
                    guess = None if u_prev is None else interpolate(u_prev, mesh)
                    u, newton_its = solve_forward(problem, guess)
                    J = problem.qoi(u.dofs)
                rec = IterationRecord(i, problem.n_dofs, mesh.n_elements, J, newton_its, timings)
                record.iterations.append(rec)
                record.mesh = mesh
                log.info("iteration %d: %d elements, J = %.6e", i, mesh.n_elements, J)
                if i >= config.min_iterations:
                    J_prev = record.iterations[-2].qoi
                    if abs(J - J_prev) <= config.qoi_rtol * abs(J_prev):
                        record.converged, record.reason = True, "qoi"
                        break
                with _Clock(timings, "adjoint"):
                    z = problem.adjoint(u)
                with _Clock(timings, "estimation"):
                    ind = _indicate(config.estimator, scenario, mesh, u, z, problem, net)
                rec.estimate = ind.total
                if observer is not None and observer(i, mesh, u, z, ind, problem):
                    record.reason = "stopped"
                    break
                with _Clock(timings, "metric"):
                    metric = build_metric(ind, u, complexity_schedule(i, config.target_complexity),
                                          config.alpha, config.max_stretch)
                with _Clock(timings, "adapt"):
                    new_mesh = adapt_mesh(mesh, metric, config.remesh)
                u_prev = u
                if i >= config.min_iterations:
                    if abs(new_mesh.n_elements - mesh.n_elements) <= config.element_rtol * mesh.n_elements:
                        record.converged, record.reason = True, "elements"
                        break
                mesh = new_mesh
            else:
                record.reason = "max_iterations"
        except (NonConvergenceError, SingularSystemError, RemeshFailureError) as exc:
            exc.record = record
            record.reason = f"failed: {exc}"
            raise
        finally:
            record.refinements = refinements[0]
    return record


# ---------------------------------------------------------------------------
# dataset harvesting


@dataclass
class HarvestSummary:
    scenarios: int = 0
    skipped: int = 0
    rows: int = 0
    skipped_names: list = field(default_factory=list)


def harvest_dataset(scenarios, per_scenario_iters: int = 3, config: AdaptConfig = None,
                    return_summary: bool = False, first_id: int = 0):
    """
    Run the standard loop on each scenario and collect one row per element
    (32 features, enriched-indicator target) on the initial mesh and the
    first ``per_scenario_iters - 1`` adapted meshes. Scenarios whose solves
    fail are skipped with a warning.
    """
    if per_scenario_iters < 1:
        raise InvalidArgumentError("per_scenario_iters must be positive")
    base = config or AdaptConfig()
    config = dataclasses.replace(base, estimator="standard", max_iterations=per_scenario_iters,
                                 min_iterations=per_scenario_iters)
    parts = []
    summary = HarvestSummary()
    for sid, sc in enumerate(scenarios, start=first_id):
        rows = []

        def observer(i, mesh, u, z, ind, problem):
            coarse = coarse_indicator(sc, u, z, problem)
            X = extract_features(sc, mesh, u, z, coarse, problem)
            rows.append(Dataset(np.full(len(X), sid), np.full(len(X), i), X, ind.values))
            return i + 1 >= per_scenario_iters

        summary.scenarios += 1
        try:
            fixed_point_adapt(sc, config, observer=observer)
        except (NonConvergenceError, SingularSystemError, RemeshFailureError) as exc:
            log.warning("skipping scenario %d (%s): %s", sid, sc.name, exc)
            summary.skipped += 1
            summary.skipped_names.append(sc.name)
            continue
        parts.extend(rows)
    data = Dataset.concatenate(parts)
    summary.rows = len(data)
    if summary.skipped:
        log.warning("harvest skipped %d of %d scenarios", summary.skipped, summary.scenarios)
    return (data, summary) if return_summary else data


# ---------------------------------------------------------------------------
# studies


@dataclass
class ConvergenceRow:
    method: str
    complexity: float
    dofs: int
    qoi: float
    error: float
    cpu: float
    iterations: int = 1
    converged: bool = True

    HEADER = ("method", "complexity", "dofs", "qoi", "relative_error", "cpu_seconds", "iterations", "converged")

    def as_list(self):
        return [self.method, self.complexity, self.dofs, self.qoi, self.error, self.cpu, self.iterations,
                int(self.converged)]


def convergence_study(scenario: Scenario, complexities=(), uniform_levels: int = 3, estimators=("standard",),
                      config: AdaptConfig = None, network: MLP = None) -> List[ConvergenceRow]:
    """
    QoI error against DoF count for uniform refinement and adaptive runs.
    Uniform meshes are the initial mesh refined 0 to ``uniform_levels``
    times; the finest supplies the benchmark QoI that every error is
    measured against.
    """
    if uniform_levels < 1:
        raise InvalidArgumentError("need at least one uniform refinement for the benchmark")
    config = config or AdaptConfig()
    uniform = []
    mesh = initial_mesh(scenario, config.initial_h)
    u = None
    for level in range(uniform_levels + 1):
        t0 = time.process_time()
        problem = MomentumProblem(scenario, mesh)
        u, _ = solve_forward(problem, None if u is None else interpolate(u, mesh))
        uniform.append((level, problem.n_dofs, problem.qoi(u.dofs), time.process_time() - t0))
        log.info("uniform level %d: %d dofs, J = %.8e", level, problem.n_dofs, uniform[-1][2])
        if level < uniform_levels:
            mesh = uniform_refine(mesh)
    bench = uniform[-1][2]
    rows = [ConvergenceRow("uniform", float(level), dofs, J, abs(J - bench) / abs(bench), cpu)
            for level, dofs, J, cpu in uniform]
    for kind in estimators:
        for C in complexities:
            cfg = dataclasses.replace(config, estimator=kind, target_complexity=float(C))
            t0 = time.process_time()
            rec = fixed_point_adapt(scenario, cfg, network)
            rows.append(ConvergenceRow(kind, float(C), rec.final_dofs, rec.final_qoi,
                                       abs(rec.final_qoi - bench) / abs(bench), time.process_time() - t0,
                                       rec.n_iterations, rec.converged))
    return rows


def benchmark(scenario: Scenario, config: AdaptConfig = None, network: MLP = None):
    """
    Component CPU times of one adaptation run, summed over iterations.

    :returns: ``(timings dict including "total", RunRecord)``
    """
    t0 = time.process_time()
    rec = fixed_point_adapt(scenario, config, network)
    total = time.process_time() - t0
    out = rec.total_timings()
    out["total"] = total
    return out, rec


def write_rows(path, header, rows):
    """Write a comma-separated table with a header line."""
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
