"""
Per-element input features for the error-estimation network and the
dataset file format.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError, ParseError
from .fem import Field, basis_gradients
from .mesh import TriMesh, geometry_arrays
from .metric import element_hessian
from .model import MomentumProblem, Scenario

__all__ = ["FEATURE_NAMES", "N_FEATURES", "extract_features", "preprocess", "write_dataset", "read_dataset", "Dataset"]

_DERIV = ["val", "dx", "dy", "dxx", "dxy", "dyy"]
FEATURE_NAMES = (
    ["dwr_coarse", "viscosity", "drag", "depth", "inv_jacobian", "shape_cos", "shape_sin", "boundary_length"]
    + [f"{f}_{c}_{d}" for f in ("fwd", "adj") for c in ("u", "v") for d in _DERIV]
)
N_FEATURES = len(FEATURE_NAMES)  # 32


def shape_features(s, theta):
    """Period-pi shape encoding ``((1/s)cos^2 + s sin^2, (s - 1/s) sin cos)``."""
    c, sn = np.cos(theta), np.sin(theta)
    return c * c / s + s * sn * sn, (s - 1.0 / s) * sn * c


def _solution_block(field: Field, mesh: TriMesh, G) -> np.ndarray:
    """(M, 12): per component value, gradient and Hessian at the centroid."""
    cols = []
    for c in range(2):
        v = field.values[:, c]
        ve = v[mesh.triangles]
        grad = np.einsum("ka,kad->kd", ve, G)
        H = element_hessian(v, mesh)
        cols += [ve.mean(axis=1), grad[:, 0], grad[:, 1], H[:, 0, 0], H[:, 0, 1], H[:, 1, 1]]
    return np.column_stack(cols)


def extract_features(scenario: Scenario, mesh: TriMesh, u_h: Field, u_star_h: Field, coarse, problem=None) -> np.ndarray:
    """
    Feature matrix of shape (M, 32), one row per element, in the column
    order of :data:`FEATURE_NAMES`.

    :arg coarse: the coarse DWR indicator on ``mesh`` (values per element)
    """
    for f in (u_h, u_star_h):
        if f.mesh.n_vertices != mesh.n_vertices or f.space != "VP1":
            raise InvalidArgumentError("forward and adjoint must be vector P1 fields on the mesh")
    c = np.asarray(getattr(coarse, "values", coarse), dtype=float)
    if c.shape != (mesh.n_elements,):
        raise InvalidArgumentError("coarse indicator has the wrong length")
    prob = problem if problem is not None and problem.mesh is mesh else MomentumProblem(scenario, mesh)
    geo = geometry_arrays(mesh)
    f5, f6 = shape_features(geo["s"], geo["theta"])
    G = basis_gradients(mesh)
    X = np.column_stack([
        c,
        np.full(mesh.n_elements, scenario.viscosity),
        prob.element_drag,
        prob.depth,
        geo["d"],
        f5,
        f6,
        geo["boundary_length"],
        _solution_block(u_h, mesh, G),
        _solution_block(u_star_h, mesh, G),
    ])
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError("non-finite feature values")
    return X


def preprocess(values):
    """Element-wise arctangent compression."""
    return np.arctan(values)


class Dataset:
    """
    Rows of (scenario id, iteration, 32 features, target). Targets are the
    raw enriched indicator contributions.
    """

    def __init__(self, scenario_ids, iterations, features, targets):
        self.scenario_ids = np.asarray(scenario_ids, dtype=np.int64)
        self.iterations = np.asarray(iterations, dtype=np.int64)
        self.features = np.asarray(features, dtype=float).reshape(-1, N_FEATURES)
        self.targets = np.asarray(targets, dtype=float)
        n = len(self.targets)
        if not (len(self.scenario_ids) == len(self.iterations) == len(self.features) == n):
            raise InvalidArgumentError("dataset columns have different lengths")
        if not np.all(np.isfinite(self.targets)):
            raise InvalidArgumentError("dataset targets must be finite")

    def __len__(self):
        return len(self.targets)

    @classmethod
    def concatenate(cls, parts):
        parts = list(parts)
        if not parts:
            return cls([], [], np.zeros((0, N_FEATURES)), [])
        return cls(
            np.concatenate([p.scenario_ids for p in parts]),
            np.concatenate([p.iterations for p in parts]),
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.targets for p in parts]),
        )


HEADER = ",".join(["scenario", "iter"] + [f"f{i:02d}" for i in range(N_FEATURES)] + ["target"])


def write_dataset(dataset: Dataset, path):
    with open(path, "w") as f:
        f.write(HEADER + "\n")
        for s, it, x, y in zip(dataset.scenario_ids, dataset.iterations, dataset.features, dataset.targets):
            f.write(f"{s},{it}," + ",".join(repr(float(v)) for v in x) + f",{float(y)!r}\n")


def read_dataset(path) -> Dataset:
    with open(path) as f:
        header = f.readline().strip()
        if header != HEADER:
            raise ParseError("unexpected dataset header", 1)
        ids, its, X, y = [], [], [], []
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != N_FEATURES + 3:
                raise ParseError(f"expected {N_FEATURES + 3} columns, got {len(parts)}", lineno)
            try:
                ids.append(int(parts[0]))
                its.append(int(parts[1]))
                X.append([float(v) for v in parts[2:-1]])
                y.append(float(parts[-1]))
            except ValueError:
                raise ParseError("malformed value", lineno) from None
    return Dataset(ids, its, np.array(X).reshape(-1, N_FEATURES), y)
