import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tidaladapt.dwr import coarse_indicator
from tidaladapt.errors import InvalidArgumentError, ParseError
from tidaladapt.features import (
    FEATURE_NAMES, N_FEATURES, Dataset, extract_features, preprocess, read_dataset, shape_features, write_dataset,
)
from tidaladapt.fem import Field
from tidaladapt.mesh import TriMesh, geometry_arrays
from tidaladapt.model import MomentumProblem, initial_mesh, solve_forward
from tidaladapt.pipeline import preset_scenario


@given(st.floats(0, 2 * math.pi))
def test_isotropic_shape(theta):
    f5, f6 = shape_features(1.0, theta)
    assert np.isclose(f5, 1.0) and np.isclose(f6, 0.0, atol=1e-15)


def test_shape_stretched():
    f5, f6 = shape_features(2.0, 0.0)
    assert np.isclose(f5, 0.5) and f6 == 0.0


def test_preprocess_values():
    assert preprocess(0.0) == 0.0
    assert np.isclose(preprocess(1.0), math.pi / 4)


@given(st.floats(allow_nan=False))
def test_preprocess_range(x):
    y = preprocess(x)
    assert -math.pi / 2 <= y <= math.pi / 2


@pytest.fixture(scope="module")
def aligned():
    sc = preset_scenario("aligned")
    p = MomentumProblem(sc, initial_mesh(sc, 36.0))
    u, _ = solve_forward(p)
    return sc, p, u, p.adjoint(u)


def test_schema(aligned):
    sc, p, u, z = aligned
    X = extract_features(sc, p.mesh, u, z, coarse_indicator(sc, u, z, p), p)
    assert X.shape == (p.mesh.n_elements, 32) and N_FEATURES == len(FEATURE_NAMES) == 32
    g = geometry_arrays(p.mesh)
    assert np.allclose(X[:, 1], sc.viscosity)
    assert np.allclose(X[:, 3], 40.0)
    assert np.allclose(X[:, 4], g["d"])
    assert np.allclose(X[:, 7], p.mesh.element_boundary_length)
    # the forward x-velocity at the centroid is the vertex mean
    assert np.allclose(X[:, 8], u.values[p.mesh.triangles, 0].mean(axis=1))


def test_zero_fields(aligned):
    sc, p, _, _ = aligned
    zero = Field.zeros("VP1", p.mesh)
    X = extract_features(sc, p.mesh, zero, zero, np.zeros(p.mesh.n_elements), p)
    assert np.all(X[:, 0] == 0.0) and np.all(X[:, 8:] == 0.0)


def test_coarse_length_checked(aligned):
    sc, p, u, z = aligned
    with pytest.raises(InvalidArgumentError):
        extract_features(sc, p.mesh, u, z, np.zeros(3), p)


def test_dataset_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    d = Dataset([0, 0, 1], [0, 1, 2], rng.normal(size=(3, 32)), rng.normal(size=3) * 1e-7)
    write_dataset(d, tmp_path / "d.csv")
    r = read_dataset(tmp_path / "d.csv")
    assert np.array_equal(r.features, d.features) and np.array_equal(r.targets, d.targets)
    assert np.array_equal(r.scenario_ids, d.scenario_ids) and np.array_equal(r.iterations, d.iterations)


def test_dataset_malformed(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("scenario,iter\n")
    with pytest.raises(ParseError):
        read_dataset(f)
    d = Dataset([0], [0], np.zeros((1, 32)), [1.0])
    write_dataset(d, f)
    f.write_text(f.read_text() + "0,0,1,2\n")
    with pytest.raises(ParseError):
        read_dataset(f)


GOLDEN_SCHEMA = (
    "dwr_coarse viscosity drag depth inv_jacobian shape_cos shape_sin boundary_length "
    "fwd_u_val fwd_u_dx fwd_u_dy fwd_u_dxx fwd_u_dxy fwd_u_dyy fwd_v_val fwd_v_dx fwd_v_dy fwd_v_dxx fwd_v_dxy fwd_v_dyy "
    "adj_u_val adj_u_dx adj_u_dy adj_u_dxx adj_u_dxy adj_u_dyy adj_v_val adj_v_dx adj_v_dy adj_v_dxx adj_v_dxy adj_v_dyy"
).split()


def test_schema_golden():
    assert list(FEATURE_NAMES) == GOLDEN_SCHEMA


@given(st.floats(0.1, 10.0), st.floats(0, 2 * math.pi))
def test_shape_period_pi(s, theta):
    assert np.allclose(shape_features(s, theta), shape_features(s, theta + math.pi), atol=1e-12)


def test_element_order_independent(aligned):
    sc, p, u, z = aligned
    perm = np.random.default_rng(0).permutation(p.mesh.n_elements)
    m2 = TriMesh(p.mesh.vertices, p.mesh.triangles[perm], p.mesh.boundary_edges, p.mesh.boundary_markers)
    p2 = MomentumProblem(sc, m2)
    u2, z2 = Field("VP1", u.values, m2), Field("VP1", z.values, m2)
    X = extract_features(sc, p.mesh, u, z, coarse_indicator(sc, u, z, p), p)
    X2 = extract_features(sc, m2, u2, z2, coarse_indicator(sc, u2, z2, p2), p2)
    assert np.allclose(X2, X[perm], rtol=1e-10, atol=1e-12 * np.abs(X).max())
