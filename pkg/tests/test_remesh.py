import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tidaladapt.errors import InvalidArgumentError, InvalidMetricError
from tidaladapt.mesh import TriMesh, build_structured_mesh
from tidaladapt.metric import MetricField
from tidaladapt.remesh import RemeshConfig, adapt_mesh, edge_lengths, element_quality, metric_edge_length


def two_triangles():
    # unit x-aligned edge (0, 1) shared by an upper and a lower triangle
    v = [[0.0, 0.0], [1.0, 0.0], [0.5, 1.0], [0.5, -1.0]]
    t = [[0, 1, 2], [0, 3, 1]]
    b = [[1, 2], [2, 0], [0, 3], [3, 1]]
    return TriMesh(v, t, b, [3, 3, 3, 3])


def test_metric_edge_length_examples():
    m = two_triangles()
    eye = np.tile(np.eye(2), (2, 1, 1))
    assert np.isclose(metric_edge_length(MetricField(eye, m), m, (0, 1)), 1.0)
    assert np.isclose(metric_edge_length(MetricField(4 * eye, m), m, (0, 1)), 2.0)
    mixed = MetricField(np.stack([np.eye(2), 9 * np.eye(2)]), m)
    assert np.isclose(metric_edge_length(mixed, m, (1, 0)), np.sqrt(5.0))


def test_metric_edge_length_bad_edge():
    m = two_triangles()
    with pytest.raises(InvalidArgumentError):
        metric_edge_length(MetricField(np.tile(np.eye(2), (2, 1, 1)), m), m, 99)


def test_edge_lengths_euclidean_for_identity():
    m = build_structured_mesh(3, 2, 0.5)
    L = edge_lengths(np.tile(np.eye(2), (m.n_elements, 1, 1)), m)
    d = np.linalg.norm(m.vertices[m.edges[:, 1]] - m.vertices[m.edges[:, 0]], axis=1)
    assert np.allclose(L, d, rtol=1e-14)


def test_identity_metric_keeps_size():
    m = build_structured_mesh(8, 6, 1.0)
    out = adapt_mesh(m, MetricField(np.tile(np.eye(2), (m.n_elements, 1, 1)), m))
    out.validate()
    assert abs(out.n_elements / m.n_elements - 1.0) < 0.2


def test_scaled_metric_refines():
    m = build_structured_mesh(8, 6, 1.0)
    out = adapt_mesh(m, MetricField(np.tile(4 * np.eye(2), (m.n_elements, 1, 1)), m))
    out.validate()
    assert 3.0 <= out.n_elements / m.n_elements <= 5.0
    assert np.isclose(out.areas.sum(), 48.0, rtol=1e-12)


def test_anisotropic_metric_stretches():
    m = build_structured_mesh(8, 6, 0.5)
    M = np.tile(np.diag([1.0, 16.0]), (m.n_elements, 1, 1))
    out = adapt_mesh(m, MetricField(M, m))
    L = edge_lengths(M[:1].repeat(out.n_elements, 0), out)
    assert 0.5 < np.median(L) < 1.5
    assert np.median(element_quality(M[:1].repeat(out.n_elements, 0), out)) > 0.5


def test_indefinite_metric_rejected():
    m = build_structured_mesh(2, 2, 1.0)
    t = np.tile(np.eye(2), (m.n_elements, 1, 1))
    t[3] = np.diag([1.0, -1.0])
    with pytest.raises(InvalidMetricError):
        adapt_mesh(m, MetricField(t, m))


def test_bad_config():
    with pytest.raises(InvalidArgumentError):
        RemeshConfig(split=0.9).validate()


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=10, deadline=None)
def test_adapted_mesh_always_valid(seed):
    rng = np.random.default_rng(seed)
    m = build_structured_mesh(6, 4, 0.5)
    A = rng.normal(size=(m.n_elements, 2, 2))
    s = 10.0 ** rng.uniform(-1, 1, size=(m.n_elements, 2))
    Q, _ = np.linalg.qr(A)
    t = np.einsum("kij,kj,klj->kil", Q, s, Q)
    out = adapt_mesh(m, MetricField(t, m))
    out.validate()
    assert np.all(out.signed_areas > 0)
    assert np.isclose(out.areas.sum(), 24.0, rtol=1e-10)
    assert set(np.unique(out.boundary_markers)) <= set(np.unique(m.boundary_markers))
