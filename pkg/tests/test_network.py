import numpy as np
import pytest

from tidaladapt.errors import DimensionMismatchError, ParseError
from tidaladapt.mesh import count_refinements
from tidaladapt.model import MomentumProblem, initial_mesh, solve_forward
from tidaladapt.network import (
    MLP, AdamState, TrainConfig, adam_step, forward, gradient, init, load, mse, predict_indicator, save, train,
)
from tidaladapt.pipeline import preset_scenario


def test_init_deterministic_and_bounded():
    a, b = init(5), init(5)
    assert np.array_equal(a.params, b.params)
    assert a.W1.shape == (64, 32) and a.W2.shape == (1, 64)
    assert np.abs(a.W1).max() <= np.sqrt(6 / 96) and np.abs(a.W2).max() <= np.sqrt(6 / 65)
    assert np.all(a.b1 == 0) and np.all(a.b2 == 0)


def test_forward_zero_network():
    m = MLP((32, 64, 1), np.zeros(init().n_params))
    assert np.all(forward(m, np.random.default_rng(0).normal(size=(7, 32))) == 0.0)


def test_forward_single_unit():
    m = MLP((32, 64, 1), np.zeros(init().n_params))
    W1, b1, W2, b2 = m.unpack()
    W1[0] = 1.0
    W2[0, 0] = 1.0
    assert forward(m, np.zeros((1, 32)))[0] == 0.5


def test_forward_rows_independent():
    m = init(1)
    X = np.random.default_rng(2).normal(size=(10, 32))
    full = forward(m, X)
    assert full.shape == (10,)
    assert np.allclose([forward(m, X[i:i + 1])[0] for i in range(10)], full, rtol=1e-14, atol=0)


def test_gradient_zero_at_fit():
    m = init(3)
    X = np.random.default_rng(0).normal(size=(10, 32))
    assert np.all(gradient(m, X, forward(m, X)) == 0.0)


def test_gradient_finite_differences():
    rng = np.random.default_rng(0)
    m = init(3)
    m.params = m.params + rng.normal(scale=0.3, size=m.n_params)
    X, y = rng.normal(size=(10, 32)), rng.normal(size=10)
    g = gradient(m, X, y)
    eps = 1e-6
    fd = np.empty_like(g)
    for j in range(m.n_params):
        p = m.params.copy()
        p[j] += eps
        lp = mse(MLP(m.dims, p), X, y)
        p[j] -= 2 * eps
        lm = mse(MLP(m.dims, p), X, y)
        fd[j] = (lp - lm) / (2 * eps)
    assert np.abs(fd - g).max() / np.abs(g).max() < 1e-6


def test_output_bias_gradient_linear_in_offset():
    m = init(4)
    X = np.random.default_rng(1).normal(size=(10, 32))
    base = forward(m, X)
    g1 = gradient(m, X, base - 1.0)[-1]
    g3 = gradient(m, X, base - 3.0)[-1]
    assert np.isclose(g1, 2.0) and np.isclose(g3, 3 * g1)


def test_adam_first_step_is_lr():
    for scale in (1e-6, 1.0, 1e6):
        s = AdamState.zeros(3)
        g = scale * np.array([1.0, -2.0, 0.5])
        p = adam_step(s, np.zeros(3), g, 0.01)
        assert np.allclose(np.abs(p), 0.01 * np.abs(g) / (np.abs(g) + 1e-8), rtol=1e-12)
        if scale >= 1.0:
            assert np.allclose(np.abs(p), 0.01, rtol=1e-6)


def test_adam_zero_gradient():
    p0 = np.array([1.0, 2.0])
    assert np.array_equal(adam_step(AdamState.zeros(2), p0, np.zeros(2), 0.1), p0)


def test_adam_golden_two_steps():
    s = AdamState.zeros(1)
    p1 = adam_step(s, np.zeros(1), np.ones(1), 0.1)
    p2 = adam_step(s, p1, np.ones(1), 0.1)
    # m_hat = v_hat = 1 at both steps, so each step is lr / (1 + eps)
    assert p1[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert p2[0] == pytest.approx(-0.2 / (1 + 1e-8), abs=1e-15)


def synthetic(n=100, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, 32))
    return X, 0.5 * X[:, 0] + 0.1


def test_train_deterministic():
    cfg = TrainConfig(epochs=5, batch_size=20)
    a, b = train(synthetic(), cfg), train(synthetic(), cfg)
    assert np.array_equal(a.val_loss, b.val_loss) and np.array_equal(a.mlp.params, b.mlp.params)


def test_train_fits_linear_target():
    res = train(synthetic(), TrainConfig(epochs=300, batch_size=20, learning_rate=1e-2, arctan_targets=False,
                                              magnitude_targets=False))
    assert res.train_loss[-1] < 0.01 * res.train_loss[0]
    assert len(res.train_loss) == len(res.val_loss) == 301


def test_magnitude_targets_ignore_sign():
    X, y = synthetic()
    cfg = TrainConfig(epochs=3, batch_size=20)
    a, b = train((X, y), cfg), train((X, -y), cfg)
    assert np.array_equal(a.mlp.params, b.mlp.params)
    c = train((X, -y), TrainConfig(epochs=3, batch_size=20, magnitude_targets=False))
    assert not np.array_equal(a.mlp.params, c.mlp.params)


def test_checkpoint_roundtrip(tmp_path):
    m = init(9)
    m.params = m.params + np.random.default_rng(0).normal(size=m.n_params)
    save(m, tmp_path / "net.txt")
    r = load(tmp_path / "net.txt")
    X = np.random.default_rng(1).normal(size=(5, 32))
    assert np.array_equal(forward(r, X), forward(m, X)) and r.arctan_targets == m.arctan_targets


def test_checkpoint_truncated(tmp_path):
    save(init(), tmp_path / "net.txt")
    lines = (tmp_path / "net.txt").read_text().splitlines()
    (tmp_path / "cut.txt").write_text("\n".join(lines[:10]) + "\n")
    with pytest.raises(ParseError):
        load(tmp_path / "cut.txt")


def test_checkpoint_dimension_mismatch(tmp_path):
    save(init(0, (32, 16, 1)), tmp_path / "net.txt")
    with pytest.raises(DimensionMismatchError):
        load(tmp_path / "net.txt")
    assert load(tmp_path / "net.txt", dims=(32, 16, 1)).dims == (32, 16, 1)


def test_predict_indicator_no_refinement():
    sc = preset_scenario("offset")
    p = MomentumProblem(sc, initial_mesh(sc, 36.0))
    u, _ = solve_forward(p)
    z = p.adjoint(u)
    with count_refinements() as n:
        ind = predict_indicator(init(0), sc, p.mesh, u, z, p)
    assert n[0] == 0
    assert len(ind) == p.mesh.n_elements
