"""
Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The 20-scenario harvest and the trained network are cached under
``.cache/acceptance/<source hash>`` so that the expensive artefacts are
rebuilt whenever the package source changes.
"""
import hashlib
import json
import pathlib
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

import tidaladapt
from tidaladapt.dwr import coarse_indicator, enriched_indicator, estimator_effectivity
from tidaladapt.fem import Field, assemble
from tidaladapt.features import read_dataset, write_dataset
from tidaladapt.mesh import build_structured_mesh, uniform_refine
from tidaladapt.metric import MetricField, build_metric, complexity, recover_gradient, recover_hessian
from tidaladapt.model import (
    LinearisedMomentumProblem, MomentumProblem, Scenario, Turbine, initial_mesh, solve_forward,
)
from tidaladapt.network import MLP, TrainConfig, gradient, init, load, mse, predict_values, save, train
from tidaladapt.pipeline import (
    PRESETS, AdaptConfig, benchmark, convergence_study, fixed_point_adapt, generate_scenarios, harvest_dataset,
    preset_scenario,
)
from tidaladapt.remesh import adapt_mesh, edge_lengths, metric_on_mesh

ROOT = pathlib.Path(__file__).resolve().parents[1]
COMPLEXITIES = (800.0, 1600.0, 3200.0)


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def source_hash():
    h = hashlib.sha256()
    for f in sorted(pathlib.Path(tidaladapt.__file__).parent.glob("*.py")):
        h.update(f.read_bytes())
    return h.hexdigest()[:12]


@pytest.fixture(scope="session")
def cache_dir():
    d = ROOT / ".cache" / "acceptance" / source_hash()
    d.mkdir(parents=True, exist_ok=True)
    return d


@pytest.fixture(scope="session")
def harvest(cache_dir):
    path = cache_dir / "dataset.csv"
    if not path.exists():
        write_dataset(harvest_dataset(generate_scenarios(20, seed=0), per_scenario_iters=3), path)
    return read_dataset(path)


@pytest.fixture(scope="session")
def trained(cache_dir, harvest):
    """Network trained with the default hyperparameters, with its loss history and CPU time."""
    ckpt, meta = cache_dir / "e2n.txt", cache_dir / "train.json"
    if not (ckpt.exists() and meta.exists()):
        t0 = time.process_time()
        res = train(harvest, TrainConfig())
        seconds = time.process_time() - t0
        save(res.mlp, ckpt)
        meta.write_text(json.dumps({
            "seconds": seconds, "val_loss": res.val_loss.tolist(), "val_index": res.val_index.tolist(),
        }))
    info = json.loads(meta.read_text())
    return load(ckpt), info


@pytest.fixture(scope="session")
def studies(trained):
    """Uniform and adaptive convergence rows, computed once per preset."""
    net, _ = trained
    cache = {}

    def get(name):
        if name not in cache:
            t0 = time.process_time()
            rows = convergence_study(preset_scenario(name), COMPLEXITIES, 3, ("standard", "e2n"), network=net)
            cache[name] = (rows, time.process_time() - t0)
        return cache[name]

    return get


# 1 -----------------------------------------------------------------------------


def test_criterion_01_galerkin_orthogonality(capsys):
    t0 = time.process_time()
    worst = 0.0
    for name in PRESETS:
        sc = preset_scenario(name)
        p = MomentumProblem(sc, initial_mesh(sc, 18.0))
        u, _ = solve_forward(p)
        c = coarse_indicator(sc, u, p.adjoint(u), p)
        worst = max(worst, abs(c.total) / np.abs(c.values).sum())
    dt = time.process_time() - t0
    report(capsys, 1, worst <= 1e-8 and dt < 10, f"max |sum| / sum|.| = {worst:.2e} over {len(PRESETS)} presets, {dt:.1f} s")


# 2 -----------------------------------------------------------------------------


def test_criterion_02_gradient_checks(capsys):
    t0 = time.process_time()
    rng = np.random.default_rng(0)
    sc = Scenario((Turbine(50.0, 50.0, diameter=30.0),), width=100.0, height=100.0, viscosity=5.0)
    p = MomentumProblem(sc, build_structured_mesh(100.0, 100.0, 25.0))
    u = Field("VP1", np.tile([2.0, 0.3], (p.mesh.n_vertices, 1)) + rng.normal(scale=0.3, size=(p.mesh.n_vertices, 2)),
              p.mesh)
    _, A = assemble(p, u)
    A = A.toarray()
    x, eps = u.dofs, 1e-6
    fd = np.empty_like(A)
    for j in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[j] += eps
        xm[j] -= eps
        fd[:, j] = (assemble(p, p.field(xp), jacobian=False)[0] - assemble(p, p.field(xm), jacobian=False)[0]) / (2 * eps)
    jac_err = np.abs(fd - A).max() / np.abs(A).max()

    m = init(3)
    m.params = m.params + rng.normal(scale=0.3, size=m.n_params)
    X, y = rng.normal(size=(10, 32)), rng.normal(size=10)
    g = gradient(m, X, y)
    gfd = np.empty_like(g)
    for j in range(m.n_params):
        q = m.params.copy()
        q[j] += eps
        lp = mse(MLP(m.dims, q), X, y)
        q[j] -= 2 * eps
        lm = mse(MLP(m.dims, q), X, y)
        gfd[j] = (lp - lm) / (2 * eps)
    net_err = np.abs(gfd - g).max() / np.abs(g).max()
    dt = time.process_time() - t0
    ok = jac_err < 1e-5 and net_err < 1e-6 and dt < 30
    report(capsys, 2, ok, f"Jacobian rel. err {jac_err:.2e} ({len(x)} dofs), MLP gradient rel. err {net_err:.2e}, {dt:.1f} s")


# 3 -----------------------------------------------------------------------------


def test_criterion_03_recovery(capsys):
    t0 = time.process_time()
    m = build_structured_mesh(3, 2, 0.3)
    g = recover_gradient(2 * m.vertices[:, 0] + 3 * m.vertices[:, 1], m)
    grad_err = np.abs(g - [2.0, 3.0]).max()
    h = 0.1
    m = build_structured_mesh(2, 2, h)
    H = recover_hessian(m.vertices[:, 0] ** 2, m)
    x, y = m.vertices.T
    interior = (x > 2.5 * h) & (x < 2 - 2.5 * h) & (y > 2.5 * h) & (y < 2 - 2.5 * h)
    hess_err = np.abs(H[interior] - [[2.0, 0.0], [0.0, 0.0]]).max() / 2.0
    dt = time.process_time() - t0
    ok = grad_err < 1e-12 and hess_err < 1e-6 and dt < 5
    report(capsys, 3, ok, f"linear gradient err {grad_err:.1e}, x^2 Hessian rel. err {hess_err:.1e}, {dt:.2f} s")


# 4 -----------------------------------------------------------------------------


def test_criterion_04_linear_effectivity(capsys):
    # frozen unit advection, linearised drag; Galerkin (no streamline term) keeps
    # the discrete spaces and operators nested between levels
    t0 = time.process_time()
    sc = Scenario((Turbine(80.0, 50.0),), width=240.0, height=100.0, viscosity=1.0, inflow_speed=1.0)
    mesh = build_structured_mesh(240.0, 100.0, 6.0)
    effs = []
    for _ in range(3):
        effs.append(estimator_effectivity(sc, mesh, 2, LinearisedMomentumProblem(sc, mesh, stabilise=False)))
        mesh = uniform_refine(mesh)
    dt = time.process_time() - t0
    ok = all(0.5 <= e <= 1.1 for e in effs) and dt < 120
    report(capsys, 4, ok, f"effectivities {', '.join(f'{e:.3f}' for e in effs)}, {dt:.1f} s")


# 5 -----------------------------------------------------------------------------


def test_criterion_05_metric_contract(capsys):
    t0 = time.process_time()
    rng = np.random.default_rng(5)
    cases = []
    for name in ("aligned", "trench"):
        sc = preset_scenario(name)
        p = MomentumProblem(sc, initial_mesh(sc, 36.0))
        u, _ = solve_forward(p)
        ind, _ = enriched_indicator(sc, p.mesh, u, p.adjoint(u), p)
        cases.append((ind.values, u))
    m = build_structured_mesh(3, 2, 0.25)
    for _ in range(10):
        cases.append((rng.normal(size=m.n_elements) * 10.0 ** rng.uniform(-6, 6, m.n_elements),
                      Field("VP1", rng.normal(size=(m.n_vertices, 2)), m)))
    spd, cerr, serr = True, 0.0, 0.0
    for E, u in cases:
        for C in (100.0, 3200.0):
            M = build_metric(E, u, C)
            ev = np.linalg.eigvalsh(M.tensors)
            spd &= bool(np.all(ev > 0) and np.all(np.isfinite(ev)))
            cerr = max(cerr, abs(complexity(M) / C - 1.0))
            a, b = M.tensors, build_metric(3.7e5 * E, u, C).tensors
            serr = max(serr, np.abs(a - b).max() / np.abs(a).max())
    dt = time.process_time() - t0
    ok = spd and cerr <= 1e-6 and serr <= 1e-10 and dt < 10
    report(capsys, 5, ok, f"SPD {spd}, complexity rel. err {cerr:.1e}, scale invariance {serr:.1e}, {dt:.1f} s")


# 6 -----------------------------------------------------------------------------


def test_criterion_06_remesher_quality(capsys):
    t0 = time.process_time()
    fractions, valid = [], True
    for name in ("aligned", "trench"):
        sc = preset_scenario(name)
        p = MomentumProblem(sc, initial_mesh(sc, 18.0))
        u, _ = solve_forward(p)
        ind, _ = enriched_indicator(sc, p.mesh, u, p.adjoint(u), p)
        for C in (800.0, 3200.0):
            M = build_metric(ind, u, C)
            out = adapt_mesh(p.mesh, M)
            try:
                out.validate()
            except Exception:
                valid = False
            L = edge_lengths(metric_on_mesh(M, out), out)
            fractions.append(np.mean((L >= 0.5) & (L <= 2.0)))
    mesh = initial_mesh(preset_scenario("aligned"), 18.0)
    ratios = []
    for C in (800.0, 3200.0):
        c = C / (1200.0 * 500.0)
        out = adapt_mesh(mesh, MetricField(np.tile(c * np.eye(2), (mesh.n_elements, 1, 1)), mesh))
        ratios.append(out.n_vertices / C)
    dt = time.process_time() - t0
    ok = min(fractions) >= 0.9 and valid and all(0.5 <= r <= 2.0 for r in ratios) and dt < 60
    report(capsys, 6, ok, f"min edge fraction in [0.5, 2] {min(fractions):.3f}, valid {valid}, "
                          f"isotropic vertices / complexity {', '.join(f'{r:.2f}' for r in ratios)}, {dt:.1f} s")


# 7 -----------------------------------------------------------------------------


def test_criterion_07_training(capsys, harvest, trained):
    _, info = trained
    val = np.array(info["val_loss"])
    ratio = val[2000] / val[0]
    ok = len(val) == 2001 and ratio <= 0.5 and info["seconds"] < 15 * 60
    report(capsys, 7, ok, f"{len(harvest)} rows, val MSE {val[0]:.4f} -> {val[2000]:.4f} (ratio {ratio:.3f}), "
                          f"training {info['seconds'] / 60:.1f} min")


# 8 -----------------------------------------------------------------------------


def test_criterion_08_surrogate_fidelity(capsys, harvest, trained):
    net, info = trained
    t0 = time.process_time()
    va = np.array(info["val_index"])
    pred = predict_values(net, harvest.features[va])
    target = harvest.targets[va]
    rho = spearmanr(pred, target).statistic
    rho_abs = spearmanr(np.abs(pred), np.abs(target)).statistic
    dt = time.process_time() - t0
    report(capsys, 8, rho >= 0.8 and dt < 60,
           f"Spearman {rho:.3f} on {len(va)} validation elements (magnitudes {rho_abs:.3f}), {dt:.1f} s")


# 9 -----------------------------------------------------------------------------


def dof_efficiency(rows):
    """Adaptive runs against the finest non-benchmark uniform level."""
    uniform = [r for r in rows if r.method == "uniform"]
    ref = uniform[-2]
    out = {}
    for method in ("standard", "e2n"):
        runs = [r for r in rows if r.method == method]
        hits = [r for r in runs if r.error <= ref.error and r.dofs <= ref.dofs / 4]
        out[method] = (bool(hits), min(runs, key=lambda r: r.error))
    return ref, out


def test_criterion_09_dof_efficiency(capsys, studies):
    lines, ok, total = [], True, 0.0
    for name in ("aligned", "offset"):
        rows, dt = studies(name)
        total += dt
        ref, res = dof_efficiency(rows)
        lines.append(f"{name}: uniform {ref.error:.2e} at {ref.dofs} dofs")
        for method, (hit, best) in res.items():
            ok &= hit
            lines.append(f"{method} {'ok' if hit else 'miss'} (best {best.error:.2e} at {best.dofs})")
    ok &= total < 20 * 60
    report(capsys, 9, ok, "; ".join(lines) + f"; {total / 60:.1f} min")


# 10 ----------------------------------------------------------------------------


def test_criterion_10_acceleration(capsys, trained):
    net, _ = trained
    t0 = time.process_time()
    sc = preset_scenario("aligned")
    std, _ = benchmark(sc, AdaptConfig(target_complexity=3200.0))
    e2n, _ = benchmark(sc, AdaptConfig(target_complexity=3200.0, estimator="e2n"), net)
    cost = e2n["estimation"] / std["estimation"]
    share = std["estimation"] / std["total"]
    dt = time.process_time() - t0
    ok = cost <= 0.5 and share >= 0.35 and dt < 600
    report(capsys, 10, ok, f"e2n / standard estimation cost {cost:.3f} (<= 0.5), standard estimation share "
                           f"{share:.3f} (>= 0.35) of {std['total']:.1f} s, {dt:.1f} s")


# 11 ----------------------------------------------------------------------------


def test_criterion_11_generalisation(capsys, trained, studies):
    net, _ = trained
    t0 = time.process_time()
    mirror = []
    for kind in ("standard", "e2n"):
        cfg = AdaptConfig(estimator=kind)
        a = fixed_point_adapt(preset_scenario("aligned"), cfg, net)
        r = fixed_point_adapt(preset_scenario("reversed"), cfg, net)
        mirror.append(abs(r.final_qoi - a.final_qoi) / abs(a.final_qoi))
    rows, study_time = studies("trench")
    uniform = [r for r in rows if r.method == "uniform"]
    ref = uniform[-2]
    beats, converged = {}, {}
    for method in ("standard", "e2n"):
        runs = [r for r in rows if r.method == method]
        converged[method] = all(r.converged for r in runs)
        beats[method] = any(r.error <= ref.error and r.dofs < ref.dofs for r in runs)
    dt = time.process_time() - t0 + study_time
    ok = max(mirror) <= 0.01 and all(converged.values()) and all(beats.values()) and dt < 20 * 60
    report(capsys, 11, ok, f"mirror QoI rel. diff {', '.join(f'{m:.2e}' for m in mirror)}; trench converged "
                           f"{converged}, beats uniform ({ref.error:.2e} at {ref.dofs} dofs) {beats}; {dt / 60:.1f} min")
