"""
Command-line interface.

Exit codes: 0 on success, 2 when an adaptation loop or nonlinear solve
does not converge, 1 on any other error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import pipeline
from .errors import NonConvergenceError, ParseError

log = logging.getLogger("tidaladapt")

EXIT_OK, EXIT_ERROR, EXIT_NONCONVERGED = 0, 1, 2


def _scenario(args):
    from .model import read_scenario

    if getattr(args, "scenario", None):
        return read_scenario(args.scenario)
    return pipeline.preset_scenario(args.preset)


def _add_scenario(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--preset", default="aligned", choices=pipeline.PRESETS, help="named test configuration")
    g.add_argument("--scenario", help="scenario file (overrides --preset)")


def _adapt_config(args, **overrides):
    kw = dict(
        target_complexity=args.complexity,
        estimator=getattr(args, "estimator", "standard"),
        checkpoint=getattr(args, "checkpoint", None),
        max_iterations=args.max_iterations,
        min_iterations=args.min_iterations,
        initial_h=args.h,
    )
    kw.update(overrides)
    return pipeline.AdaptConfig(**kw)


def _add_loop(p):
    p.add_argument("--complexity", type=float, default=3200.0, help="target metric complexity")
    p.add_argument("--max-iterations", type=int, default=35)
    p.add_argument("--min-iterations", type=int, default=3)
    p.add_argument("--h", type=float, default=18.0, help="initial mesh edge length (m)")
    p.add_argument("--checkpoint", help="trained network for the e2n estimator")


# commands -------------------------------------------------------------------


def cmd_mesh_init(args):
    from .mesh import write_mesh
    from .model import initial_mesh

    mesh = initial_mesh(_scenario(args), args.h)
    write_mesh(mesh, args.out)
    print(f"wrote {mesh.n_elements} elements, {mesh.n_vertices} vertices to {args.out}")
    return EXIT_OK


def cmd_solve(args):
    from .mesh import read_mesh
    from .model import MomentumProblem, initial_mesh, solve_forward

    sc = _scenario(args)
    mesh = read_mesh(args.mesh) if args.mesh else initial_mesh(sc, args.h)
    problem = MomentumProblem(sc, mesh)
    u, its = solve_forward(problem)
    J = problem.qoi(u.dofs)
    rows = [[mesh.n_elements, problem.n_dofs, its, J]]
    header = ["elements", "dofs", "newton_iterations", "qoi"]
    if args.out:
        pipeline.write_rows(args.out, header, rows)
    print(",".join(header))
    print(",".join(str(v) for v in rows[0]))
    return EXIT_OK


def cmd_adapt(args):
    from .mesh import write_mesh

    sc = _scenario(args)
    rec = pipeline.fixed_point_adapt(sc, _adapt_config(args))
    header, rows = rec.rows()
    if args.out:
        pipeline.write_rows(args.out, header, rows)
    if args.mesh_out and rec.mesh is not None:
        write_mesh(rec.mesh, args.mesh_out)
    print(f"{sc.name or 'scenario'}: {rec.n_iterations} iterations, J = {rec.final_qoi:.8e}, "
          f"{rec.final_dofs} dofs, converged = {rec.converged} ({rec.reason})")
    return EXIT_OK if rec.converged else EXIT_NONCONVERGED


def cmd_datagen(args):
    from .features import write_dataset
    from .model import write_scenario

    os.makedirs(args.out, exist_ok=True)
    scenarios = pipeline.generate_scenarios(args.scenarios, args.seed)
    for i, sc in enumerate(scenarios):
        write_scenario(sc, os.path.join(args.out, f"scenario_{i:03d}.cfg"))
    cfg = pipeline.AdaptConfig(target_complexity=args.complexity, initial_h=args.h)
    data, summary = pipeline.harvest_dataset(scenarios, args.iterations, cfg, return_summary=True)
    path = os.path.join(args.out, "dataset.csv")
    write_dataset(data, path)
    print(f"wrote {summary.rows} rows from {summary.scenarios - summary.skipped} scenarios to {path}; "
          f"skipped {summary.skipped}")
    return EXIT_OK


def cmd_train(args):
    from .features import read_dataset
    from .network import TrainConfig, save, train

    data = read_dataset(args.data)
    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch, seed=args.seed,
                      magnitude_targets=not args.signed_targets)
    res = train(data, cfg)
    save(res.mlp, args.out)
    if args.history:
        rows = [[e, float(a), float(b)] for e, (a, b) in enumerate(zip(res.train_loss, res.val_loss))]
        pipeline.write_rows(args.history, ["epoch", "train_mse", "val_mse"], rows)
    print(f"trained on {len(res.train_index)} rows; validation MSE {res.val_loss[0]:.4e} -> {res.val_loss[-1]:.4e}; "
          f"saved {args.out}")
    return EXIT_OK


def cmd_convergence(args):
    sc = _scenario(args)
    estimators = [e for e in args.estimators.split(",") if e]
    cfg = _adapt_config(args)
    complexities = [float(c) for c in args.complexities.split(",") if c]
    rows = pipeline.convergence_study(sc, complexities, args.levels, estimators, cfg)
    pipeline.write_rows(args.out, pipeline.ConvergenceRow.HEADER, [r.as_list() for r in rows])
    for r in rows:
        print(",".join(str(v) for v in r.as_list()))
    return EXIT_OK if all(r.converged for r in rows) else EXIT_NONCONVERGED


def cmd_bench(args):
    sc = _scenario(args)
    timings, rec = pipeline.benchmark(sc, _adapt_config(args))
    header = ["component", "cpu_seconds", "fraction"]
    total = sum(timings[c] for c in pipeline.COMPONENTS)
    rows = [[c, timings[c], timings[c] / total if total else 0.0] for c in pipeline.COMPONENTS]
    rows.append(["total", timings["total"], 1.0])
    pipeline.write_rows(args.out, header, rows)
    for r in rows:
        print(f"{r[0]},{r[1]:.4f},{r[2]:.4f}")
    return EXIT_OK if rec.converged else EXIT_NONCONVERGED


# parser ---------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="tidaladapt", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--config", help="key = value file supplying defaults for any flag")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh-init", help="write the initial structured mesh")
    _add_scenario(p)
    p.add_argument("--h", type=float, default=18.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mesh_init)

    p = sub.add_parser("solve", help="forward solve and QoI on a mesh")
    _add_scenario(p)
    p.add_argument("--mesh", help="mesh file (default: initial mesh)")
    p.add_argument("--h", type=float, default=18.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("adapt", help="run the fixed-point adaptation loop")
    _add_scenario(p)
    _add_loop(p)
    p.add_argument("--estimator", choices=pipeline.ESTIMATORS, default="standard")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="per-iteration CSV")
    p.add_argument("--mesh-out", help="write the final mesh")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("datagen", help="harvest a training dataset from random scenarios")
    p.add_argument("--scenarios", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--complexity", type=float, default=3200.0)
    p.add_argument("--h", type=float, default=18.0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train the error-estimation network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=500)
    p.add_argument("--history", help="loss history CSV")
    p.add_argument("--signed-targets", action="store_true", help="fit signed contributions instead of magnitudes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convergence", help="QoI error against DoFs: uniform vs adaptive")
    _add_scenario(p)
    _add_loop(p)
    p.add_argument("--complexities", default="800,1600,3200")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--estimators", default="standard")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("bench", help="CPU time per component of one adaptation run")
    _add_scenario(p)
    _add_loop(p)
    p.add_argument("--estimator", choices=pipeline.ESTIMATORS, default="standard")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys may use - or _."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError("expected 'key = value'", lineno)
            k, v = (s.strip() for s in line.split("=", 1))
            if not k:
                raise ParseError("empty key", lineno)
            out[k.replace("-", "_")] = v
    return out


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser, argv, values):
    """Install config values as defaults of the chosen subcommand."""
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((t for t in argv if t in subparsers), None)
    if command is None:
        return
    sub = subparsers[command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for k, v in values.items():
        if k not in known or k == "help":
            raise ParseError(f"unknown option '{k}' for command {command}")
        a = known[k]
        try:
            defaults[k] = a.type(v) if a.type is not None else v
        except ValueError:
            raise ParseError(f"invalid value '{v}' for '{k}'") from None
        if a.choices is not None and defaults[k] not in a.choices:
            raise ParseError(f"invalid value '{v}' for '{k}'")
        a.required = False
    sub.set_defaults(**defaults)


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        path = _config_path(argv)
        if path:
            _apply_config(parser, argv, read_config(path))
    except (OSError, ParseError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_ERROR
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except Exception as exc:  # any other failure maps to exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
