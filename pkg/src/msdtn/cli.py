"""Command line interface.

Subcommands: ``reproduce`` runs a full case pipeline, ``generate-data``,
``train``, ``solve`` and ``evaluate`` expose the individual stages.  Exit
codes: 0 success, 2 configuration error, 3 solver non-convergence,
4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .dtn import LocalSolverConfig, NonConvergence
from .experiments import (
    CASES,
    ConfigError,
    StageError,
    apply_config_file,
    build_case_geometry,
    case_config,
    case_dataset,
    evaluation_dataset,
    interpolation_grid_error,
    make_problem,
    run_case,
)
from .mesh import dump_mesh
from .substructure import (
    NewtonConfig,
    SkeletonSystem,
    reconstruct,
    solve_substructured,
)
from .surrogate import DtNSampleSet, TrainingDivergence, load, save, train


def _add_common(p):
    p.add_argument("case", choices=CASES)
    p.add_argument("--ns", type=int, default=None, help="number of sampling vectors (m^d)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss", default=None, metavar="C0,C1,CMON", help="loss weights")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--config", default=None, help="key=value override file")


def _build_config(args):
    overrides = {"out_dir": args.out}
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "dump_mesh", False):
        overrides["dump_mesh_flag"] = True
    if args.loss is not None:
        try:
            c0, c1, c_mon = (float(x) for x in args.loss.split(","))
        except ValueError as exc:
            raise ConfigError(f"--loss expects c0,c1,cmon, got {args.loss!r}") from exc
        overrides.update(c0=c0, c1=c1, c_mon=c_mon)
    cfg = case_config(args.case, ns=args.ns, seed=args.seed, **overrides)
    if args.config is not None:
        cfg = apply_config_file(cfg, args.config)
    return cfg


def _cmd_reproduce(args) -> int:
    cfg = _build_config(args)
    report = run_case(cfg)
    print(f"case {cfg.case} ns={cfg.ns} -> {cfg.out_dir}")
    if report.interpolation_error is not None:
        print(f"  interpolation rel L2 error: {report.interpolation_error:.3e}")
    for label, err in report.solution_errors.items():
        print(f"  solution rel L2 error [{label}]: {err:.3e}")
    for label, n in report.newton_iterations.items():
        print(f"  newton iterations {label}: {n}")
    return 0


def _cmd_generate_data(args) -> int:
    cfg = _build_config(args)
    _, mesh, basis = build_case_geometry(cfg)
    dataset = case_dataset(cfg, make_problem(cfg), mesh, basis)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "dataset.csv")
    dataset.to_csv(path)
    print(f"wrote {dataset.n_samples} samples to {path}")
    return 0


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    if args.data is not None:
        dataset = DtNSampleSet.from_csv(args.data)
    else:
        _, mesh, basis = build_case_geometry(cfg)
        dataset = case_dataset(cfg, make_problem(cfg), mesh, basis)
    models, report = train(dataset, cfg.widths, cfg.loss)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "models.json")
    save(models, path)
    for entry in report:
        print(
            "component %d: loss %.3e -> %.3e"
            % (entry["component"], entry["first_loss"], entry["final_loss"])
        )
    print(f"wrote {path}")
    return 0


def _cmd_solve(args) -> int:
    cfg = _build_config(args)
    if args.backend in ("surrogate", "warmstart") and args.model is None:
        raise ConfigError(f"--backend {args.backend} requires --model")
    _, mesh, basis = build_case_geometry(cfg)
    problem = make_problem(cfg, args.u0)
    local_cfg = LocalSolverConfig(residual_tol=cfg.local_tol)
    os.makedirs(cfg.out_dir, exist_ok=True)
    if getattr(args, "dump_mesh", False):
        dump_mesh(mesh, os.path.join(cfg.out_dir, "mesh"))

    exact_sys = SkeletonSystem("coarse", problem, mesh, basis, local_cfg)
    if args.backend == "exact":
        g, trace = solve_substructured(exact_sys, NewtonConfig(tol=cfg.newton_tol, max_iter=200))
    else:
        models = load(args.model)
        sur_sys = SkeletonSystem(
            "coarse", problem, mesh, basis, local_cfg, backend="surrogate", models=models
        )
        g, trace = solve_substructured(
            sur_sys,
            NewtonConfig(tol=cfg.surrogate_tol, max_iter=200, allow_stagnation=True),
        )
        if args.backend == "warmstart":
            g, trace = solve_substructured(
                exact_sys, NewtonConfig(tol=cfg.newton_tol, max_iter=200), initial_guess=g
            )

    u = reconstruct(problem, mesh, basis, g, "coarse", local_cfg)
    trace.to_csv(os.path.join(cfg.out_dir, f"trace_{args.backend}.csv"))
    out = os.path.join(cfg.out_dir, f"solution_{args.backend}.csv")
    import csv as _csv

    with open(out, "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["coarse_node", "value"])
        for k, val in enumerate(g):
            w.writerow([k, repr(float(val))])
    field_path = os.path.join(cfg.out_dir, f"field_{args.backend}.csv")
    with open(field_path, "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["vertex"] + [f"x{k}" for k in range(mesh.dim)] + ["u"])
        for vid, (pt, val) in enumerate(zip(mesh.vertices, u.values)):
            w.writerow([vid] + [repr(float(c)) for c in pt] + [repr(float(val))])
    print(
        f"{args.backend} solve: {trace.iterations} iterations, "
        f"final residual {trace.residual_norms[-1]:.3e}; wrote {out}"
    )
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _build_config(args)
    if args.model is None:
        raise ConfigError("evaluate requires --model")
    models = load(args.model)
    _, mesh, basis = build_case_geometry(cfg)
    problem = make_problem(cfg)
    eval_set = evaluation_dataset(cfg, problem, mesh, basis)
    err = interpolation_grid_error(models, eval_set)
    print(f"interpolation rel L2 error over the audit set: {err:.4e}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "evaluate.json"), "w") as f:
        json.dump({"case": cfg.case, "interpolation_rel_l2": err}, f, indent=2)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="msdtn",
        description="Nonlinear multiscale substructuring with learned DtN surrogates",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reproduce", help="run the full pipeline of a case")
    _add_common(p)
    p.add_argument("--dump-mesh", action="store_true", dest="dump_mesh")
    p.set_defaults(fn=_cmd_reproduce)

    p = sub.add_parser("generate-data", help="sample the exact coarse DtN map")
    _add_common(p)
    p.set_defaults(fn=_cmd_generate_data)

    p = sub.add_parser("train", help="train surrogate nets from a dataset")
    _add_common(p)
    p.add_argument("--data", default=None, help="dataset CSV (default: regenerate)")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("solve", help="solve the coarse substructured problem")
    _add_common(p)
    p.add_argument("--backend", choices=("exact", "surrogate", "warmstart"), default="exact")
    p.add_argument("--model", default=None, help="model JSON for surrogate backends")
    p.add_argument("--u0", type=float, default=None, help="1D left boundary value")
    p.add_argument("--dump-mesh", action="store_true", dest="dump_mesh")
    p.set_defaults(fn=_cmd_solve)

    p = sub.add_parser("evaluate", help="audit a trained model against the exact map")
    _add_common(p)
    p.add_argument("--model", default=None)
    p.set_defaults(fn=_cmd_evaluate)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, TrainingDivergence):
            return 4
        if isinstance(exc.cause, NonConvergence):
            return 3
        return 1
    except NonConvergence as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return 3
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
