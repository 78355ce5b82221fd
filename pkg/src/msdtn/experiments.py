"""Config-driven reproduction of the benchmark cases with CSV artifacts.

Three presets are built in:

* ``pme1d``   degenerate diffusion u^4 on (0,1), five subdomains,
* ``plap1d``  p-Laplace flux |u'|^2 u' with a = 5, otherwise as pme1d,
* ``pme2d``   degenerate diffusion on the unit square, 5x5 subdomains.

``run_case`` drives mesh -> dataset -> train -> solve (exact, surrogate,
warm start) -> reconstruct -> metrics and writes plot-ready CSVs.  All
artifacts are reproducible byte-for-byte for a fixed seed in serial mode;
wall-clock timings go to metadata.json, never into the CSVs.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import fem
from .dtn import LocalSolverConfig
from .mesh import build_coarse_basis, build_fine_mesh, build_partition, dump_mesh
from .substructure import (
    NewtonConfig,
    SkeletonSystem,
    harmonic_skeleton_guess,
    reconstruct,
    solve_substructured,
)
from .surrogate import (
    DtNSampleSet,
    LossConfig,
    SurrogateModelSet,
    forward,
    generate_dataset,
    sample_grid,
    save,
    train,
)

CASES = ("pme1d", "plap1d", "pme2d")


class ConfigError(ValueError):
    """Invalid case name, sample count or config file entry."""


class StageError(RuntimeError):
    """Failure of one pipeline stage, labelled with the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class CaseConfig:
    case: str
    dim: int
    n_sub: int
    fine_cells: int
    a: float
    flux: object
    coefficient_name: str
    u_max: float
    u0_values: tuple
    widths: tuple
    ns: int
    with_centers: bool
    loss: LossConfig
    seed: int
    newton_tol: float
    surrogate_tol: float
    reference_tol: float
    local_tol: float
    out_dir: str = "out"
    dump_mesh_flag: bool = False

    @property
    def corner_count(self) -> int:
        return 2 if self.dim == 1 else 4

    def grid_points_per_axis(self) -> int:
        m = round(self.ns ** (1.0 / self.corner_count))
        if m**self.corner_count != self.ns or m < 2:
            raise ConfigError(
                f"ns={self.ns} is not a tensor grid size m^{self.corner_count} with m >= 2"
            )
        return m


def case_config(case: str, ns: int | None = None, seed: int = 0, **overrides) -> CaseConfig:
    """Case preset with optional field overrides."""
    if case == "pme1d":
        cfg = CaseConfig(
            case="pme1d", dim=1, n_sub=5, fine_cells=40, a=20.0,
            flux=fem.PorousMedia(4.0), coefficient_name="oscillatory_1d",
            u_max=4.0, u0_values=(1.0, 2.0, 3.0, 4.0), widths=(64, 64),
            ns=9, with_centers=False,
            loss=LossConfig(
                c0=1.0, c1=0.1, c_mon=4.0, mon_variant="full_sign", mon_grid=40,
                u_min=0.0, u_max=4.0, epochs=3000, learning_rate=8e-3,
                lr_min_fraction=0.01, seed=seed,
            ),
            seed=seed, newton_tol=1e-10, surrogate_tol=1e-8,
            reference_tol=1e-10, local_tol=1e-10,
        )
    elif case == "plap1d":
        cfg = case_config("pme1d", seed=seed)
        cfg = replace(cfg, case="plap1d", a=5.0, flux=fem.PLaplace(2.0))
    elif case == "pme2d":
        cfg = CaseConfig(
            case="pme2d", dim=2, n_sub=5, fine_cells=18, a=1.0,
            flux=fem.PorousMedia(4.0), coefficient_name="oscillatory_2d",
            u_max=1.2, u0_values=(), widths=(20, 20),
            ns=81, with_centers=False,
            loss=LossConfig(
                c0=1.0, c1=0.1, c_mon=10.0, mon_variant="diagonal", mon_mc_points=200,
                u_min=0.0, u_max=1.2, epochs=8000, learning_rate=5e-3, seed=seed,
            ),
            seed=seed, newton_tol=1e-10, surrogate_tol=1e-8,
            reference_tol=1e-12, local_tol=1e-10,
        )
    else:
        raise ConfigError(f"unknown case {case!r}; pick one of {CASES}")
    if ns is not None:
        cfg = replace(cfg, ns=int(ns))
    loss_overrides = {
        k: overrides.pop(k)
        for k in list(overrides)
        if k in LossConfig.__dataclass_fields__ and k != "seed"
    }
    if loss_overrides:
        cfg = replace(cfg, loss=replace(cfg.loss, **loss_overrides))
    if overrides:
        cfg = replace(cfg, **overrides)
    cfg.grid_points_per_axis()
    return cfg


def apply_config_file(cfg: CaseConfig, path: str) -> CaseConfig:
    """Override preset fields from a flat key=value text file."""
    converters = {
        "ns": int, "seed": int, "fine_cells": int, "n_sub": int,
        "epochs": int, "learning_rate": float, "c0": float, "c1": float,
        "c_mon": float, "mon_grid": int, "mon_mc_points": int,
        "newton_tol": float, "surrogate_tol": float, "reference_tol": float,
        "local_tol": float, "u_max": float, "out_dir": str,
        "with_centers": lambda s: s.lower() in ("1", "true", "yes"),
    }
    loss_keys = {"epochs", "learning_rate", "c0", "c1", "c_mon", "mon_grid", "mon_mc_points"}
    with open(path) as f:
        for line_no, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in converters:
                raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
            parsed = converters[key](value)
            if key in loss_keys:
                cfg = replace(cfg, loss=replace(cfg.loss, **{key: parsed}))
            elif key == "seed":
                cfg = replace(cfg, seed=parsed, loss=replace(cfg.loss, seed=parsed))
            elif key == "u_max":
                cfg = replace(cfg, u_max=parsed, loss=replace(cfg.loss, u_max=parsed))
            else:
                cfg = replace(cfg, **{key: parsed})
    return cfg


@dataclass
class ErrorReport:
    """Per-case error metrics, Newton iteration counts and timings."""

    case: str
    ns: int
    interpolation_error: float | None
    solution_errors: dict
    newton_iterations: dict
    timings: dict = field(default_factory=dict)

    def validate(self) -> None:
        values = list(self.solution_errors.values()) + list(self.timings.values())
        if self.interpolation_error is not None:
            values.append(self.interpolation_error)
        arr = np.asarray(values, dtype=float)
        if not (np.isfinite(arr).all() and (arr >= 0).all()):
            raise ValueError("error report contains non-finite or negative entries")


def make_problem(cfg: CaseConfig, u0: float | None = None) -> fem.ProblemDef:
    """Problem definition of a case; ``u0`` picks the 1D left boundary value."""
    if cfg.coefficient_name == "oscillatory_1d":
        coeff = fem.oscillatory_coefficient_1d()
    elif cfg.coefficient_name == "oscillatory_2d":
        coeff = fem.oscillatory_coefficient_2d()
    else:
        coeff = fem.Coefficient.constant(float(cfg.coefficient_name.split(":")[1]))
    if cfg.dim == 1:
        left = cfg.u_max if u0 is None else float(u0)
        u_d = lambda pts, _l=left: np.where(pts[:, 0] < 0.5, _l, 0.0)
    else:
        u_d = lambda pts: np.maximum(cfg.u_max * (pts[:, 0] + pts[:, 1] - 1.0), 0.0)
    return fem.ProblemDef(cfg.dim, cfg.a, coeff, cfg.flux, u_d)


def build_case_geometry(cfg: CaseConfig):
    partition = build_partition(cfg.dim, cfg.n_sub)
    mesh = build_fine_mesh(partition, cfg.fine_cells)
    basis = build_coarse_basis(partition, mesh)
    return partition, mesh, basis


def error_l2(field_a: np.ndarray, field_b: np.ndarray, mesh) -> float:
    """Lumped-mass weighted relative L2 distance ||a - b|| / ||b||."""
    a = np.asarray(field_a, dtype=float)
    b = np.asarray(field_b, dtype=float)
    if a.shape != b.shape or len(a) != mesh.n_vertices:
        raise ValueError("fields must live on the mesh vertex set")
    w = fem.lumped_weights(mesh)
    den = float(np.sqrt(np.sum(w * b**2)))
    if den == 0.0:
        raise ValueError("reference field has zero norm")
    return float(np.sqrt(np.sum(w * (a - b) ** 2)) / den)


def interpolation_grid_error(models: SurrogateModelSet, eval_set: DtNSampleSet) -> float:
    """Relative L2 error of the surrogate map over an evaluation sample set."""
    pred = np.column_stack([forward(net, eval_set.inputs) for net in models.nets])
    return float(
        np.sqrt(np.sum((pred - eval_set.values) ** 2) / np.sum(eval_set.values**2))
    )


def case_dataset(cfg: CaseConfig, problem, mesh, basis) -> DtNSampleSet:
    samples = sample_grid(
        cfg.corner_count, cfg.grid_points_per_axis(), 0.0, cfg.u_max, cfg.with_centers
    )
    return generate_dataset(
        problem, mesh, basis, 0, samples, LocalSolverConfig(residual_tol=cfg.local_tol)
    )


def evaluation_dataset(cfg: CaseConfig, problem, mesh, basis) -> DtNSampleSet:
    """Audit sample set: the 20x20 grid in 1D, a seeded random cloud in 2D."""
    if cfg.dim == 1:
        pts = sample_grid(2, 20, 0.0, cfg.u_max)
    else:
        rng = np.random.default_rng([cfg.seed, 202])
        pts = rng.uniform(0.0, cfg.u_max, size=(200, 4))
    return generate_dataset(
        problem, mesh, basis, 0, pts,
        LocalSolverConfig(residual_tol=cfg.local_tol), with_jacobians=False,
    )


def _fmt(x) -> str:
    return repr(float(x))


def _write_profile(path, columns, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _diagonal_profile(mesh, values):
    """Samples along the line y = x (2D) or the full axis (1D)."""
    if mesh.dim == 1:
        return [(x, v) for x, v in zip(mesh.vertices[:, 0], values)]
    on_diag = np.isclose(mesh.vertices[:, 0], mesh.vertices[:, 1])
    idx = np.where(on_diag)[0]
    order = np.argsort(mesh.vertices[idx, 0], kind="stable")
    idx = idx[order]
    return [(mesh.vertices[v, 0], values[v]) for v in idx]


def run_case(cfg: CaseConfig, models: SurrogateModelSet | None = None) -> ErrorReport:
    """Full pipeline for one case; returns the report and writes artifacts.

    ``models`` skips the dataset/train stages (e.g. when loaded from disk).
    Any stage failure is re-raised as StageError with the stage label.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    timings = {}
    t_all = time.perf_counter()

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            raise StageError(name, exc) from exc
        timings[name] = time.perf_counter() - t0
        return result

    partition, mesh, basis = stage("mesh", lambda: build_case_geometry(cfg))
    if cfg.dump_mesh_flag:
        dump_mesh(mesh, os.path.join(cfg.out_dir, "mesh"))
    problem = make_problem(cfg)
    local_cfg = LocalSolverConfig(residual_tol=cfg.local_tol)

    if models is None:
        dataset = stage("dataset", lambda: case_dataset(cfg, problem, mesh, basis))
        dataset.to_csv(os.path.join(cfg.out_dir, "dataset.csv"))
        models_trained = stage("train", lambda: train(dataset, cfg.widths, cfg.loss))
        models, train_report = models_trained
        save(models, os.path.join(cfg.out_dir, "models.json"))
    else:
        train_report = None

    u0_list = cfg.u0_values or (None,)
    primary = u0_list[-1]
    solution_errors = {}
    newton_iterations = {}

    def solve_stage():
        results = {}
        for u0 in u0_list:
            label = "default" if u0 is None else f"u0={u0:g}"
            prob = make_problem(cfg, u0)
            exact_sys = SkeletonSystem("coarse", prob, mesh, basis, local_cfg)
            sur_sys = SkeletonSystem(
                "coarse", prob, mesh, basis, local_cfg, backend="surrogate", models=models
            )
            reference, _ = solve_substructured(
                exact_sys,
                NewtonConfig(tol=cfg.reference_tol, max_iter=200),
                initial_guess=harmonic_skeleton_guess(exact_sys),
            )
            g_exact, tr_exact = solve_substructured(
                exact_sys, NewtonConfig(tol=cfg.newton_tol, max_iter=200), reference=reference
            )
            g_sur, tr_sur = solve_substructured(
                sur_sys,
                NewtonConfig(tol=cfg.surrogate_tol, max_iter=200, allow_stagnation=True),
                reference=reference,
            )
            g_warm, tr_warm = solve_substructured(
                exact_sys, NewtonConfig(tol=cfg.newton_tol, max_iter=200),
                initial_guess=g_sur, reference=reference,
            )
            results[label] = (u0, g_exact, g_sur, g_warm, tr_exact, tr_sur, tr_warm)
        return results

    solves = stage("solve", solve_stage)

    def reconstruct_stage():
        fields = {}
        for label, (u0, g_exact, g_sur, _gw, *_tr) in solves.items():
            prob = make_problem(cfg, u0)
            u_exact = reconstruct(prob, mesh, basis, g_exact, "coarse", local_cfg)
            u_sur = reconstruct(prob, mesh, basis, g_sur, "coarse", local_cfg)
            fields[label] = (u_exact.values, u_sur.values)
        return fields

    fields = stage("reconstruct", reconstruct_stage)

    def metrics_stage():
        eval_set = evaluation_dataset(cfg, problem, mesh, basis)
        interp = interpolation_grid_error(models, eval_set)
        for label, (u_exact, u_sur) in fields.items():
            solution_errors[label] = error_l2(u_sur, u_exact, mesh)
        for label, (_u0, *_g, tr_exact, tr_sur, tr_warm) in solves.items():
            newton_iterations[f"exact[{label}]"] = tr_exact.iterations
            newton_iterations[f"surrogate[{label}]"] = tr_sur.iterations
            newton_iterations[f"warm[{label}]"] = tr_warm.iterations
            for name, tr in (("exact", tr_exact), ("warm", tr_warm)):
                hit = tr.iterations_to_error(1e-5)
                if hit is not None:
                    newton_iterations[f"{name}_to_1e-5[{label}]"] = hit
        return interp

    interp_error = stage("metrics", metrics_stage)

    for label, (u0, *_rest) in solves.items():
        u_exact, u_sur = fields[label]
        tag = label.replace("=", "_").replace(".", "p")
        rows = [
            (x, ue, us)
            for (x, ue), (_x2, us) in zip(
                _diagonal_profile(mesh, u_exact), _diagonal_profile(mesh, u_sur)
            )
        ]
        _write_profile(
            os.path.join(cfg.out_dir, f"solution_{tag}.csv"),
            ["x", "u_exact", "u_surrogate"], rows,
        )

    primary_label = "default" if primary is None else f"u0={primary:g}"
    _u0, _ge, _gs, _gwarm, tr_exact, tr_sur, tr_warm = solves[primary_label]
    for name, tr in (("exact", tr_exact), ("surrogate", tr_sur), ("warm", tr_warm)):
        tr.to_csv(os.path.join(cfg.out_dir, f"trace_{name}.csv"), include_seconds=False)

    report = ErrorReport(
        cfg.case, cfg.ns, interp_error, solution_errors, newton_iterations, timings
    )
    timings["total"] = time.perf_counter() - t_all
    report.validate()

    with open(os.path.join(cfg.out_dir, "errors.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case", "ns", "metric", "value"])
        w.writerow([cfg.case, cfg.ns, "interpolation_rel_l2", _fmt(interp_error)])
        for label, err in solution_errors.items():
            w.writerow([cfg.case, cfg.ns, f"solution_rel_l2[{label}]", _fmt(err)])
        for label, count in newton_iterations.items():
            w.writerow([cfg.case, cfg.ns, f"newton_iterations[{label}]", count])

    meta = {
        "case": cfg.case,
        "ns": cfg.ns,
        "seed": cfg.seed,
        "tolerances": {
            "newton": cfg.newton_tol, "surrogate": cfg.surrogate_tol,
            "reference": cfg.reference_tol, "local": cfg.local_tol,
        },
        "loss": {
            "c0": cfg.loss.c0, "c1": cfg.loss.c1, "c_mon": cfg.loss.c_mon,
            "variant": cfg.loss.mon_variant, "epochs": cfg.loss.epochs,
        },
        "train_report": train_report,
        "timings_seconds": timings,
    }
    with open(os.path.join(cfg.out_dir, "metadata.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return report
