"""Skeleton residuals, substructured Newton solves, and field reconstruction.

The fine system glues per-subdomain DtN evaluations over the skeleton
dofs; the coarse system does the same over the coarse nodes through the
coarse DtN maps; the surrogate backend swaps in trained networks for the
coarse maps.  A monolithic Newton solver over the full mesh is provided
as the reference the substructured solutions are checked against.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from . import fem
from .dtn import (
    LocalSolverConfig,
    NonConvergence,
    SingularJacobian,
    dtn_coarse,
    dtn_fine,
    solve_local,
)
from .mesh import BOUNDARY, CoarseBasis, FineMesh, restriction


@dataclass
class NewtonConfig:
    """Damped Newton settings for the substructured and monolithic solves.

    ``allow_stagnation`` makes stalls terminate gracefully at the best
    iterate instead of raising; the surrogate systems need it because
    their residual bottoms out at the model error instead of reaching a
    root.
    """

    tol: float = 1e-10
    max_iter: int = 50
    damping_factor: float = 0.5
    max_halvings: int = 30
    allow_stagnation: bool = False
    stagnation_ratio: float = 1e-3
    stagnation_patience: int = 5


@dataclass
class NewtonTrace:
    """Per-iterate history of a Newton solve.

    Entry k describes iterate k (entry 0 is the initial guess); the step
    and timing of entry k are those that produced iterate k, so both are
    zero at entry 0.
    """

    residual_norms: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    errors: list | None = None
    seconds: list = field(default_factory=list)
    converged: bool = False
    stagnated: bool = False

    @property
    def iterations(self) -> int:
        return len(self.residual_norms) - 1

    def iterations_to_error(self, threshold: float) -> int | None:
        if self.errors is None:
            return None
        for k, err in enumerate(self.errors):
            if err <= threshold:
                return k
        return None

    def to_csv(self, path: str, include_seconds: bool = True) -> None:
        cols = ["iteration", "residual_norm", "step_norm"]
        if self.errors is not None:
            cols.append("error_vs_reference")
        if include_seconds:
            cols.append("seconds")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(cols)
            for k in range(len(self.residual_norms)):
                row = [k, repr(float(self.residual_norms[k])), repr(float(self.step_norms[k]))]
                if self.errors is not None:
                    row.append(repr(float(self.errors[k])))
                if include_seconds:
                    row.append(repr(float(self.seconds[k])))
                w.writerow(row)


class SkeletonSystem:
    """Substructured system over the skeleton (fine) or coarse node set.

    Fixed Dirichlet entries are the nodal interpolants of the boundary
    trace; the unknown and fixed index sets partition the system dofs.
    ``models`` supplies the surrogate DtN maps when backend is
    "surrogate".
    """

    def __init__(
        self,
        level: str,
        problem: fem.ProblemDef,
        mesh: FineMesh,
        basis: CoarseBasis,
        local_cfg: LocalSolverConfig | None = None,
        backend: str = "exact",
        models=None,
    ):
        if level not in ("fine", "coarse"):
            raise ValueError("level must be 'fine' or 'coarse'")
        if backend not in ("exact", "surrogate"):
            raise ValueError("backend must be 'exact' or 'surrogate'")
        if backend == "surrogate" and level != "coarse":
            raise ValueError("the surrogate backend acts on the coarse level")
        if backend == "surrogate" and models is None:
            raise ValueError("surrogate backend needs trained models")
        self.level = level
        self.backend = backend
        self.problem = problem
        self.mesh = mesh
        self.basis = basis
        self.local_cfg = local_cfg or LocalSolverConfig()
        self.models = models
        # Newton iterates of the learned system are kept inside the
        # training box: the map is only trusted there, and the physical
        # solution lives in it by the maximum principle.
        self.trust_box = None
        if backend == "surrogate":
            self.trust_box = (models.loss_cfg.u_min, models.loss_cfg.u_max)

        part = mesh.partition
        if level == "fine":
            skel = basis.skeleton
            self.n_dofs = skel.target_size
            self.dof_positions = [
                skel.positions_of(restriction(mesh, ("subdomain_boundary", i)))
                for i in range(part.n_subdomains)
            ]
            on_bnd = mesh.vertex_flags[skel.indices] == BOUNDARY
            coords = mesh.vertices[skel.indices]
        else:
            self.n_dofs = part.n_coarse_nodes
            self.dof_positions = [part.subdomain_corners[i] for i in range(part.n_subdomains)]
            on_bnd = ~part.coarse_node_interior
            coords = part.coarse_nodes
        self.fixed = np.where(on_bnd)[0]
        self.unknown = np.where(~on_bnd)[0]
        self.fixed_values = np.asarray(problem.u_D(coords), dtype=float)[self.fixed]

    def initial_vector(self, unknown_values: np.ndarray | None = None) -> np.ndarray:
        g = np.zeros(self.n_dofs)
        g[self.fixed] = self.fixed_values
        if unknown_values is not None:
            g[self.unknown] = unknown_values
        return g

    def _evaluate(self, g: np.ndarray, want_jacobian: bool, states: list | None):
        n_sub = self.mesh.partition.n_subdomains
        if states is None:
            states = [None] * n_sub
        res = np.zeros(self.n_dofs)
        jac = np.zeros((self.n_dofs, self.n_dofs)) if want_jacobian else None
        new_states = [None] * n_sub
        for i in range(n_sub):
            pos = self.dof_positions[i]
            v = g[pos]
            if self.backend == "surrogate":
                values, local_jac = self.models.evaluate(i, v, want_jacobian)
                new_states[i] = None
            else:
                if self.level == "fine":
                    result = dtn_fine(
                        self.problem, self.mesh, i, v, self.local_cfg,
                        want_jacobian=want_jacobian, warm_start=states[i],
                    )
                else:
                    result = dtn_coarse(
                        self.problem, self.mesh, self.basis, i, v, self.local_cfg,
                        want_jacobian=want_jacobian, warm_start=states[i],
                    )
                values, local_jac = result.flux, result.jacobian
                new_states[i] = result.interior_state
            res[pos] += values
            if want_jacobian:
                jac[np.ix_(pos, pos)] += local_jac
        return res, jac, new_states


def harmonic_skeleton_guess(system: SkeletonSystem) -> np.ndarray:
    """System vector sampling the K-harmonic potential interpolant of u_D.

    One global sparse solve; useful as a Newton initial guess for the
    substructured systems (the zero start creeps through the degenerate
    region one subdomain layer per iteration).
    """
    mesh = system.mesh
    bnd = restriction(mesh, "boundary")
    free = restriction(mesh, "omega")
    bc = system.problem.u_D(mesh.vertices[bnd.indices])
    u = np.zeros(mesh.n_vertices)
    u[bnd.indices] = bc
    u[free.indices] = fem.harmonic_interior_guess(
        system.problem, mesh, None, bc, free.indices, bnd.indices
    )
    if system.level == "fine":
        return u[system.basis.skeleton.indices]
    part = mesh.partition
    m = mesh.cells_per_subdomain
    n = part.n_sub_per_axis
    if mesh.dim == 1:
        vids = np.arange(part.n_coarse_nodes) * m
    else:
        nv_axis = n * m + 1
        gx = np.arange(part.n_coarse_nodes) % (n + 1)
        gy = np.arange(part.n_coarse_nodes) // (n + 1)
        vids = gy * m * nv_axis + gx * m
    return u[vids]


def residual_skeleton(system: SkeletonSystem, g: np.ndarray, want_jacobian: bool = False):
    """Glued skeleton residual on the unknown set; g includes fixed values.

    With ``want_jacobian`` also returns the unknown-by-unknown Jacobian
    block assembled from the local DtN Jacobians.
    """
    g = np.asarray(g, dtype=float)
    if len(g) != system.n_dofs:
        raise ValueError(f"expected {system.n_dofs} skeleton values, got {len(g)}")
    res, jac, _ = system._evaluate(g, want_jacobian, None)
    r_unknown = res[system.unknown]
    if want_jacobian:
        return r_unknown, jac[np.ix_(system.unknown, system.unknown)]
    return r_unknown


def solve_substructured(
    system: SkeletonSystem,
    cfg: NewtonConfig | None = None,
    initial_guess: np.ndarray | None = None,
    reference: np.ndarray | None = None,
):
    """Damped Newton on the skeleton residual.

    ``initial_guess`` is a full system vector (fixed entries are
    overwritten with the Dirichlet values); ``reference`` enables the
    error-vs-reference column of the trace, measured as the relative
    Euclidean distance of the full vector to the reference.  Returns the
    converged vector and the trace; raises NonConvergence with the trace
    attached.
    """
    cfg = cfg or NewtonConfig()
    unknown = system.unknown
    g = system.initial_vector(
        None if initial_guess is None else np.asarray(initial_guess, dtype=float)[unknown]
    )
    trace = NewtonTrace(errors=None if reference is None else [])

    def record(rn, step, dt):
        trace.residual_norms.append(rn)
        trace.step_norms.append(step)
        trace.seconds.append(dt)
        if reference is not None:
            num = float(np.linalg.norm(g - reference))
            den = float(np.linalg.norm(reference))
            trace.errors.append(num / den if den > 0 else num)

    states = None
    t_start = time.perf_counter()
    res, jac, states = system._evaluate(g, True, states)
    rn = float(np.abs(res[unknown]).max()) if len(unknown) else 0.0
    record(rn, 0.0, time.perf_counter() - t_start)

    slow_steps = 0
    for _ in range(cfg.max_iter):
        if rn <= cfg.tol:
            trace.converged = True
            return g, trace
        if cfg.allow_stagnation and slow_steps >= cfg.stagnation_patience:
            trace.stagnated = True
            return g, trace
        t0 = time.perf_counter()
        j_uu = jac[np.ix_(unknown, unknown)]
        try:
            step = np.linalg.solve(j_uu, -res[unknown])
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(str(exc)) from exc

        lam = 1.0
        best = (np.inf, None, None)
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            trial = g.copy()
            trial[unknown] += lam * step
            if system.trust_box is not None:
                trial[unknown] = np.clip(
                    trial[unknown], system.trust_box[0], system.trust_box[1]
                )
            # A trial whose local problems cannot be solved (wild first
            # steps out of the degenerate zero state) is simply rejected.
            try:
                t_res, _, t_states = system._evaluate(trial, False, states)
                tn = float(np.abs(t_res[unknown]).max())
            except (NonConvergence, fem.FemEvaluationError):
                tn = np.inf
            if not np.isfinite(tn):
                tn = np.inf
            if tn < best[0]:
                best = (tn, trial, t_states)
            if tn <= (1.0 - 1e-4 * lam) * rn:
                g, states = trial, t_states
                accepted = True
                break
            lam *= cfg.damping_factor
        if not accepted:
            if best[0] < rn:
                _, g, states = best
                lam = None
            elif cfg.allow_stagnation:
                trace.stagnated = True
                return g, trace
            else:
                record(rn, 0.0, time.perf_counter() - t0)
                raise NonConvergence(
                    "substructured Newton stalled", trace.iterations, rn, trace
                )
        rn_prev = rn
        res, jac, states = system._evaluate(g, True, states)
        rn = float(np.abs(res[unknown]).max())
        step_norm = float(np.abs((lam or 1.0) * step).max())
        record(rn, step_norm, time.perf_counter() - t0)
        if rn > (1.0 - cfg.stagnation_ratio) * rn_prev:
            slow_steps += 1
        else:
            slow_steps = 0

    if rn <= cfg.tol:
        trace.converged = True
        return g, trace
    if cfg.allow_stagnation:
        trace.stagnated = True
        return g, trace
    raise NonConvergence(
        "substructured Newton did not converge", trace.iterations, rn, trace
    )


def reconstruct(
    problem: fem.ProblemDef,
    mesh: FineMesh,
    basis: CoarseBasis,
    g: np.ndarray,
    level: str = "fine",
    cfg: LocalSolverConfig | None = None,
) -> fem.DofVector:
    """Full nodal field whose skeleton trace is g (coarse g is prolonged).

    The interior of every subdomain is filled by solving the local
    Dirichlet problem with the trace as data.
    """
    cfg = cfg or LocalSolverConfig()
    g = np.asarray(g, dtype=float)
    skel = basis.skeleton
    if level == "coarse":
        if len(g) != basis.n_coarse_nodes:
            raise ValueError("coarse vector has wrong length")
        g_fine = basis.phi @ g
    elif level == "fine":
        if len(g) != skel.target_size:
            raise ValueError("fine skeleton vector has wrong length")
        g_fine = g
    else:
        raise ValueError("level must be 'fine' or 'coarse'")

    u = np.zeros(mesh.n_vertices)
    u[skel.indices] = g_fine
    for i in range(mesh.partition.n_subdomains):
        bnd = restriction(mesh, ("subdomain_boundary", i))
        interior = restriction(mesh, ("subdomain", i))
        u[interior.indices] = solve_local(
            problem, mesh, i, u[bnd.indices], cfg
        )
    return fem.DofVector(u, "omega_bar")


def solve_monolithic(
    problem: fem.ProblemDef,
    mesh: FineMesh,
    cfg: NewtonConfig | None = None,
    initial_guess: np.ndarray | None = None,
):
    """Damped Newton on the full finite element system (the oracle path).

    The default initial guess interpolates the boundary data
    K-harmonically in potential space; the degenerate fluxes have no
    Jacobian coupling at zero states or zero gradients, so Newton creeps
    when started there.
    """
    cfg = cfg or NewtonConfig()
    bnd = restriction(mesh, "boundary")
    free = restriction(mesh, "omega")
    bc_values = problem.u_D(mesh.vertices[bnd.indices])
    if initial_guess is None:
        u = np.zeros(mesh.n_vertices)
        u[free.indices] = fem.harmonic_interior_guess(
            problem, mesh, None, bc_values, free.indices, bnd.indices
        )
    else:
        u = np.array(initial_guess, dtype=float)
    u[bnd.indices] = bc_values
    trace = NewtonTrace()

    def resid(v):
        return fem.monolithic_residual(problem, mesh, v)[free.indices]

    def trial_norm(v):
        try:
            norm = float(np.abs(resid(v)).max())
        except fem.FemEvaluationError:
            return np.inf
        return norm if np.isfinite(norm) else np.inf

    t_start = time.perf_counter()
    r = resid(u)
    rn = float(np.abs(r).max())
    trace.residual_norms.append(rn)
    trace.step_norms.append(0.0)
    trace.seconds.append(time.perf_counter() - t_start)

    for _ in range(cfg.max_iter):
        if rn <= cfg.tol:
            trace.converged = True
            return fem.DofVector(u, "omega_bar"), trace
        t0 = time.perf_counter()
        jac = fem.monolithic_jacobian(problem, mesh, u)
        j_ff = jac[free.indices, :][:, free.indices]
        try:
            lu = spla.splu(j_ff.tocsc())
        except RuntimeError as exc:
            raise SingularJacobian(str(exc)) from exc
        step = lu.solve(-r)

        lam = 1.0
        best = (np.inf, None)
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            trial = u.copy()
            trial[free.indices] += lam * step
            tn = trial_norm(trial)
            if tn < best[0]:
                best = (tn, trial)
            if tn <= (1.0 - 1e-4 * lam) * rn:
                u = trial
                accepted = True
                break
            lam *= cfg.damping_factor
        if not accepted:
            if best[0] < rn:
                u = best[1]
                lam = None
            else:
                raise NonConvergence("monolithic Newton stalled", trace.iterations, rn, trace)
        r = resid(u)
        rn = float(np.abs(r).max())
        trace.residual_norms.append(rn)
        trace.step_norms.append(float(np.abs((lam or 1.0) * step).max()))
        trace.seconds.append(time.perf_counter() - t0)

    if rn <= cfg.tol:
        trace.converged = True
        return fem.DofVector(u, "omega_bar"), trace
    raise NonConvergence("monolithic Newton did not converge", trace.iterations, rn, trace)
