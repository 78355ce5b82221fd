"""Local Dirichlet solves and discrete Dirichlet-to-Neumann maps.

``dtn_fine`` maps fine Dirichlet data on a subdomain boundary to the
boundary components of the Neumann residual at the converged interior
state; its Jacobian is the Schur complement of the interior block of the
local Jacobian.  ``dtn_coarse`` is the same map sandwiched between the
coarse trace basis and its transpose.

Both return a positive diagonal / non-positive off-diagonal Jacobian in
1D on the positive orthant, which is what the monotonicity penalty of the
surrogate training assumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from . import fem
from .mesh import CoarseBasis, FineMesh, restriction


class NonConvergence(RuntimeError):
    """Newton failed to reach the residual tolerance."""

    def __init__(self, message, iterations, residual_norm, trace=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual_norm = residual_norm
        self.trace = trace


class SingularJacobian(RuntimeError):
    """Factorization of the interior Jacobian block failed."""


@dataclass
class LocalSolverConfig:
    """Damped-Newton settings for the local Dirichlet problems.

    The default initial guess interpolates the boundary data K-harmonically
    in potential space; zero or constant starts sit exactly where the
    degenerate fluxes lose their Jacobian coupling.
    """

    residual_tol: float = 1e-10
    max_iter: int = 100
    damping_factor: float = 0.5
    max_halvings: int = 30
    initial_guess: str = "harmonic"  # "harmonic" | "zero" | "mean"


@dataclass
class DtNResult:
    """Boundary flux, optional Jacobian, and the converged interior state."""

    flux: np.ndarray
    jacobian: np.ndarray | None
    interior_state: np.ndarray

    def __post_init__(self):
        if self.jacobian is not None:
            n = len(self.flux)
            if self.jacobian.shape != (n, n):
                raise ValueError("jacobian must be square of the flux dimension")


def _factorize(a):
    try:
        lu = spla.splu(a.tocsc())
    except RuntimeError as exc:
        raise SingularJacobian(str(exc)) from exc
    if not np.isfinite(lu.U.diagonal()).all() or (lu.U.diagonal() == 0).any():
        raise SingularJacobian("interior Jacobian factorization produced zero pivots")
    return lu


def _local_index_split(problem, mesh, i):
    closure = restriction(mesh, ("subdomain_closure", i))
    interior = restriction(mesh, ("subdomain", i))
    boundary = restriction(mesh, ("subdomain_boundary", i))
    return closure, closure.positions_of(interior), closure.positions_of(boundary)


def solve_local(
    problem: fem.ProblemDef,
    mesh: FineMesh,
    i: int,
    g_bnd: np.ndarray,
    cfg: LocalSolverConfig | None = None,
    warm_start: np.ndarray | None = None,
) -> np.ndarray:
    """Interior state solving the local Dirichlet problem with data g_bnd.

    Damped Newton with Armijo backtracking on the max-norm of the interior
    residual.  Raises NonConvergence past ``max_iter`` and SingularJacobian
    when the interior block cannot be factorized.
    """
    cfg = cfg or LocalSolverConfig()
    g_bnd = np.asarray(g_bnd, dtype=float)
    if not np.isfinite(g_bnd).all():
        raise fem.FemEvaluationError("boundary data contains non-finite entries")
    _, int_pos, bnd_pos = _local_index_split(problem, mesh, i)
    n_int = len(int_pos)

    u_loc = np.zeros(len(int_pos) + len(bnd_pos))
    u_loc[bnd_pos] = g_bnd
    if warm_start is not None:
        u_loc[int_pos] = warm_start
    elif cfg.initial_guess == "harmonic":
        u_loc[int_pos] = fem.harmonic_interior_guess(
            problem, mesh, i, g_bnd, int_pos, bnd_pos
        )
    elif cfg.initial_guess == "mean" and len(g_bnd):
        u_loc[int_pos] = float(np.mean(g_bnd))
    elif cfg.initial_guess not in ("zero", "mean"):
        raise ValueError(f"unknown initial guess policy {cfg.initial_guess!r}")

    if n_int == 0:
        return u_loc[int_pos]

    def res_norm(u):
        # Overflowing trials (u**p past float range) count as rejected steps.
        try:
            r = fem.local_residual(problem, mesh, i, u)[int_pos]
        except fem.FemEvaluationError:
            return np.inf
        norm = float(np.abs(r).max())
        return norm if np.isfinite(norm) else np.inf

    r = fem.local_residual(problem, mesh, i, u_loc)[int_pos]
    rn = float(np.abs(r).max())
    for _ in range(cfg.max_iter):
        if rn <= cfg.residual_tol:
            return u_loc[int_pos].copy()
        jac = fem.local_jacobian(problem, mesh, i, u_loc)
        a_ii = jac[int_pos, :][:, int_pos]
        step = _factorize(a_ii).solve(-r)

        lam = 1.0
        best = (np.inf, None)
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            trial = u_loc.copy()
            trial[int_pos] += lam * step
            tn = res_norm(trial)
            if tn < best[0]:
                best = (tn, trial)
            if tn <= (1.0 - 1e-4 * lam) * rn:
                u_loc, rn = trial, tn
                accepted = True
                break
            lam *= cfg.damping_factor
        if not accepted:
            if best[0] < rn:
                rn, u_loc = best[0], best[1]
            else:
                raise NonConvergence(
                    f"local Newton stalled on subdomain {i}", 0, rn
                )
        r = fem.local_residual(problem, mesh, i, u_loc)[int_pos]
        rn = float(np.abs(r).max())
    if rn <= cfg.residual_tol:
        return u_loc[int_pos].copy()
    raise NonConvergence(
        f"local Newton on subdomain {i} did not converge", cfg.max_iter, rn
    )


def dtn_fine(
    problem: fem.ProblemDef,
    mesh: FineMesh,
    i: int,
    g_bnd: np.ndarray,
    cfg: LocalSolverConfig | None = None,
    want_jacobian: bool = False,
    warm_start: np.ndarray | None = None,
) -> DtNResult:
    """Fine DtN map: boundary residual at the converged interior state.

    With ``want_jacobian`` the derivative is assembled as the Schur
    complement A_bb - A_bi A_ii^{-1} A_ib of the local Jacobian blocks,
    reusing one factorization of the interior block for all boundary
    columns.
    """
    cfg = cfg or LocalSolverConfig()
    _, int_pos, bnd_pos = _local_index_split(problem, mesh, i)
    u_int = solve_local(problem, mesh, i, g_bnd, cfg, warm_start=warm_start)

    u_loc = np.zeros(len(int_pos) + len(bnd_pos))
    u_loc[int_pos] = u_int
    u_loc[bnd_pos] = g_bnd
    flux = fem.local_residual(problem, mesh, i, u_loc)[bnd_pos]

    jac = None
    if want_jacobian:
        a = fem.local_jacobian(problem, mesh, i, u_loc)
        a_bb = a[bnd_pos, :][:, bnd_pos].toarray()
        if len(int_pos):
            a_ii = a[int_pos, :][:, int_pos]
            a_ib = a[int_pos, :][:, bnd_pos].toarray()
            a_bi = a[bnd_pos, :][:, int_pos].toarray()
            jac = a_bb - a_bi @ _factorize(a_ii).solve(a_ib)
        else:
            jac = a_bb
    return DtNResult(flux, jac, u_int)


def dtn_coarse(
    problem: fem.ProblemDef,
    mesh: FineMesh,
    basis: CoarseBasis,
    i: int,
    v: np.ndarray,
    cfg: LocalSolverConfig | None = None,
    want_jacobian: bool = False,
    warm_start: np.ndarray | None = None,
) -> DtNResult:
    """Coarse DtN map on the corner values of subdomain i.

    Prolongs v through the local coarse block, applies the fine map, and
    restricts flux and Jacobian back to the corner nodes.  In 1D the local
    block is the 2x2 identity, so the coarse map coincides with the fine
    one.
    """
    phi_i = basis.local_blocks[i]
    v = np.asarray(v, dtype=float)
    if len(v) != phi_i.shape[1]:
        raise ValueError(f"expected {phi_i.shape[1]} corner values, got {len(v)}")
    fine = dtn_fine(
        problem, mesh, i, phi_i @ v, cfg,
        want_jacobian=want_jacobian, warm_start=warm_start,
    )
    jac = phi_i.T @ fine.jacobian @ phi_i if fine.jacobian is not None else None
    return DtNResult(phi_i.T @ fine.flux, jac, fine.interior_state)
