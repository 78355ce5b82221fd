"""Coefficient fields, flux models and mass-lumped P1 residuals with Jacobians.

The residual of a dof vector u has component l equal to

    a * w_l * u_l  +  sum_T K(x_T) |T| (flux term)_T . grad eta_l

with w_l the lumped vertex weight.  The diffusion term is coercive for
nonnegative states: the porous-media flux is discretized through nodal
interpolation of the potential w = |u|^(p-1) u (Kirchhoff interpolation),
the p-Laplace flux through the elementwise-constant gradient.  The
coefficient is sampled at element midpoints/centroids, consistent with
the piecewise-constant gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import FineMesh, element_volumes, restriction


class FemEvaluationError(ValueError):
    """Raised when a residual/Jacobian is evaluated at non-finite data."""


@dataclass(frozen=True)
class PorousMedia:
    """Flux grad(u^p), discretized through the nodal potential |u|^(p-1) u.

    The sign-preserving extension keeps u -> potential monotone
    non-decreasing on all of R, so Newton iterates that undershoot zero do
    not break coercivity.
    """

    p: float

    def __post_init__(self):
        if self.p <= 1:
            raise ValueError("porous-media exponent must satisfy p > 1")

    def potential(self, u: np.ndarray) -> np.ndarray:
        return np.sign(u) * np.abs(u) ** self.p

    def potential_derivative(self, u: np.ndarray) -> np.ndarray:
        return self.p * np.abs(u) ** (self.p - 1.0)


@dataclass(frozen=True)
class PLaplace:
    """Flux |grad u|^p grad u, elementwise constant for P1."""

    p: float

    def __post_init__(self):
        if self.p <= 0:
            raise ValueError("p-Laplace exponent must satisfy p > 0")


@dataclass(frozen=True)
class Coefficient:
    """Named positive coefficient field, evaluated pointwise.

    The name feeds dataset/model provenance hashes, so two problems with
    the same name are assumed to share the same field.
    """

    name: str
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.fn(np.atleast_2d(points))

    @staticmethod
    def constant(value: float) -> "Coefficient":
        if value <= 0:
            raise ValueError("coefficient must be positive")
        return Coefficient(f"constant:{value!r}", lambda pts: np.full(len(pts), float(value)))


def oscillatory_coefficient_1d() -> Coefficient:
    """1e-2 + (1 + sin(10 pi x + pi/4)) / 2; period 0.2 along the axis."""
    return Coefficient(
        "oscillatory_1d",
        lambda pts: 1e-2 + 0.5 * (1.0 + np.sin(10.0 * np.pi * pts[:, 0] + np.pi / 4.0)),
    )


def oscillatory_coefficient_2d() -> Coefficient:
    # Ten periods along x, five along y: both pitches divide the 0.2
    # subdomain size, so every subdomain sees the identical field.
    return Coefficient(
        "oscillatory_2d",
        lambda pts: 1e-2
        + 0.5
        * (
            1.0
            + np.sin(20.0 * np.pi * pts[:, 0] + np.pi / 2.0)
            * np.sin(10.0 * np.pi * pts[:, 1] + np.pi / 2.0)
        ),
    )


@dataclass
class ProblemDef:
    """Reaction coefficient, diffusion field, flux model and boundary data."""

    dim: int
    a: float
    coefficient: Coefficient
    flux: object
    u_D: Callable[[np.ndarray], np.ndarray]
    _ctx_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        if self.a < 0:
            raise ValueError("reaction coefficient must be >= 0")
        if not isinstance(self.flux, (PorousMedia, PLaplace)):
            raise ValueError("flux must be PorousMedia or PLaplace")

    def provenance(self) -> dict:
        flux = self.flux
        return {
            "dim": self.dim,
            "a": self.a,
            "coefficient": self.coefficient.name,
            "flux": type(flux).__name__,
            "p": flux.p,
        }


@dataclass
class DofVector:
    """Values over a dof region together with the region tag."""

    values: np.ndarray
    region: object

    def validate(self, mesh: FineMesh) -> None:
        expected = restriction(mesh, self.region).target_size
        if len(self.values) != expected:
            raise ValueError(
                f"dof vector has {len(self.values)} entries, region {self.region!r} "
                f"has {expected}"
            )


def eval_coefficient(problem: ProblemDef, point) -> float:
    """Coefficient value at a single point."""
    value = float(problem.coefficient(np.atleast_2d(point))[0])
    if value <= 0:
        raise FemEvaluationError(f"coefficient not positive at {point!r}")
    return value


class _Context:
    """Precomputed geometry for one assembly scope (subdomain or global)."""

    def __init__(self, problem: ProblemDef, mesh: FineMesh, scope):
        if scope is None:
            elem_ids = np.arange(mesh.n_elements)
            self.verts = restriction(mesh, "omega_bar")
        else:
            elem_ids = np.where(mesh.owner_subdomain == scope)[0]
            self.verts = restriction(mesh, ("subdomain_closure", scope))
        self.n_loc = self.verts.target_size

        g2l = np.full(mesh.n_vertices, -1, dtype=np.int64)
        g2l[self.verts.indices] = np.arange(self.n_loc)
        self.elements = g2l[mesh.elements[elem_ids]]

        pts = mesh.vertices[mesh.elements[elem_ids]]
        self.volumes = element_volumes(mesh)[elem_ids]
        centroids = pts.mean(axis=1)
        self.k_elem = problem.coefficient(centroids)
        if not (self.k_elem > 0).all():
            raise FemEvaluationError("coefficient must be positive on all elements")

        if mesh.dim == 1:
            h = self.volumes
            self.grads = np.stack(
                [np.column_stack([-1.0 / h]), np.column_stack([1.0 / h])], axis=1
            )
        else:
            e1 = pts[:, 1, :] - pts[:, 0, :]
            e2 = pts[:, 2, :] - pts[:, 0, :]
            det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
            g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
            g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
            self.grads = np.stack([-g1 - g2, g1, g2], axis=1)

        self.lumped = np.zeros(self.n_loc)
        share = self.volumes / (mesh.dim + 1)
        for k in range(mesh.dim + 1):
            np.add.at(self.lumped, self.elements[:, k], share)

        # Stiffness with the coefficient folded in; the porous-media flux is
        # linear in the nodal potential so this matrix is state-independent.
        nloc_el = mesh.dim + 1
        rows = np.repeat(self.elements, nloc_el, axis=1).ravel()
        cols = np.tile(self.elements, (1, nloc_el)).ravel()
        kv = (self.k_elem * self.volumes)[:, None, None]
        blocks = kv * np.einsum("nkd,nmd->nkm", self.grads, self.grads)
        self.stiffness = sp.csr_matrix(
            (blocks.ravel(), (rows, cols)), shape=(self.n_loc, self.n_loc)
        )
        self._rows = rows
        self._cols = cols


def _context(problem: ProblemDef, mesh: FineMesh, scope) -> _Context:
    key = (id(mesh), scope)
    ctx = problem._ctx_cache.get(key)
    if ctx is None:
        ctx = _Context(problem, mesh, scope)
        problem._ctx_cache[key] = ctx
    return ctx


def _check_finite(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if not np.isfinite(u).all():
        raise FemEvaluationError("state vector contains non-finite entries")
    return u


def _residual(ctx: _Context, problem: ProblemDef, u: np.ndarray) -> np.ndarray:
    r = problem.a * ctx.lumped * u
    flux = problem.flux
    if isinstance(flux, PorousMedia):
        r += ctx.stiffness @ flux.potential(u)
    else:
        gu = np.einsum("nk,nkd->nd", u[ctx.elements], ctx.grads)
        norm = np.sqrt((gu * gu).sum(axis=1))
        scale = ctx.k_elem * ctx.volumes * norm ** flux.p
        f = scale[:, None] * gu
        for k in range(ctx.grads.shape[1]):
            np.add.at(r, ctx.elements[:, k], (f * ctx.grads[:, k, :]).sum(axis=1))
    return r


def _jacobian(ctx: _Context, problem: ProblemDef, u: np.ndarray) -> sp.csr_matrix:
    diag = sp.diags(problem.a * ctx.lumped)
    flux = problem.flux
    if isinstance(flux, PorousMedia):
        a = ctx.stiffness.copy()
        a.data = a.data * flux.potential_derivative(u)[a.indices]
        return (a + diag).tocsr()
    gu = np.einsum("nk,nkd->nd", u[ctx.elements], ctx.grads)
    norm2 = (gu * gu).sum(axis=1)
    norm = np.sqrt(norm2)
    p = flux.p
    s = norm**p
    # d/dg (|g|^p g) = |g|^p I + p |g|^(p-2) g g^T, taken as 0 at g = 0.
    with np.errstate(divide="ignore", invalid="ignore"):
        s2 = np.where(norm > 0.0, p * norm ** (p - 2.0), 0.0)
    gdot = np.einsum("nkd,nd->nk", ctx.grads, gu)
    dg = s[:, None, None] * ctx.grads + (s2[:, None] * gdot)[:, :, None] * gu[:, None, :]
    kv = (ctx.k_elem * ctx.volumes)[:, None, None]
    blocks = kv * np.einsum("nkd,nmd->nkm", ctx.grads, dg)
    a = sp.csr_matrix(
        (blocks.ravel(), (ctx._rows, ctx._cols)), shape=(ctx.n_loc, ctx.n_loc)
    )
    return (a + diag).tocsr()


def local_residual(problem: ProblemDef, mesh: FineMesh, i: int, u_i: np.ndarray) -> np.ndarray:
    """Neumann residual of subdomain i at the closure dof vector u_i."""
    ctx = _context(problem, mesh, i)
    u_i = _check_finite(u_i)
    if len(u_i) != ctx.n_loc:
        raise ValueError(f"expected {ctx.n_loc} local dofs, got {len(u_i)}")
    return _residual(ctx, problem, u_i)


def local_jacobian(problem: ProblemDef, mesh: FineMesh, i: int, u_i: np.ndarray) -> sp.csr_matrix:
    """Sparse Jacobian of ``local_residual`` at u_i."""
    ctx = _context(problem, mesh, i)
    u_i = _check_finite(u_i)
    if len(u_i) != ctx.n_loc:
        raise ValueError(f"expected {ctx.n_loc} local dofs, got {len(u_i)}")
    return _jacobian(ctx, problem, u_i)


def global_residual(problem: ProblemDef, mesh: FineMesh, u: np.ndarray) -> np.ndarray:
    """Glued residual: sum over subdomains of extended local residuals."""
    u = _check_finite(u)
    out = np.zeros(mesh.n_vertices)
    for i in range(mesh.partition.n_subdomains):
        verts = restriction(mesh, ("subdomain_closure", i))
        verts.extend_add(local_residual(problem, mesh, i, verts.restrict(u)), out)
    return out


def monolithic_residual(problem: ProblemDef, mesh: FineMesh, u: np.ndarray) -> np.ndarray:
    """Residual assembled directly over all elements (no partition gluing)."""
    ctx = _context(problem, mesh, None)
    return _residual(ctx, problem, _check_finite(u))


def monolithic_jacobian(problem: ProblemDef, mesh: FineMesh, u: np.ndarray) -> sp.csr_matrix:
    ctx = _context(problem, mesh, None)
    return _jacobian(ctx, problem, _check_finite(u))


def harmonic_interior_guess(
    problem: ProblemDef,
    mesh: FineMesh,
    scope,
    boundary_values: np.ndarray,
    int_pos: np.ndarray,
    bnd_pos: np.ndarray,
) -> np.ndarray:
    """K-harmonic interpolation of the boundary data in potential space.

    Solves div(K grad w) = 0 for the flux potential (w = |u|^(p-1) u for
    porous media, w = u for the p-Laplace model) and maps back.  The
    result is strictly inside the positive cone for nonnegative data and
    gradient-rich, which keeps the Jacobian coupling of the degenerate
    fluxes alive; zero or constant starts make Newton creep one cell per
    iteration.
    """
    ctx = _context(problem, mesh, scope)
    if len(int_pos) == 0:
        return np.zeros(0)
    bc = np.asarray(boundary_values, dtype=float)
    flux = problem.flux
    if isinstance(flux, PorousMedia):
        bc = flux.potential(bc)
    a_ii = ctx.stiffness[int_pos, :][:, int_pos]
    a_ib = ctx.stiffness[int_pos, :][:, bnd_pos]
    w = spla.spsolve(a_ii.tocsc(), -a_ib @ bc)
    if isinstance(flux, PorousMedia):
        w = np.sign(w) * np.abs(w) ** (1.0 / flux.p)
    return w


def lumped_weights(mesh: FineMesh) -> np.ndarray:
    """Row-sum lumped P1 mass weights of all vertices."""
    share = element_volumes(mesh) / (mesh.dim + 1)
    out = np.zeros(mesh.n_vertices)
    for k in range(mesh.dim + 1):
        np.add.at(out, mesh.elements[:, k], share)
    return out
