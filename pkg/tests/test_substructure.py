import numpy as np
import pytest

from msdtn import fem
from msdtn.dtn import LocalSolverConfig, NonConvergence, dtn_coarse
from msdtn.mesh import restriction
from msdtn.substructure import (
    NewtonConfig,
    NewtonTrace,
    SkeletonSystem,
    harmonic_skeleton_guess,
    reconstruct,
    residual_skeleton,
    solve_monolithic,
    solve_substructured,
)


def rel_lumped_l2(mesh, a, b):
    w = fem.lumped_weights(mesh)
    return np.sqrt(np.sum(w * (a - b) ** 2) / np.sum(w * b ** 2))


def test_zero_residual_zero_data(mesh_1d, local_cfg):
    _, mesh, basis = mesh_1d
    problem = fem.ProblemDef(
        1, 20.0, fem.oscillatory_coefficient_1d(), fem.PorousMedia(4.0),
        lambda pts: np.zeros(len(pts)),
    )
    for level in ("fine", "coarse"):
        system = SkeletonSystem(level, problem, mesh, basis, local_cfg)
        r = residual_skeleton(system, system.initial_vector())
        assert np.all(r == 0.0)


def test_fine_residual_vanishes_at_monolithic_trace(pme_problem_1d, mesh_1d, local_cfg):
    _, mesh, basis = mesh_1d
    u_mono, _ = solve_monolithic(pme_problem_1d, mesh, NewtonConfig(tol=1e-10, max_iter=100))
    system = SkeletonSystem("fine", pme_problem_1d, mesh, basis, local_cfg)
    g = u_mono.values[basis.skeleton.indices]
    r = residual_skeleton(system, g)
    assert np.abs(r).max() <= 1e-9


def test_coarse_residual_pairs_fluxes_1d(pme_problem_1d, mesh_1d, local_cfg):
    _, mesh, basis = mesh_1d
    rng = np.random.default_rng(2)
    system = SkeletonSystem("coarse", pme_problem_1d, mesh, basis, local_cfg)
    g = system.initial_vector(rng.uniform(0.5, 3.5, len(system.unknown)))
    r = residual_skeleton(system, g)
    for k, node in enumerate(system.unknown):
        left = dtn_coarse(pme_problem_1d, mesh, basis, node - 1, g[node - 1 : node + 1], local_cfg)
        right = dtn_coarse(pme_problem_1d, mesh, basis, node, g[node : node + 2], local_cfg)
        expected = left.flux[1] + right.flux[0]
        assert r[k] == pytest.approx(expected, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("level", ["fine", "coarse"])
def test_skeleton_jacobian_matches_fd(level, pme_problem_1d, mesh_1d):
    _, mesh, basis = mesh_1d
    cfg = LocalSolverConfig()
    system = SkeletonSystem(level, pme_problem_1d, mesh, basis, cfg)
    rng = np.random.default_rng(8)
    g = system.initial_vector(rng.uniform(0.5, 3.5, len(system.unknown)))
    r, jac = residual_skeleton(system, g, want_jacobian=True)
    fd = np.zeros_like(jac)
    for col, dof in enumerate(system.unknown):
        h = 1e-5 * (1.0 + abs(g[dof]))
        gp, gm = g.copy(), g.copy()
        gp[dof] += h
        gm[dof] -= h
        fd[:, col] = (residual_skeleton(system, gp) - residual_skeleton(system, gm)) / (2 * h)
    assert np.abs(jac - fd).max() / np.abs(fd).max() <= 1e-5


def test_surrogate_backend_jacobian_matches_fd(pme_problem_1d, mesh_1d, local_cfg):
    from msdtn.surrogate import LossConfig, SurrogateModelSet, init_net

    _, mesh, basis = mesh_1d
    rng = np.random.default_rng(0)
    nets = [init_net(2, (8,), l, rng) for l in range(2)]
    models = SurrogateModelSet(nets, LossConfig(u_min=0.0, u_max=4.0), "x")
    system = SkeletonSystem(
        "coarse", pme_problem_1d, mesh, basis, local_cfg, backend="surrogate", models=models
    )
    g = system.initial_vector(rng.uniform(0.5, 3.5, len(system.unknown)))
    r, jac = residual_skeleton(system, g, want_jacobian=True)
    fd = np.zeros_like(jac)
    for col, dof in enumerate(system.unknown):
        h = 1e-6 * (1.0 + abs(g[dof]))
        gp, gm = g.copy(), g.copy()
        gp[dof] += h
        gm[dof] -= h
        fd[:, col] = (residual_skeleton(system, gp) - residual_skeleton(system, gm)) / (2 * h)
    assert np.abs(jac - fd).max() / max(1.0, np.abs(fd).max()) <= 1e-5


def test_fine_substructured_matches_monolithic_1d(pme_problem_1d, mesh_1d):
    _, mesh, basis = mesh_1d
    cfg = LocalSolverConfig()
    u_mono, _ = solve_monolithic(pme_problem_1d, mesh, NewtonConfig(tol=1e-10, max_iter=100))
    system = SkeletonSystem("fine", pme_problem_1d, mesh, basis, cfg)
    g, trace = solve_substructured(system, NewtonConfig(tol=1e-10, max_iter=100))
    assert trace.converged
    u_rec = reconstruct(pme_problem_1d, mesh, basis, g, "fine", cfg)
    assert rel_lumped_l2(mesh, u_rec.values, u_mono.values) <= 1e-8


def test_dirichlet_entries_never_change(pme_problem_1d, mesh_1d, local_cfg):
    _, mesh, basis = mesh_1d
    system = SkeletonSystem("coarse", pme_problem_1d, mesh, basis, local_cfg)
    g, _ = solve_substructured(system, NewtonConfig(tol=1e-10, max_iter=100))
    assert np.array_equal(g[system.fixed], system.fixed_values)
    assert g[system.fixed][0] == 4.0 and g[system.fixed][-1] == 0.0


def test_flux_matching_at_convergence(pme_problem_1d, mesh_1d, local_cfg):
    _, mesh, basis = mesh_1d
    system = SkeletonSystem("coarse", pme_problem_1d, mesh, basis, local_cfg)
    cfg = NewtonConfig(tol=1e-10, max_iter=100)
    g, _ = solve_substructured(system, cfg)
    # assembled DtN contributions cancel at every interior coarse node
    r = residual_skeleton(system, g)
    assert np.abs(r).max() <= cfg.tol


def test_reconstruct_zero(mesh_1d, local_cfg):
    _, mesh, basis = mesh_1d
    problem = fem.ProblemDef(
        1, 20.0, fem.oscillatory_coefficient_1d(), fem.PorousMedia(4.0),
        lambda pts: np.zeros(len(pts)),
    )
    u = reconstruct(problem, mesh, basis, np.zeros(basis.n_skeleton_dofs), "fine", local_cfg)
    assert np.all(u.values == 0.0)
    u.validate(mesh)


def test_reconstruct_coarse_trace_prolongation(pme_problem_2d, mesh_2d_case, local_cfg):
    _, mesh, basis = mesh_2d_case
    rng = np.random.default_rng(1)
    system = SkeletonSystem("coarse", pme_problem_2d, mesh, basis, local_cfg)
    g_h = system.initial_vector(rng.uniform(0.1, 1.0, len(system.unknown)))
    u = reconstruct(pme_problem_2d, mesh, basis, g_h, "coarse", local_cfg)
    trace = u.values[basis.skeleton.indices]
    assert np.abs(trace - basis.phi @ g_h).max() <= 1e-14


def test_nonconvergence_carries_trace(pme_problem_1d, mesh_1d, local_cfg):
    _, mesh, basis = mesh_1d
    system = SkeletonSystem("coarse", pme_problem_1d, mesh, basis, local_cfg)
    with pytest.raises(NonConvergence) as err:
        solve_substructured(system, NewtonConfig(tol=1e-14, max_iter=2))
    assert isinstance(err.value.trace, NewtonTrace)
    assert len(err.value.trace.residual_norms) >= 1


def test_trace_csv_roundtrip(tmp_path, pme_problem_1d, mesh_1d, local_cfg):
    _, mesh, basis = mesh_1d
    system = SkeletonSystem("coarse", pme_problem_1d, mesh, basis, local_cfg)
    ref = harmonic_skeleton_guess(system)
    _, trace = solve_substructured(system, NewtonConfig(tol=1e-8, max_iter=100), reference=ref)
    path = tmp_path / "trace.csv"
    trace.to_csv(str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "iteration,residual_norm,step_norm,error_vs_reference,seconds"
    assert len(lines) == len(trace.residual_norms) + 1
    path2 = tmp_path / "trace2.csv"
    trace.to_csv(str(path2), include_seconds=False)
    assert path2.read_text().splitlines()[0] == "iteration,residual_norm,step_norm,error_vs_reference"


def test_harmonic_guess_matches_boundary(pme_problem_2d, mesh_2d_case, local_cfg):
    _, mesh, basis = mesh_2d_case
    system = SkeletonSystem("coarse", pme_problem_2d, mesh, basis, local_cfg)
    g0 = harmonic_skeleton_guess(system)
    assert np.allclose(g0[system.fixed], system.fixed_values, atol=1e-12)
    assert g0[system.unknown].min() > -1e-12
