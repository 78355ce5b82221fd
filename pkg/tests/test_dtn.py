import numpy as np
import pytest

from msdtn import fem
from msdtn.dtn import (
    DtNResult,
    LocalSolverConfig,
    NonConvergence,
    dtn_coarse,
    dtn_fine,
    solve_local,
)
from msdtn.mesh import restriction


def fd_jacobian(fn, g, steps=None):
    g = np.asarray(g, dtype=float)
    out = []
    for k in range(len(g)):
        h = 1e-5 * (1.0 + abs(g[k])) if steps is None else steps[k]
        gp, gm = g.copy(), g.copy()
        gp[k] += h
        gm[k] -= h
        out.append((fn(gp) - fn(gm)) / (2 * h))
    return np.column_stack(out)


def test_zero_data_zero_state(pme_problem_1d, mesh_1d, local_cfg):
    _, mesh, _ = mesh_1d
    u = solve_local(pme_problem_1d, mesh, 1, np.zeros(2), local_cfg)
    assert np.all(u == 0.0)
    res = dtn_fine(pme_problem_1d, mesh, 1, np.zeros(2), local_cfg)
    assert np.all(res.flux == 0.0)


def test_solve_local_analytic(analytic_problem_1d, analytic_mesh_1d):
    _, mesh, _ = analytic_mesh_1d
    cfg = LocalSolverConfig()
    ul, ur = 1.0, 2.0
    u = solve_local(analytic_problem_1d, mesh, 0, np.array([ul, ur]), cfg)
    x = mesh.vertices[1:-1, 0]
    expected = (ul**4 + (ur**4 - ul**4) * x) ** 0.25
    assert np.abs(u - expected).max() <= 1e-9


def test_solve_local_residual_selfcheck(pme_problem_1d, mesh_1d, local_cfg):
    _, mesh, _ = mesh_1d
    rng = np.random.default_rng(0)
    interior = restriction(mesh, ("subdomain", 3))
    closure = restriction(mesh, ("subdomain_closure", 3))
    bnd = restriction(mesh, ("subdomain_boundary", 3))
    int_pos = closure.positions_of(interior)
    bnd_pos = closure.positions_of(bnd)
    for _ in range(3):
        g = rng.uniform(0.0, 4.0, 2)
        u_int = solve_local(pme_problem_1d, mesh, 3, g, local_cfg)
        u_loc = np.zeros(closure.target_size)
        u_loc[int_pos] = u_int
        u_loc[bnd_pos] = g
        r = fem.local_residual(pme_problem_1d, mesh, 3, u_loc)[int_pos]
        assert np.abs(r).max() <= 1e-10


def test_solve_local_nonconvergence_reported(pme_problem_1d, mesh_1d):
    _, mesh, _ = mesh_1d
    cfg = LocalSolverConfig(max_iter=1, initial_guess="zero")
    with pytest.raises(NonConvergence) as err:
        solve_local(pme_problem_1d, mesh, 0, np.array([4.0, 0.0]), cfg)
    assert err.value.residual_norm > 0


def test_dtn_fine_analytic_flux_and_jacobian(analytic_problem_1d, analytic_mesh_1d):
    _, mesh, _ = analytic_mesh_1d
    cfg = LocalSolverConfig(residual_tol=1e-12)
    ul, ur = 1.0, 2.0
    res = dtn_fine(analytic_problem_1d, mesh, 0, np.array([ul, ur]), cfg, want_jacobian=True)
    # boundary residual convention: positive diagonal DtN derivative
    assert res.flux[0] == pytest.approx(ul**4 - ur**4, abs=1e-9)
    assert res.flux[1] == pytest.approx(ur**4 - ul**4, abs=1e-9)
    fd = fd_jacobian(
        lambda g: dtn_fine(analytic_problem_1d, mesh, 0, g, cfg).flux, [ul, ur]
    )
    assert np.abs(res.jacobian - fd).max() / np.abs(fd).max() <= 1e-5


def test_dtn_result_shape_validation():
    with pytest.raises(ValueError):
        DtNResult(np.zeros(3), np.zeros((2, 2)), np.zeros(5))


@pytest.mark.parametrize("case", ["pme", "plap"])
def test_dtn_fine_jacobian_fd_1d(case, pme_problem_1d, plap_problem_1d, mesh_1d):
    problem = pme_problem_1d if case == "pme" else plap_problem_1d
    _, mesh, _ = mesh_1d
    # fluxes reach ~5e4 here, so the default absolute tolerance is already
    # near the evaluation noise floor
    cfg = LocalSolverConfig()
    rng = np.random.default_rng(11)
    for _ in range(4):
        g = rng.uniform(0.1, 4.0, 2)
        res = dtn_fine(problem, mesh, 2, g, cfg, want_jacobian=True)
        fd = fd_jacobian(lambda gg: dtn_fine(problem, mesh, 2, gg, cfg).flux, g)
        assert np.abs(res.jacobian - fd).max() / np.abs(fd).max() <= 1e-5


def test_dtn_coarse_equals_fine_in_1d(pme_problem_1d, mesh_1d, local_cfg):
    _, mesh, basis = mesh_1d
    g = np.array([1.5, 0.5])
    fine = dtn_fine(pme_problem_1d, mesh, 2, g, local_cfg, want_jacobian=True)
    coarse = dtn_coarse(pme_problem_1d, mesh, basis, 2, g, local_cfg, want_jacobian=True)
    assert np.allclose(fine.flux, coarse.flux, atol=1e-14)
    assert np.allclose(fine.jacobian, coarse.jacobian, atol=1e-14)


def test_dtn_coarse_zero(pme_problem_2d, mesh_2d_case, local_cfg):
    _, mesh, basis = mesh_2d_case
    res = dtn_coarse(pme_problem_2d, mesh, basis, 12, np.zeros(4), local_cfg)
    assert np.all(res.flux == 0.0)


def test_dtn_coarse_jacobian_fd_2d(pme_problem_2d, mesh_2d_case):
    _, mesh, basis = mesh_2d_case
    cfg = LocalSolverConfig(residual_tol=1e-12)
    rng = np.random.default_rng(3)
    v = rng.uniform(0.2, 1.2, 4)
    res = dtn_coarse(pme_problem_2d, mesh, basis, 6, v, cfg, want_jacobian=True)
    fd = fd_jacobian(lambda vv: dtn_coarse(pme_problem_2d, mesh, basis, 6, vv, cfg).flux, v)
    assert np.abs(res.jacobian - fd).max() / np.abs(fd).max() <= 1e-5


def test_implicit_function_consistency(pme_problem_2d, mesh_2d_case, local_cfg):
    _, mesh, _ = mesh_2d_case
    rng = np.random.default_rng(9)
    bnd = restriction(mesh, ("subdomain_boundary", 7))
    g = rng.uniform(0.1, 1.2, bnd.target_size)
    res = dtn_fine(pme_problem_2d, mesh, 7, g, local_cfg)
    closure = restriction(mesh, ("subdomain_closure", 7))
    interior = restriction(mesh, ("subdomain", 7))
    u_loc = np.zeros(closure.target_size)
    u_loc[closure.positions_of(interior)] = res.interior_state
    u_loc[closure.positions_of(bnd)] = g
    r_int = fem.local_residual(pme_problem_2d, mesh, 7, u_loc)[closure.positions_of(interior)]
    assert np.abs(r_int).max() <= local_cfg.residual_tol


def test_sign_structure_1d(pme_problem_1d, mesh_1d, local_cfg):
    _, mesh, basis = mesh_1d
    vals = np.linspace(0.1, 4.0, 10)
    for ul in vals[::3]:
        for ur in vals[::3]:
            res = dtn_coarse(
                pme_problem_1d, mesh, basis, 1, np.array([ul, ur]), local_cfg,
                want_jacobian=True,
            )
            jac = res.jacobian
            assert jac[0, 0] > 0 and jac[1, 1] > 0
            assert jac[0, 1] <= 1e-10 and jac[1, 0] <= 1e-10


@pytest.mark.parametrize("fixture", ["mesh_1d", "mesh_2d_case"])
def test_periodic_reuse_across_subdomains(fixture, request, pme_problem_1d, pme_problem_2d, local_cfg):
    _, mesh, basis = request.getfixturevalue(fixture)
    problem = pme_problem_1d if fixture == "mesh_1d" else pme_problem_2d
    d = 2 if fixture == "mesh_1d" else 4
    rng = np.random.default_rng(4)
    v = rng.uniform(0.1, 1.0, d)
    base = dtn_coarse(problem, mesh, basis, 0, v, local_cfg, want_jacobian=True)
    scale = max(1.0, np.abs(base.flux).max())
    for i in range(1, mesh.partition.n_subdomains):
        other = dtn_coarse(problem, mesh, basis, i, v, local_cfg, want_jacobian=True)
        assert np.abs(other.flux - base.flux).max() <= 1e-12 * scale
        assert np.abs(other.jacobian - base.jacobian).max() <= 1e-9 * max(
            1.0, np.abs(base.jacobian).max()
        )


def test_warm_start_reuses_interior_state(pme_problem_1d, mesh_1d, local_cfg):
    _, mesh, _ = mesh_1d
    g = np.array([2.0, 1.0])
    first = dtn_fine(pme_problem_1d, mesh, 0, g, local_cfg)
    again = solve_local(pme_problem_1d, mesh, 0, g, local_cfg, warm_start=first.interior_state)
    assert np.abs(again - first.interior_state).max() <= 1e-9
