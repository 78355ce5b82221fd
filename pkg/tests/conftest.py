import numpy as np
import pytest

from msdtn import fem
from msdtn.dtn import LocalSolverConfig
from msdtn.mesh import build_coarse_basis, build_fine_mesh, build_partition


def zero_bc(pts):
    return np.zeros(len(pts))


@pytest.fixture(scope="session")
def mesh_1d():
    partition = build_partition(1, 5)
    mesh = build_fine_mesh(partition, 40)
    return partition, mesh, build_coarse_basis(partition, mesh)


@pytest.fixture(scope="session")
def mesh_2d_small():
    partition = build_partition(2, 2)
    mesh = build_fine_mesh(partition, 4)
    return partition, mesh, build_coarse_basis(partition, mesh)


@pytest.fixture(scope="session")
def mesh_2d_case():
    partition = build_partition(2, 5)
    mesh = build_fine_mesh(partition, 18)
    return partition, mesh, build_coarse_basis(partition, mesh)


@pytest.fixture(scope="session")
def pme_problem_1d():
    return fem.ProblemDef(
        1, 20.0, fem.oscillatory_coefficient_1d(), fem.PorousMedia(4.0),
        lambda pts: np.where(pts[:, 0] < 0.5, 4.0, 0.0),
    )


@pytest.fixture(scope="session")
def plap_problem_1d():
    return fem.ProblemDef(
        1, 5.0, fem.oscillatory_coefficient_1d(), fem.PLaplace(2.0),
        lambda pts: np.where(pts[:, 0] < 0.5, 4.0, 0.0),
    )


@pytest.fixture(scope="session")
def pme_problem_2d():
    return fem.ProblemDef(
        2, 1.0, fem.oscillatory_coefficient_2d(), fem.PorousMedia(4.0),
        lambda pts: np.maximum(1.2 * (pts[:, 0] + pts[:, 1] - 1.0), 0.0),
    )


@pytest.fixture(scope="session")
def analytic_problem_1d():
    # a = 0, K = 1: the potential u^p is linear in x, so fluxes are known
    # in closed form and exact under Kirchhoff interpolation.
    return fem.ProblemDef(
        1, 0.0, fem.Coefficient.constant(1.0), fem.PorousMedia(4.0), zero_bc
    )


@pytest.fixture(scope="session")
def analytic_mesh_1d():
    partition = build_partition(1, 1)
    mesh = build_fine_mesh(partition, 50)
    return partition, mesh, build_coarse_basis(partition, mesh)


@pytest.fixture(scope="session")
def local_cfg():
    return LocalSolverConfig()
