import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exitlab import load_problem
from exitlab.model import BoundaryData
from exitlab.pde import (Grid, StencilError, constant_policy_eigen, discretize, epsilon_limit_study, mean_exit_time,
                         policy_iteration_eigen, principal_eigen, solve_dirichlet)

from .conftest import CONFIGS, one_d


def test_central_laplacian_row():
    p = one_d(["0"])
    g = Grid.build(p.domain, 1 / 16)
    row = discretize(p.model, p.domain, g, 1.0).matrix[7].toarray().ravel()
    assert np.allclose(row[[6, 7, 8]] * g.h ** 2, [0.5, -1.0, 0.5], atol=1e-12)


def test_transport_upwind_row():
    p = one_d(["1"])
    g = Grid.build(p.domain, 1 / 16)
    row = discretize(p.model, p.domain, g, 0.0).matrix[7].toarray().ravel()
    nz = np.nonzero(row)[0]
    assert nz.tolist() == [7, 8] and np.allclose(row[nz] * g.h, [-1.0, 1.0])


def test_coupling_blocks():
    p = one_d(["-x1", "x1"], rates=[[None, "1 + x1^2"], ["2", None]])
    g = Grid.build(p.domain, 1 / 16)
    A = discretize(p.model, p.domain, g, 0.5).matrix
    M = g.size
    assert np.allclose(A[:M, M:].toarray(), np.diag(1 + g.points[:, 0] ** 2))
    assert np.allclose(A[M:, :M].toarray(), 2 * np.eye(M))


def test_monotone_structure(mstar_problem):
    p = mstar_problem
    g = Grid.build(p.domain, 1 / 64)
    A = discretize(p.model, p.domain, g, 0.1).matrix.toarray()
    off = A - np.diag(np.diag(A))
    assert off.min() >= 0 and np.all(np.diag(A) < 0)
    assert np.all(A.sum(axis=1) <= 1e-9)


def test_coarse_grid_rejected():
    p = one_d(["0"])
    with pytest.raises(StencilError):
        Grid.build(p.domain, 0.5)


def test_discrete_harmonic_is_linear():
    p = one_d(["0"], g=["(x1 + 1)/2"])
    g = Grid.build(p.domain, 1 / 256)
    sol = solve_dirichlet(discretize(p.model, p.domain, g, 0.7), p.boundary)
    assert np.max(np.abs(sol.values[:, 0] - (g.points[:, 0] + 1) / 2)) < 1e-8
    assert sol.max_principle_ok


def test_constant_boundary_data(mstar_problem):
    p = mstar_problem
    g = Grid.build(p.domain, 1 / 128)
    sol = solve_dirichlet(discretize(p.model, p.domain, g, 0.3), BoundaryData.constant([2.5, 2.5], 1))
    assert np.max(np.abs(sol.values - 2.5)) < 1e-10


@settings(max_examples=10, deadline=None)
@given(st.floats(0.05, 1.0))
def test_maximum_principle_on_acceptance_model(eps):
    p = load_problem(CONFIGS / "mstar.json")
    g = Grid.build(p.domain, 1 / 128)
    sol = solve_dirichlet(discretize(p.model, p.domain, g, eps), p.boundary)
    assert sol.max_principle_ok and sol.max_principle_violation <= 1e-9


def test_interpolation_hits_boundary_values():
    p = one_d(["0"], g=["(x1 + 1)/2"])
    g = Grid.build(p.domain, 1 / 32)
    sol = solve_dirichlet(discretize(p.model, p.domain, g, 1.0), p.boundary)
    vals = sol.at(np.array([[-1.0], [0.0], [1.0], [0.37]]))[:, 0]
    assert np.allclose(vals, [0.0, 0.5, 1.0, 0.685], atol=1e-12)


def test_mean_exit_time_driftless():
    # (eps/2) T'' = -1 with T(+-1) = 0 gives T = (1 - x^2)/eps
    p = one_d(["0"])
    sol = mean_exit_time(p.model, p.domain, Grid.build(p.domain, 1 / 64), 0.5)
    x = sol.op.grid.points[:, 0]
    assert np.max(np.abs(sol.values[:, 0] - (1 - x ** 2) / 0.5)) < 1e-10


def test_eigenvalue_driftless():
    p = one_d(["0"], lo=0.0, hi=1.0)
    g = Grid.build(p.domain, 1 / 256)
    lam = principal_eigen(discretize(p.model, p.domain, g, 0.3)).lam
    assert abs(lam - 0.3 * np.pi ** 2 / 2) / (0.3 * np.pi ** 2 / 2) < 0.02
    lam2 = principal_eigen(discretize(p.model, p.domain, g, 0.6)).lam
    assert abs(lam2 / lam - 2) < 1e-10


def test_eigenvalue_positive_and_eigenvector_positive(mstar_problem):
    p = mstar_problem
    e = principal_eigen(discretize(p.model, p.domain, Grid.build(p.domain, 1 / 128), 0.3))
    assert e.lam > 0 and np.all(e.psi > 0) and e.residual < 1e-8


def test_nested_domains_are_monotone():
    lams = []
    for L in (0.5, 1.0, 2.0):
        p = one_d(["-x1"], lo=-L, hi=L)
        lams.append(principal_eigen(discretize(p.model, p.domain, Grid.build(p.domain, L / 128), 0.3)).lam)
    assert lams[0] > lams[1] > lams[2]


def test_refinement_order():
    p = one_d(["-x1 + 0.6"], g=["1 + x1"])
    vals = []
    for h in (1 / 32, 1 / 64, 1 / 128, 1 / 256):
        sol = solve_dirichlet(discretize(p.model, p.domain, Grid.build(p.domain, h), 0.2), p.boundary)
        vals.append(sol.at(np.array([[0.0], [0.5]]))[:, 0])
    d1 = np.abs(vals[1] - vals[0]).max()
    d2 = np.abs(vals[2] - vals[1]).max()
    d3 = np.abs(vals[3] - vals[2]).max()
    assert np.log2(d1 / d2) >= 0.8 and np.log2(d2 / d3) >= 0.8


def test_policy_iteration_beats_constant_policies():
    p = load_problem(CONFIGS / "policy.json")
    g = Grid.build(p.domain, 1 / 128)
    policy, trace, info = policy_iteration_eigen(p.model, p.domain, g, 0.2)
    consts = [constant_policy_eigen(p.model, p.domain, g, 0.2, 1, i).lam for i in (0, 1)]
    assert trace[-1] <= min(consts) + 1e-12
    assert info["monotone"] and info["converged"]
    x = policy.points[:, 0]
    # pointing inward keeps the process away from the boundary
    assert np.all(policy.controls[x < -0.05] == 1.0) and np.all(policy.controls[x > 0.05] == -1.0)


def test_singleton_control_set():
    p = one_d(["0"], controls={"modes": [{"values": [0.5], "drift": ["u"]}]})
    g = Grid.build(p.domain, 1 / 64)
    policy, trace, info = policy_iteration_eigen(p.model, p.domain, g, 0.2)
    assert len(trace) == 1 and np.all(policy.controls == 0.5)


def test_limit_study_constant_data():
    p = one_d(["-x1", "x1"], rates=[[None, "1"], ["1", None]], g=["3", "3"])
    study = epsilon_limit_study(p.model, p.domain, p.boundary, [0.5, 0.2], [[0.0]], [1.0], 1, h=1 / 64)
    assert np.max(study.distance) < 1e-10 and study.trend()["non_increasing"]


def test_limit_study_symmetric_degenerate():
    p = one_d(["0"], g=["(x1 + 1)/2"])
    study = epsilon_limit_study(p.model, p.domain, p.boundary, [0.5, 0.2, 0.1], [[0.0]], [1.0], 1, h=1 / 64)
    assert np.allclose(study.psi[:, 0, 0], 0.5, atol=1e-10)
    assert np.allclose(study.distance, 0.5, atol=1e-10)
