import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exitlab import action as ac
from exitlab import switching as sw

from .conftest import one_d


def random_metzler(rng, n):
    H = rng.uniform(0.01, 3.0, size=(n, n))
    H[np.diag_indices(n)] = rng.uniform(-5.0, 2.0, size=n)
    return H


def test_hamiltonian_examples(mstar_problem):
    m = mstar_problem.model
    x = np.array([0.3])
    assert np.array_equal(ac.hamiltonian(m, x, [0.0]), sw.generator_matrix(m, x))
    single = one_d(["-x1"]).model
    assert ac.hamiltonian(single, x, [2.0], [0.5])[0, 0] == pytest.approx(0.5 * 4 - 2 * 0.3 + 0.5)
    flat = one_d(["0", "0"], rates=[[None, "1"], ["2", None]]).model
    assert np.allclose(ac.hamiltonian(flat, x, [1.0]), [[0.5 - 1, 1], [2, 0.5 - 2]], atol=1e-15)


def test_perron_generator_and_scalar():
    e = ac.principal_eigen(np.array([[-1.0, 1.0], [2.0, -2.0]]))
    assert abs(e.lam) < 1e-10 and np.allclose(e.r, 1.0)
    assert ac.principal_eigen(np.array([[-3.25]])).lam == -3.25


def test_perron_against_dense_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        H = random_metzler(rng, 3)
        e = ac.principal_eigen(H)
        ref = np.max(np.linalg.eigvals(H).real)
        assert abs(e.lam - ref) < 1e-9
        assert np.all(e.r > 0) and np.all(e.l > 0)
        assert abs(e.l @ e.r - 1) < 1e-10 and abs(e.r.sum() - 3) < 1e-10
        assert np.allclose(H @ e.r, e.lam * e.r, atol=1e-8)


def test_perron_power_iteration_path():
    # n > 8 uses the shifted power iteration only
    rng = np.random.default_rng(4)
    H = random_metzler(rng, 12)
    e = ac.principal_eigen(H)
    assert abs(e.lam - np.max(np.linalg.eigvals(H).real)) < 1e-9


def test_gradients_at_origin(mstar_problem):
    m = mstar_problem.model
    x = np.linspace(-1, 1, 11)[:, None]
    lam, gp, ga = ac.eigen_and_grad(m, x, np.zeros_like(x))
    assert np.max(np.abs(lam)) < 1e-10
    assert np.allclose(gp, sw.averaged_field(m, x), atol=1e-10)
    w = sw.stationary_distribution(sw.generator_matrix(m, x))
    assert np.allclose(ga, w, atol=1e-10)


def test_gradients_match_finite_differences(mstar_problem):
    m = mstar_problem.model
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, (100, 1))
    p = rng.uniform(-2, 2, (100, 1))
    al = rng.uniform(-1, 1, (100, 2))
    lam, gp, ga = ac.eigen_and_grad(m, x, p, al)
    h = 1e-6
    fd_p = (ac.eigen_and_grad(m, x, p + h, al)[0] - ac.eigen_and_grad(m, x, p - h, al)[0]) / (2 * h)
    assert np.max(np.abs(fd_p - gp[:, 0])) < 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (ac.eigen_and_grad(m, x, p, al + e)[0] - ac.eigen_and_grad(m, x, p, al - e)[0]) / (2 * h)
        assert np.max(np.abs(fd - ga[:, k])) < 1e-6


def test_gradients_three_modes():
    m = one_d(["-x1", "1 - x1", "x1^2"], rates=[[None, "1", "2"], ["0.5", None, "1 + x1^2"], ["3", "1", None]]).model
    rng = np.random.default_rng(6)
    x, p, al = rng.uniform(-1, 1, (20, 1)), rng.uniform(-1, 1, (20, 1)), rng.uniform(-1, 1, (20, 3))
    lam, gp, ga = ac.eigen_and_grad(m, x, p, al)
    h = 1e-6
    fd = (ac.eigen_and_grad(m, x, p + h, al)[0] - ac.eigen_and_grad(m, x, p - h, al)[0]) / (2 * h)
    assert np.max(np.abs(fd - gp[:, 0])) < 1e-6
    assert np.allclose(ga.sum(axis=1), 1.0)


def test_shift_property(mstar_problem):
    m = mstar_problem.model
    x, p, al = np.array([0.2]), np.array([0.7]), np.array([0.1, -0.4])
    lam, _, ga = ac.eigen_and_grad(m, x, p, al)
    lam2, _, ga2 = ac.eigen_and_grad(m, x, p, al + 3.7)
    assert abs(lam2 - lam - 3.7) < 1e-10 and np.allclose(ga, ga2, atol=1e-10)


def test_eta_zero_on_averaged_velocity(mstar_problem):
    m = mstar_problem.model
    x = np.linspace(-0.9, 0.9, 7)[:, None]
    w = sw.stationary_distribution(sw.generator_matrix(m, x))
    eta = ac.legendre_eta(m, x, sw.averaged_field(m, x), w)
    assert np.max(eta) < 1e-10


def test_eta_off_simplex_is_infinite(mstar_problem):
    m = mstar_problem.model
    assert ac.legendre_eta(m, np.array([0.0]), np.array([0.3]), np.array([0.5, 0.6])) == math.inf
    assert ac.legendre_eta(m, np.array([0.0]), np.array([0.3]), np.array([1.2, -0.2])) == math.inf


def test_single_mode_transforms_closed_form():
    m = one_d(["-x1"]).model
    x = np.linspace(-1, 1, 9)[:, None]
    q = np.linspace(-3, 3, 9)[:, None]
    X, Q = np.meshgrid(x[:, 0], q[:, 0], indexing="ij")
    exact = (Q + X) ** 2 / 2
    rho = ac.legendre_rho(m, X[..., None], Q[..., None])
    assert np.max(np.abs(rho - exact)) < 1e-10
    eta = ac.legendre_eta(m, X[..., None], Q[..., None], np.ones(X.shape + (1,)))
    assert np.max(np.abs(eta - exact)) < 1e-10


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.floats(-3, 3))
def test_rho_is_nonnegative(mstar_problem, x, q):
    assert ac.legendre_rho(mstar_problem.model, np.array([x]), np.array([q])) >= 0.0


def test_rho_zero_on_averaged_field(mstar_problem):
    m = mstar_problem.model
    x = np.linspace(-1, 1, 9)[:, None]
    assert np.max(ac.legendre_rho(m, x, sw.averaged_field(m, x))) < 1e-12


def test_averaged_path_has_zero_action(mstar_problem):
    m = mstar_problem.model
    path = ac.averaged_path(m, [0.8], 5.0, 200)
    assert path.check_occupation() == []
    assert ac.path_action_S(m, path) <= 1e-4
    assert ac.path_action_I(m, path) <= 1e-4


def test_bad_occupation_gives_infinite_S(mstar_problem):
    m = mstar_problem.model
    path = ac.averaged_path(m, [0.8], 1.0, 10)
    path.occupation[5:, 0] += 0.05
    assert ac.path_action_S(m, path) == math.inf
    assert "sum of occupations differs from elapsed time" in path.check_occupation()


def test_straight_path_single_mode():
    m = one_d(["-x1"]).model
    N = 400
    t = np.linspace(0, 1, N + 1)
    assert abs(ac.path_action_I(m, ac.DiscretizedPath(t, t)) - 7 / 6) < 1e-5


def test_refinement_first_order():
    m = one_d(["-x1"]).model
    vals = []
    for N in (20, 40, 80):
        t = np.linspace(0, 1, N + 1)
        vals.append(ac.path_action_I(m, ac.DiscretizedPath(t, np.sin(2 * t))))
    assert abs(vals[2] - vals[1]) <= abs(vals[1] - vals[0]) + 1e-12
    assert abs(vals[1] - vals[0]) < 1.0 / 20


def test_time_dependent_rates_degenerate_to_constant(mstar_problem):
    m = mstar_problem.model
    clock = ac.RatesClock.from_rates([[None, "1"], ["2", None]])
    path = ac.averaged_path(m, [0.5], 2.0, 40)
    path.nodes = path.nodes + 0.1 * np.sin(path.times)[:, None]
    assert abs(ac.path_action_S(m, path, clock) - ac.path_action_S(m, path)) < 1e-12
    assert abs(ac.path_action_I(m, path, clock) - ac.path_action_I(m, path)) < 1e-12


def test_time_dependent_rates_change_hamiltonian(mstar_problem):
    m = mstar_problem.model
    clock = ac.RatesClock.from_rates([[None, "1 + t"], ["2", None]])
    H = ac.hamiltonian(m, np.array([0.0]), np.array([0.0]), clock=clock, t=1.0)
    assert np.allclose(H, [[-2, 2], [2, -2]])


def test_path_csv_round_trip(mstar_problem):
    path = ac.averaged_path(mstar_problem.model, [0.5], 1.0, 10)
    back = ac.DiscretizedPath.from_csv("# provenance\n" + path.to_csv())
    assert np.array_equal(back.nodes, path.nodes) and np.array_equal(back.occupation, path.occupation)


def test_simplex_grid():
    g = ac.simplex_grid(3, 0.25)
    assert len(g) == 15 and np.allclose(g.sum(axis=1), 1.0)
    assert len(ac.simplex_grid(2, 0.02)) == 51


def test_consistency_single_mode_exact():
    m = one_d(["-x1"]).model
    r = ac.eta_rho_consistency(m, np.array([0.3]), np.array([1.0]))
    assert r["gap"] == pytest.approx(0.0, abs=1e-12) and r["grid_size"] == 1


def test_consistency_zero_case(mstar_problem):
    m = mstar_problem.model
    x = np.array([0.4])
    r = ac.eta_rho_consistency(m, x, sw.averaged_field(m, x), step=1 / 30)
    assert r["rho"] < 1e-12 and r["min_eta"] < 1e-10
