import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import stats as sps

from exitlab import simulate as sim
from exitlab.model import BoundaryData, load_problem
from exitlab.pde import Grid, discretize, principal_eigen

from .conftest import one_d


def test_noiseless_decay_is_censored():
    p = one_d(["-x1"])
    s = sim.simulate_path(p.model, p.domain, 0.0, [0.5], 1, 1e-3, 5.0, seed=1)
    assert s.exit.kind == "censored"
    assert abs(s.states[-1, 0] - 0.5 * math.exp(-5)) < 1e-3


def test_unit_transport_exits_at_one():
    p = one_d(["1"])
    dt = 1e-3
    s = sim.simulate_path(p.model, p.domain, 0.0, [0.0], 1, dt, 5.0, seed=1)
    assert s.exit.exited and abs(s.exit.tau - 1) <= dt and s.exit.y[0] == 1.0
    st = sim.run_monte_carlo(p.model, p.domain, 0.0, [0.0], 1, dt, 5.0, 100, 3)
    assert st.exit_fraction == 1.0 and abs(st.mean_exit_time - 1) <= dt


def test_path_determinism(mstar_problem):
    p = mstar_problem
    a = sim.simulate_path(p.model, p.domain, 0.3, [0.0], 1, 1e-3, 3.0, seed=9)
    b = sim.simulate_path(p.model, p.domain, 0.3, [0.0], 1, 1e-3, 3.0, seed=9)
    assert a.to_csv() == b.to_csv()
    assert np.array_equal(a.occupation, b.occupation)
    c = sim.simulate_path(p.model, p.domain, 0.3, [0.0], 1, 1e-3, 3.0, seed=10)
    assert c.to_csv() != a.to_csv()


def test_trials_independent_of_workers(mstar_problem):
    p = mstar_problem
    a = sim.simulate_trials(p.model, p.domain, 0.3, [0.0], 1, 1e-3, 20.0, 400, 5, workers=1)
    b = sim.simulate_trials(p.model, p.domain, 0.3, [0.0], 1, 1e-3, 20.0, 400, 5, workers=3)
    for name in ("status", "tau", "y", "mode", "occupation"):
        assert np.array_equal(getattr(a, name), getattr(b, name), equal_nan=True)


def test_invalid_inputs(mstar_problem):
    p = mstar_problem
    with pytest.raises(ValueError):
        sim.simulate_path(p.model, p.domain, 0.3, [2.0], 1, 1e-3, 1.0, seed=0)
    with pytest.raises(ValueError):
        sim.simulate_path(p.model, p.domain, 0.3, [0.0], 3, 1e-3, 1.0, seed=0)
    with pytest.raises(ValueError):
        sim.simulate_path(p.model, p.domain, 0.3, [0.0], 1, 0.0, 1.0, seed=0)


def test_rate_bound_violation():
    p = one_d(["-x1", "-x1"], rates=[[None, "1 + 100*x1^2"], ["1", None]])
    with pytest.raises(sim.RateBoundError):
        sim.simulate_trials(p.model, p.domain, 0.5, [0.0], 1, 1e-3, 20.0, 50, 1, lam=1.5)


def test_all_censored_is_degenerate():
    p = one_d(["-x1"])
    st = sim.run_monte_carlo(p.model, p.domain, 0.0, [0.0], 1, 0.01, 1.0, 10, 0)
    assert st.degenerate and st.mean_exit_time is None and st.n_exited == 0


def test_identical_modes_match_single_mode():
    two = one_d(["-x1", "-x1"], rates=[[None, "1"], ["1", None]])
    one = one_d(["-x1"])
    kw = dict(eps=0.4, x0=[0.0], k0_mode=1, dt=2e-3, horizon=100.0, N=4000)
    a = sim.run_monte_carlo(two.model, two.domain, base_seed=1, **kw)
    b = sim.run_monte_carlo(one.model, one.domain, base_seed=2, **kw)
    se = math.hypot(a.mean_exit_time_se, b.mean_exit_time_se)
    assert abs(a.mean_exit_time - b.mean_exit_time) <= 3 * se


def test_rate_estimator_on_synthetic_survival():
    t = np.linspace(0, 3, 301)
    stats = SimpleNamespace(time_grid=t, survival=np.exp(-2 * t), n_trials=10**6)
    lam, se = sim.estimate_exit_rate(stats, (0.5, 2.5))
    assert abs(lam - 2) < 1e-6 and se < 1e-6
    flat = SimpleNamespace(time_grid=t, survival=np.ones_like(t), n_trials=10)
    assert sim.estimate_exit_rate(flat, (0.5, 2.5))[0] == 0.0


@pytest.mark.slow
def test_exit_rate_matches_discrete_eigenvalue():
    p = one_d(["-x1"])
    eps = 0.2
    # fit over the early quasi-stationary decay to keep the run short
    st = sim.run_monte_carlo(p.model, p.domain, eps, [0.0], 1, 1e-3, 25.0, 20000, 11)
    win = sim.default_rate_window(st, upper=0.9)
    lam_mc, _ = sim.estimate_exit_rate(st, win)
    op = discretize(p.model, p.domain, Grid.build(p.domain, 1 / 256), eps)
    lam_fd = principal_eigen(op).lam
    assert abs(lam_mc - lam_fd) / lam_fd <= 0.15


def test_tiny_rates_follow_single_mode_flow():
    p = one_d(["-x1 + 0.5", "-x1 - 0.5"], rates=[[None, "1e-9"], ["1e-9", None]])
    s = sim.simulate_path(p.model, p.domain, 0.0, [0.0], 1, 1e-3, 2.0, seed=3)
    assert np.all(s.modes == 1)
    # Euler recursion x <- x + dt (0.5 - x) from 0
    assert abs(s.states[-1, 0] - 0.5 * (1 - (1 - 1e-3) ** 2000)) < 1e-12


def test_pdmp_holding_times_are_exponential():
    p = one_d(["0", "0"], rates=[[None, "1.5"], ["1.5", None]], lo=-1e6, hi=1e6)
    s = sim.pdmp_simulate(p.model, p.domain, [0.0], 1, 0.01, 7000.0, seed=4, max_jumps=20000)
    gaps = np.diff(np.concatenate([[0.0], s.jump_times]))[:10**4]
    assert len(gaps) == 10**4
    assert sps.kstest(gaps, "expon", args=(0, 1 / 1.5)).pvalue > 0.01
    again = sim.pdmp_simulate(p.model, p.domain, [0.0], 1, 0.01, 7000.0, seed=4, max_jumps=20000)
    assert np.array_equal(s.jump_times, again.jump_times)


def test_occupation_fractions_approach_stationary():
    p = one_d(["0", "0"], rates=[[None, "1"], ["2", None]], lo=-1e6, hi=1e6, sigma="0")
    N, T = 400, 50.0
    b = sim.simulate_trials(p.model, p.domain, 1.0, [0.0], 1, 0.01, T, N, 8)
    frac = b.occupation / b.occupation.sum(axis=1, keepdims=True)
    m = frac.mean(axis=0)
    assert np.all(np.abs(m - [2 / 3, 1 / 3]) <= 3 / math.sqrt(N))


def test_representation_constant_boundary():
    p = one_d(["-x1", "x1"], rates=[[None, "1"], ["1", None]])
    est = sim.stochastic_representation_estimate(p.model, p.domain, 0.5, [[0.0]],
                                                 BoundaryData.constant([3.0, 3.0], 1), 200, 1, 1e-3, 50.0)
    assert np.all(est.mean == 3.0) and np.all(est.se == 0.0)


def test_representation_driftless_harmonic():
    p = one_d(["0"], g=["(x1 + 1)/2"])
    est = sim.stochastic_representation_estimate(p.model, p.domain, 1.0, [[0.0]], p.boundary,
                                                 4000, 2, 1e-3, 50.0)
    assert abs(est.mean[0, 0] - 0.5) <= 3 * est.se[0, 0]
    assert not est.horizon_too_short


def test_representation_flags_short_horizon():
    p = one_d(["-x1"], g=["x1"])
    est = sim.stochastic_representation_estimate(p.model, p.domain, 0.01, [[0.0]], p.boundary,
                                                 20, 2, 1e-2, 1.0)
    assert est.horizon_too_short


def test_statistics_outputs(mstar_problem):
    p = mstar_problem
    st = sim.run_monte_carlo(p.model, p.domain, 0.3, [0.0], 1, 1e-3, 50.0, 500, 2, delta=0.1,
                             y0_hint=np.array([1.0]))
    assert abs(st.histogram.sum() - st.exit_fraction) < 1e-12
    assert abs(st.mode_frequencies.sum() - 1) < 1e-12
    assert st.survival[0] == 1.0 and np.all(np.diff(st.survival) <= 0)
    assert st.survival_csv().startswith("t,survival\n")
    inf = sim.run_monte_carlo(p.model, p.domain, 0.3, [0.0], 1, 1e-3, 50.0, 500, 2,
                              y0_hint=np.array([1.0]))
    assert inf.concentration == inf.exit_fraction


def _mean_exit_time(p, x0, dt, bridge, N=4000):
    b = sim.simulate_trials(p.model, p.domain, 1.0, x0, 1, dt, 50.0, N, 5, bridge=bridge)
    assert b.exited.all()
    return b.tau.mean(), b.tau.std(ddof=1) / np.sqrt(N)


def test_bridge_removes_exit_time_bias_interval():
    # Brownian motion on (-1, 1) with eps = 1: E tau from 0 is (1 - x^2) / eps = 1
    p = one_d(["0"])
    plain, se = _mean_exit_time(p, [0.0], 0.02, False)
    corrected, se_b = _mean_exit_time(p, [0.0], 0.02, True)
    assert plain - 1.0 > 5 * se
    assert abs(corrected - 1.0) < 4 * se_b


def test_bridge_removes_exit_time_bias_disk():
    # unit disk, eps = 1: E tau from the center is (1 - |x|^2) / d = 0.5
    cfg = {"model": {"d": 2, "n": 1, "modes": [{"drift": ["0", "0"],
                                                 "sigma": {"kind": "constant", "entries": "1"}}]},
           "domain": {"kind": "ball", "params": {"center": [0, 0], "radius": 1}}}
    p = load_problem(cfg)
    plain, se = _mean_exit_time(p, [0.0, 0.0], 0.01, False)
    corrected, se_b = _mean_exit_time(p, [0.0, 0.0], 0.01, True)
    assert plain - 0.5 > 5 * se
    assert abs(corrected - 0.5) < 4 * se_b


def test_bridge_exit_points_on_boundary():
    p = one_d(["0"])
    b = sim.simulate_trials(p.model, p.domain, 1.0, [0.5], 1, 0.05, 50.0, 500, 3, bridge=True)
    assert np.allclose(np.abs(b.y[b.exited]), 1.0)
