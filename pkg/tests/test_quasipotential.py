import numpy as np
import pytest

from exitlab import quasipotential as qpm
from exitlab.action import path_action_I

from .conftest import one_d

T_FAST = [2.0, 8.0, 32.0]


@pytest.fixture(scope="module")
def symmetric():
    return one_d(["-x1 + 0.5", "-x1 - 0.5"], rates=[[None, "1"], ["1", None]])


def test_gradient_case_value():
    m = one_d(["-x1"]).model
    best = min(qpm.minimize_action_path(m, [0.0], [1.0], T, 100).value for T in (4.0, 16.0, 32.0))
    assert abs(best - 1.0) < 5e-2


def test_flow_reachable_endpoint_has_zero_action():
    m = one_d(["1 - x1"]).model
    # from 0.2 the flow of 1 - x reaches 0.8 at T = log(4)
    r = qpm.minimize_action_path(m, [0.2], [0.8], float(np.log(4.0)), 60)
    assert r.value < 1e-4


def test_refinement_relaxes():
    m = one_d(["-x1"]).model
    a = qpm.minimize_action_path(m, [0.0], [1.0], 8.0, 50).value
    b = qpm.minimize_action_path(m, [0.0], [1.0], 8.0, 100).value
    assert b <= a + 1e-3


def test_returned_path_action_matches_value(mstar_problem):
    r = qpm.minimize_action_path(mstar_problem.model, [1 / 15], [1.0], 8.0, 60)
    assert abs(path_action_I(mstar_problem.model, r.path) - r.value) < 1e-12
    assert np.array_equal(r.path.nodes[[0, -1], 0], [1 / 15, 1.0])


def test_bad_arguments():
    m = one_d(["-x1"]).model
    with pytest.raises(ValueError):
        qpm.minimize_action_path(m, [0.0], [1.0], 1.0, 4)
    with pytest.raises(ValueError):
        qpm.minimize_action_path(m, [0.0], [1.0], 0.0, 40)


def test_single_mode_boundary_values():
    p = one_d(["-x1"])
    r = qpm.quasipotential_boundary(p.model, p.domain, [0.0], T_grid=T_FAST, N=80)
    assert np.allclose(r.values, 1.0, atol=5e-2)


def test_diffusion_rescaling():
    p = one_d(["-x1"], sigma="2")
    r = qpm.quasipotential_boundary(p.model, p.domain, [0.0], T_grid=T_FAST, N=80)
    assert np.allclose(r.values, 0.25, rtol=5e-2)


def test_not_an_equilibrium():
    p = one_d(["-x1"])
    with pytest.raises(qpm.QuasipotentialError, match="not an equilibrium"):
        qpm.quasipotential_boundary(p.model, p.domain, [0.3], T_grid=T_FAST)


def test_symmetric_model_is_degenerate(symmetric):
    p = symmetric
    r = qpm.quasipotential_boundary(p.model, p.domain, [0.0], T_grid=T_FAST, N=60)
    assert abs(r.values[0] - r.values[1]) < 1e-3
    rep = qpm.verify_as1(p.model, p.domain, [0.0], qp=r)
    assert rep["verdict"] == "degenerate"


def test_acceptance_model_prefers_right_endpoint(mstar_problem):
    p = mstar_problem
    r = qpm.quasipotential_boundary(p.model, p.domain, [1 / 15], T_grid=T_FAST, N=60)
    assert r.y0[0] == 1.0 and r.values[1] < r.values[0]
    assert qpm.verify_as1(p.model, p.domain, [1 / 15], qp=r)["verdict"] == "holds"
    assert r.to_csv().splitlines()[0] == "y1,V"


def test_inward_field_checks():
    p = one_d(["-x1"])
    rep = qpm.verify_as1(p.model, p.domain, [0.0])
    assert rep["inward_field"]["holds"] and rep["inward_field"]["worst_margin"] == -1.0
    bad = one_d(["x1"])
    rep = qpm.verify_as1(bad.model, bad.domain, [0.0])
    assert rep["verdict"] == "fails" and rep["inward_field"]["worst_margin"] == 1.0


def test_exit_mode_prediction():
    p = one_d(["-x1 + 1", "-x1 - 1"], rates=[[None, "1"], ["1", None]])
    pred = qpm.verify_as2(p.model, [1.0], p.domain)
    assert pred.k0 == 1 and np.allclose(pred.outward, [0.0, -2.0]) and pred.margins == {2: 2.0}
    assert pred.verdict == "holds"
    same = one_d(["-x1", "-x1"], rates=[[None, "1"], ["1", None]])
    assert qpm.verify_as2(same.model, [1.0], same.domain).verdict == "fails"
    single = one_d(["-x1"])
    pred = qpm.verify_as2(single.model, [-1.0], single.domain)
    assert pred.k0 == 1 and pred.verdict == "holds"
