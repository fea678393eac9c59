"""Predict where and in which mode the process leaves the domain, then compare with Monte Carlo.

Run with ``python demos/exit_prediction.py`` (about a minute).
"""
from importlib.resources import files

import numpy as np

from exitlab import load_problem
from exitlab import quasipotential as qpm
from exitlab import simulate as sim
from exitlab import switching as sw

problem = load_problem(files("exitlab") / "configs" / "mstar.json")
model, domain = problem.model, problem.domain
x0 = sw.find_equilibrium(model, domain.center)

qp = qpm.quasipotential_boundary(model, domain, x0, domain.boundary_mesh(), T_grid=[2.0, 8.0, 32.0], N=60)
for y, v in zip(qp.mesh[:, 0], qp.values):
    print(f"V({y:+.0f}) = {v:.4f}")
print("predicted exit point:", qp.y0, "separation margin:", round(qp.margin, 4))

as1 = qpm.verify_as1(model, domain, x0, qp.mesh, qp)
as2 = qpm.verify_as2(model, qp.y0, domain)
print("first assumption:", as1["verdict"], "| predicted exit mode:", as2.k0, "margins:", as2.margins)

# inverse_eps rates: switching speeds up as the noise shrinks
for eps in (0.5, 0.2):
    st = sim.run_monte_carlo(model, domain, eps, x0, 1, 5e-3, 500.0, 4000, 3, delta=0.1, y0_hint=qp.y0)
    print(f"eps={eps}: P(|X(tau)-y0|<=0.1)={st.concentration:.3f}, "
          f"exit mode frequencies={np.round(st.mode_frequencies, 3)}")
