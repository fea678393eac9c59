"""Solve the coupled Dirichlet problem and check it against its stochastic representation.

Run with ``python demos/pde_and_monte_carlo.py``.
"""
from importlib.resources import files

import numpy as np

from exitlab import load_problem
from exitlab import pde
from exitlab import simulate as sim

problem = load_problem(files("exitlab") / "configs" / "mstar.json")
model, domain, boundary = problem.model, problem.domain, problem.boundary
eps = 0.3
grid = pde.Grid.build(domain, 1 / 256)
sol = pde.solve_dirichlet(pde.discretize(model, domain, grid, eps), boundary)
print("solve summary:", sol.summary())

points = np.array([[-0.5], [0.0], [0.5]])
# bridge=True also catches exits between two inside Euler points, removing the sqrt(dt) bias
est = sim.stochastic_representation_estimate(model, domain, eps, points, boundary, 4000, 5, 1e-3, 200.0,
                                             bridge=True)
for x, fd, mc, se in zip(points[:, 0], sol.at(points), est.mean, est.se):
    print(f"x={x:+.1f}  PDE {np.round(fd, 4)}  MC {np.round(mc, 4)} +- {np.round(se, 4)}")

eig = pde.principal_eigen(pde.discretize(model, domain, grid, eps))
tau = pde.mean_exit_time(model, domain, grid, eps)
print(f"principal eigenvalue {eig.lam:.5f}; mean exit time from 0 in mode 1: {tau.at([[0.0]])[0, 0]:.3f}")
