"""Choose a feedback drift from {-1, +1} that keeps a diffusion inside (-1, 1) as long as possible.

Run with ``python demos/policy_iteration.py``.
"""
from importlib.resources import files

import numpy as np

from exitlab import load_problem
from exitlab import pde

problem = load_problem(files("exitlab") / "configs" / "policy.json")
model, domain = problem.model, problem.domain
grid = pde.Grid.build(domain, problem.experiment.grid_h)
eps = problem.experiment.eps

policy, trace, info = pde.policy_iteration_eigen(model, domain, grid, eps)
print("eigenvalue trace:", [f"{v:.3e}" for v in trace])
for i, u in enumerate(model.controls.values[0]):
    print(f"constant control u={u:+}: lambda = {pde.constant_policy_eigen(model, domain, grid, eps, 1, i).lam:.4f}")
switch = policy.points[np.nonzero(np.diff(policy.controls))[0], 0]
print("feedback switches sign near x =", np.round(switch, 4), "| converged:", info["converged"])
