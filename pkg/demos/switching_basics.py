"""Build the two-mode reference model, look at its averaged dynamics and simulate one path.

Run with ``python demos/switching_basics.py``.
"""
from importlib.resources import files

import numpy as np

from exitlab import load_problem
from exitlab import simulate as sim
from exitlab import switching as sw

problem = load_problem(files("exitlab") / "configs" / "mstar.json")
model, domain = problem.model, problem.domain

x = np.array([0.0])
G = sw.generator_matrix(model, x)
omega = sw.stationary_distribution(G)
print("generator at x=0:\n", G)
print("stationary distribution:", omega)
print("averaged drift at x=0:", sw.averaged_field(model, x))

x0 = sw.find_equilibrium(model, domain.center)
print("equilibrium of the averaged flow:", x0)

for eps in (0.5, 0.1):
    path = sim.simulate_path(model, domain, eps, x0, 1, dt=1e-3, horizon=50.0, seed=1)
    ev = path.exit
    print(f"eps={eps}: {ev.kind} at t={ev.tau:.3f}, y={ev.y}, mode {ev.mode}, "
          f"{len(path.jump_times)} jumps, occupation {np.round(path.occupation, 3)}")
