"""
Quasipotential on the boundary by direct minimization of the discrete action.

For each boundary point ``y`` and each transit time ``T`` on a fixed grid the
interior nodes of an ``N``-node path from ``x0`` to ``y`` are optimized by
L-BFGS on the discrete ``I_0T``.  ``V(y)`` is the smallest value over the
grid of times.  The minimizer over the boundary mesh is the predicted exit
point; the mode with the largest outward drift there is the predicted exit
mode.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .action import DiscretizedPath, legendre_rho, path_action_I
from .domain import DomainGeometry
from .model import SwitchingModel
from .switching import FlowDivergence, averaged_field, flow

__all__ = [
    "QuasipotentialError", "PathResult", "QuasipotentialResult", "ExitModePrediction",
    "minimize_action_path", "quasipotential_boundary", "verify_as1", "verify_as2",
]


class QuasipotentialError(ValueError):
    pass


@dataclass
class PathResult:
    path: DiscretizedPath
    value: float
    converged: bool
    start: str  # which initial guess produced the best value
    values_by_start: dict = field(default_factory=dict)


def _straight(x0, y, N):
    s = np.linspace(0.0, 1.0, N)[:, None]
    return (1 - s) * x0 + s * y


def _reversed_flow(model, x0, y, T, N):
    """Time reversal of the averaged flow started at ``y``, shifted to start at ``x0``."""
    try:
        fl = flow(lambda z: averaged_field(model, z), y, T, T / (4 * (N - 1)))
    except FlowDivergence:
        return None
    nodes = fl.states[::4][::-1].copy()
    if len(nodes) != N:
        return None
    s = np.linspace(0.0, 1.0, N)[:, None]
    nodes += (1 - s) * (x0 - nodes[0])
    nodes[-1] = y
    return nodes


def _local_fd_gradient(model, nodes, times, h, clock=None):
    """Central-difference gradient of the discrete action over interior node coordinates.

    Only the two segments adjacent to a node depend on it, so every
    perturbation needs two segment evaluations; all are done in one batch.
    """
    Nn, d = nodes.shape
    dt = np.diff(times)
    interior = np.arange(1, Nn - 1)
    mids, vels, dts = [], [], []
    for sign in (1.0, -1.0):
        for j in range(d):
            left = nodes[interior - 1]
            right = nodes[interior + 1]
            here = nodes[interior].copy()
            here[:, j] += sign * h
            # segment (i-1, i) and segment (i, i+1)
            mids.append(0.5 * (left + here))
            vels.append((here - left) / dt[interior - 1][:, None])
            dts.append(dt[interior - 1])
            mids.append(0.5 * (here + right))
            vels.append((right - here) / dt[interior][:, None])
            dts.append(dt[interior])
    mid = np.concatenate(mids)
    vel = np.concatenate(vels)
    w = np.concatenate(dts)
    seg = legendre_rho(model, mid, vel) * w
    m = len(interior)
    seg = seg.reshape(2, d, 2, m)  # sign, coordinate, which segment, node
    cost = seg.sum(axis=2)
    grad = (cost[0] - cost[1]) / (2 * h)  # (d, m)
    return grad.T


def minimize_action_path(model: SwitchingModel, x0, y, T: float, N: int = 100, init="both",
                         diam: float = 2.0, gtol: float = 1e-7, maxiter: int = 2000) -> PathResult:
    """Locally minimal discrete ``I_0T`` over paths from ``x0`` to ``y`` in time ``T``.

    ``init`` is ``"straight"``, ``"flow"``, ``"both"`` (multistart, best kept)
    or an explicit ``(N, d)`` array of initial nodes.  Gradients are central
    differences with step ``1e-6 * diam``.
    """
    if N < 8:
        raise ValueError("N must be at least 8")
    if not T > 0:
        raise ValueError("T must be positive")
    x0 = np.asarray(x0, dtype=float).reshape(model.d)
    y = np.asarray(y, dtype=float).reshape(model.d)
    times = np.linspace(0.0, T, N)
    h = 1e-6 * diam
    starts = {}
    if isinstance(init, str):
        if init in ("straight", "both"):
            starts["straight"] = _straight(x0, y, N)
        if init in ("flow", "both"):
            rf = _reversed_flow(model, x0, y, T, N)
            if rf is not None:
                starts["flow"] = rf
        if not starts:
            raise ValueError(f"unknown init {init!r}")
    else:
        arr = np.asarray(init, dtype=float).reshape(N, model.d).copy()
        arr[0], arr[-1] = x0, y
        starts["given"] = arr

    best = None
    values = {}
    for name, nodes0 in starts.items():
        nodes = nodes0.copy()

        def fun(z):
            nodes[1:-1] = z.reshape(N - 2, model.d)
            val = path_action_I(model, DiscretizedPath(times, nodes))
            g = _local_fd_gradient(model, nodes, times, h)
            return val, g.ravel()

        z0 = nodes0[1:-1].ravel()
        v0, _ = fun(z0)
        if not math.isfinite(v0):
            values[name] = math.inf
            continue
        res = minimize(fun, z0, jac=True, method="L-BFGS-B",
                       options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-14, "maxcor": 20})
        nodes[1:-1] = res.x.reshape(N - 2, model.d)
        val = float(res.fun)
        values[name] = val
        conv = bool(res.success) or np.max(np.abs(res.jac)) < 1e-5
        if best is None or val < best.value:
            best = PathResult(DiscretizedPath(times, nodes.copy()), val, conv, name)
    if best is None:
        raise QuasipotentialError("action is infinite from every initial path")
    best.values_by_start = values
    if not best.converged:
        warnings.warn(f"action minimization stagnated at T={T:g}, y={y.tolist()}", RuntimeWarning)
    return best


@dataclass
class QuasipotentialResult:
    mesh: np.ndarray
    values: np.ndarray
    y0: np.ndarray
    index: int
    margin: float
    path: DiscretizedPath
    T_star: float
    table: np.ndarray  # (mesh, T_grid) values
    T_grid: np.ndarray
    x0: np.ndarray
    converged: bool = True
    tie: bool = False

    def to_dict(self) -> dict:
        return {"x0": self.x0.tolist(), "mesh": self.mesh.tolist(), "V": self.values.tolist(),
                "y0": self.y0.tolist(), "index": int(self.index), "separation_margin": float(self.margin),
                "T_star": float(self.T_star), "T_grid": self.T_grid.tolist(),
                "table": self.table.tolist(), "converged": bool(self.converged), "tie": bool(self.tie)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.mesh.shape[1]
        w.writerow([f"y{i + 1}" for i in range(d)] + ["V"])
        for p, v in zip(self.mesh, self.values):
            w.writerow([repr(float(c)) for c in p] + [repr(float(v))])
        return buf.getvalue()


def quasipotential_boundary(model: SwitchingModel, domain: DomainGeometry, x0, boundary_mesh=None,
                            T_grid=None, N: int = 100, start_set=None, tie_tol: float = 1e-9,
                            equilibrium_tol: float = 1e-6) -> QuasipotentialResult:
    """``V`` on the boundary mesh as the minimum over ``T_grid`` of optimized actions.

    With ``start_set`` (an array of points) the action is minimized over
    paths starting anywhere in that set and the equilibrium check is skipped.
    """
    x0 = np.asarray(x0, dtype=float).reshape(domain.d)
    if start_set is None:
        fav = averaged_field(model, x0)
        if np.linalg.norm(fav) >= equilibrium_tol:
            raise QuasipotentialError(
                f"x0={x0.tolist()} is not an equilibrium of the averaged flow (|f_av|={np.linalg.norm(fav):.3e})")
        starts = x0[None]
    else:
        starts = np.asarray(start_set, dtype=float).reshape(-1, domain.d)
    mesh = domain.boundary_mesh() if boundary_mesh is None else np.asarray(boundary_mesh, dtype=float)
    mesh = mesh.reshape(-1, domain.d)
    T_grid = np.geomspace(0.5, 32.0, 8) if T_grid is None else np.asarray(T_grid, dtype=float)
    table = np.full((len(mesh), len(T_grid)), np.inf)
    paths = {}
    converged = True
    for j, y in enumerate(mesh):
        for t, T in enumerate(T_grid):
            for s in starts:
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", RuntimeWarning)
                        r = minimize_action_path(model, s, y, T, N, diam=domain.diameter)
                except QuasipotentialError:
                    continue
                if r.value < table[j, t]:
                    table[j, t] = r.value
                    paths[j, t] = r
    values = table.min(axis=1)
    if not np.all(np.isfinite(values)):
        bad = int(np.nonzero(~np.isfinite(values))[0][0])
        raise QuasipotentialError(f"action is infinite for every T at mesh point {mesh[bad].tolist()}")
    i = int(np.argmin(values))
    order = np.sort(values)
    margin = float(order[1] - order[0]) if len(values) > 1 else math.inf
    tstar = int(np.argmin(table[i]))
    best = paths[i, tstar]
    converged = all(p.converged for p in paths.values())
    return QuasipotentialResult(mesh, values, mesh[i].copy(), i, margin, best.path, float(T_grid[tstar]),
                                table, T_grid, x0, converged, margin <= tie_tol)


# -- assumption checks ----------------------------------------------------------

def verify_as1(model: SwitchingModel, domain: DomainGeometry, x0, boundary_mesh=None,
               qp: QuasipotentialResult | None = None, threshold: float = 1e-3, n_starts: int = 32,
               seed: int = 0, T: float = 50.0, dt: float = 0.01, conv_tol: float = 1e-3) -> dict:
    """Evidence for the first assumption: inward averaged field, a unique attractor, a unique minimizer.

    (a) ``<f_av(y), n(y)> < 0`` on the mesh, (b) the averaged flow from
    ``n_starts`` sampled points converges to ``x0`` without leaving the
    closure of ``D``, (c) the quasipotential minimum beats the runner-up by
    more than ``threshold``.  Verdict ``holds``, ``fails`` when (a) or (b)
    fails, ``degenerate`` when only (c) fails.
    """
    x0 = np.asarray(x0, dtype=float).reshape(domain.d)
    mesh = domain.boundary_mesh() if boundary_mesh is None else np.asarray(boundary_mesh, dtype=float)
    mesh = mesh.reshape(-1, domain.d)
    inner = np.einsum("ij,ij->i", averaged_field(model, mesh), domain.normal(mesh))
    worst = int(np.argmax(inner))
    a = {"holds": bool(np.all(inner < 0)), "worst_margin": float(inner[worst]),
         "worst_point": mesh[worst].tolist()}

    rng = np.random.default_rng(seed)
    pts = domain.sample_interior(n_starts, rng)
    try:
        fl = flow(lambda z: averaged_field(model, z), pts, T, dt)
        stayed = ~np.any(domain.phi(fl.states) > 1e-12, axis=0)
        dist = np.linalg.norm(fl.endpoint - x0, axis=-1)
    except FlowDivergence:
        stayed = np.zeros(len(pts), dtype=bool)
        dist = np.full(len(pts), np.inf)
    ok = stayed & (dist < conv_tol)
    b = {"holds": bool(np.all(ok)), "n_starts": int(n_starts), "n_converged": int(ok.sum()),
         "max_distance": float(np.max(np.where(np.isfinite(dist), dist, np.inf)))}

    if qp is None:
        c = {"holds": None, "separation_margin": None, "threshold": threshold}
    else:
        c = {"holds": bool(qp.margin > threshold), "separation_margin": float(qp.margin),
             "threshold": threshold, "y0": qp.y0.tolist()}
    if not (a["holds"] and b["holds"]):
        verdict = "fails"
    elif c["holds"] is False:
        verdict = "degenerate"
    else:
        verdict = "holds"
    return {"verdict": verdict, "inward_field": a, "flow_convergence": b, "separation": c}


@dataclass
class ExitModePrediction:
    k0: int
    outward: np.ndarray  # <f_k(y0), n(y0)> for each mode
    margins: dict  # k -> outward[k0] - outward[k] for k != k0
    verdict: str
    y0: np.ndarray

    def to_dict(self) -> dict:
        return {"k0": int(self.k0), "outward_drift": self.outward.tolist(),
                "margins": {str(k): float(v) for k, v in self.margins.items()},
                "verdict": self.verdict, "y0": self.y0.tolist()}


def verify_as2(model: SwitchingModel, y0, domain: DomainGeometry, tie_tol: float = 1e-9) -> ExitModePrediction:
    """Predicted exit mode: the mode with the largest outward drift at ``y0``.

    The verdict is ``holds`` when the winner beats every other mode by more
    than ``tie_tol``.
    """
    y0 = np.asarray(y0, dtype=float).reshape(domain.d)
    nrm = domain.normal(y0)
    vals = np.array([float(model.drift(k, y0) @ nrm) for k in range(1, model.n + 1)])
    k0 = int(np.argmax(vals)) + 1
    margins = {k: float(vals[k0 - 1] - vals[k - 1]) for k in range(1, model.n + 1) if k != k0}
    holds = all(m > tie_tol for m in margins.values())
    return ExitModePrediction(k0, vals, margins, "holds" if holds else "fails", y0)
