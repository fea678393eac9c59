"""
Finite differences for the coupled generator on a tensor grid.

Per mode ``k`` the generator ``(eps/2) tr(a_k D^2 u) + f_k . grad u`` is
discretized with central second differences, the seven-point mixed stencil
for off-diagonal diffusion and first-order upwinding for the drift, which
keeps every off-diagonal entry nonnegative.  Modes are coupled by the jump
rates.  Neighbors outside the domain are boundary nodes whose values are the
boundary data at their projection onto the boundary; they are eliminated to
the right-hand side.

Sign convention: the assembled matrix is the generator ``L`` restricted to
interior nodes.  The Dirichlet problem is ``L u + B g = 0`` and the principal
eigenvalue is the smallest ``lam > 0`` with ``-L psi = lam psi``.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import splu

from .domain import DomainGeometry
from .model import BoundaryData, SwitchingModel

__all__ = [
    "StencilError", "ConvergenceError", "Grid", "DiscreteOperator", "PdeSolution", "EigenResult",
    "FeedbackPolicy", "LimitStudy", "discretize", "solve_dirichlet", "principal_eigen",
    "policy_iteration_eigen", "epsilon_limit_study", "mean_exit_time", "interpolate",
]


class StencilError(ValueError):
    pass


class ConvergenceError(ArithmeticError):
    pass


@dataclass(eq=False)
class Grid:
    """Uniform tensor grid over the bounding box of a domain, spacing ``h`` on every axis."""

    domain: DomainGeometry
    h: float
    axes: list  # node coordinates per axis
    interior: np.ndarray  # boolean mask over the full node array
    index: np.ndarray  # full-array -> interior row, -1 elsewhere
    points: np.ndarray  # interior node coordinates (M, d)
    multi: np.ndarray  # interior multi-indices (M, d)

    @classmethod
    def build(cls, domain: DomainGeometry, h: float, min_cells: int = 16) -> "Grid":
        if not h > 0:
            raise ValueError("grid spacing must be positive")
        axes = []
        for lo, hi in zip(domain.lo, domain.hi):
            m = int(math.ceil((hi - lo) / h - 1e-9))
            if m < min_cells:
                raise StencilError(f"grid spacing {h:g} gives only {m} cells on an axis of length {hi - lo:g}"
                                   f" (need >= {min_cells})")
            axes.append(lo + h * np.arange(m + 1))
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        inside = domain.phi(mesh) < 0
        if not inside.any():
            raise StencilError("no grid node lies inside the domain")
        multi = np.argwhere(inside)
        index = np.full(inside.shape, -1, dtype=np.int64)
        index[inside] = np.arange(len(multi))
        return cls(domain, float(h), axes, inside, index, mesh[inside], multi)

    @property
    def shape(self) -> tuple:
        return self.interior.shape

    @property
    def size(self) -> int:
        return len(self.points)

    def node(self, multi: np.ndarray) -> np.ndarray:
        return np.stack([self.axes[i][multi[..., i]] for i in range(len(self.axes))], axis=-1)


@dataclass(eq=False)
class DiscreteOperator:
    grid: Grid
    eps: float
    n: int  # number of stacked mode blocks
    matrix: sp.csr_matrix  # generator on interior unknowns, (n*M, n*M)
    boundary_matrix: sp.csr_matrix  # (n*M, n*B), maps boundary values to rows
    boundary_points: np.ndarray  # (B, d) projected boundary points
    modes: tuple  # 1-based mode numbers of the blocks
    rate_factor: float = 1.0

    def boundary_vector(self, boundary: BoundaryData | None) -> np.ndarray:
        """Boundary values stacked per block, ``(n*B,)``."""
        if boundary is None or len(self.boundary_points) == 0:
            return np.zeros(self.n * len(self.boundary_points))
        vals = boundary.values(self.boundary_points)  # (B, n_model)
        return np.concatenate([vals[:, k - 1] for k in self.modes])


def _stencil(grid: Grid):
    """Axis and diagonal offsets used by the seven-point scheme."""
    d = len(grid.axes)
    offs = []
    for i in range(d):
        e = np.zeros(d, dtype=int)
        e[i] = 1
        offs.append(("axis", i, +1, e.copy()))
        offs.append(("axis", i, -1, -e.copy()))
    for i in range(d):
        for j in range(i + 1, d):
            for si, sj in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
                e = np.zeros(d, dtype=int)
                e[i], e[j] = si, sj
                offs.append(("diag", (i, j), si * sj, e))
    return offs


def _mode_coefficients(grid: Grid, eps: float, f: np.ndarray, a: np.ndarray):
    """Neighbor coefficients of one mode's generator at every interior node."""
    h = grid.h
    d = f.shape[1]
    coefs = []
    absa = np.abs(a)
    for kind, ax, sign, e in _stencil(grid):
        if kind == "axis":
            i = ax
            cross = absa[:, i, :].sum(axis=1) - absa[:, i, i]
            diff = 0.5 * eps * (a[:, i, i] - cross) / h ** 2
            up = np.maximum(sign * f[:, i], 0.0) / h
            c = diff + up
            if np.any(diff < -1e-12 * (1 + np.abs(a[:, i, i]))):
                bad = int(np.argmin(diff))
                raise StencilError(
                    f"mixed-derivative stencil loses positivity at {grid.points[bad].tolist()}: "
                    f"a_ii={a[bad, i, i]:.4g} < sum_j |a_ij| = {cross[bad]:.4g}")
        else:
            i, j = ax
            aij = a[:, i, j]
            c = np.where(np.sign(aij) == sign, 0.5 * eps * np.abs(aij) / h ** 2, 0.0)
        coefs.append((e, c))
    return coefs


def discretize(model: SwitchingModel, domain: DomainGeometry, grid: Grid, eps: float, mode: int | None = None,
               drift: np.ndarray | None = None, coupled: bool | None = None) -> DiscreteOperator:
    """Assemble the generator on ``grid``.

    ``mode=None`` gives the coupled system of all modes, ``mode=k`` the
    single-mode operator of mode ``k`` (1-based).  ``drift`` overrides the
    drift at interior nodes (single mode only), which is how feedback
    policies are evaluated.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    modes = tuple(range(1, model.n + 1)) if mode is None else (int(mode),)
    n = len(modes)
    X = grid.points
    M = len(X)
    rf = model.rate_factor(eps) if (n > 1 and eps > 0) else 1.0
    rows, cols, vals = [], [], []
    brow, bcol, bval = [], [], []
    bmap: dict[int, int] = {}
    bnodes: list = []
    shape = np.array(grid.shape)
    flat_strides = np.array([int(np.prod(shape[i + 1:])) for i in range(len(shape))])
    isolated = np.zeros(M, dtype=bool)
    for blk, k in enumerate(modes):
        f = model.drift(k, X) if drift is None else np.asarray(drift, dtype=float).reshape(M, -1)
        a = model.modes[k - 1].a(X)
        diag = np.zeros(M)
        n_inside = np.zeros(M, dtype=int)
        for e, c in _mode_coefficients(grid, eps, f, a):
            nb = grid.multi + e
            inrange = np.all((nb >= 0) & (nb < shape), axis=1)
            nbc = np.clip(nb, 0, shape - 1)
            tgt = np.where(inrange, grid.index[tuple(nbc.T)], -1)
            diag -= c
            live = c != 0
            inner = live & (tgt >= 0)
            rows.append(blk * M + np.nonzero(inner)[0])
            cols.append(blk * M + tgt[inner])
            vals.append(c[inner])
            n_inside += (tgt >= 0) & (np.abs(e).sum() == 1)
            outer = np.nonzero(live & (tgt < 0))[0]
            if len(outer):
                flat = (nb[outer] * flat_strides).sum(axis=1)
                ids = np.empty(len(outer), dtype=np.int64)
                for q, (fi, o) in enumerate(zip(flat, outer)):
                    key = int(fi) if inrange[o] else -1 - len(bmap)
                    if key not in bmap:
                        bmap[key] = len(bnodes)
                        bnodes.append(grid.points[o] + e * grid.h)
                    ids[q] = bmap[key]
                brow.append(blk * M + outer)
                bcol.append(ids)
                bval.append(c[outer])
        isolated |= n_inside == 0
        if n > 1 or model.n > 1:
            if n > 1:
                R = model.rates(X) * rf  # (M, n, n)
                for blk2, m in enumerate(modes):
                    if m == k:
                        continue
                    g = R[:, k - 1, m - 1]
                    rows.append(blk * M + np.arange(M))
                    cols.append(blk2 * M + np.arange(M))
                    vals.append(g)
                    diag -= g
        rows.append(blk * M + np.arange(M))
        cols.append(blk * M + np.arange(M))
        vals.append(diag)
    if np.any(isolated) and eps > 0 and grid.points.shape[1] > 0 and M > 1:
        bad = int(np.nonzero(isolated)[0][0])
        raise StencilError(f"stencil starvation: node {grid.points[bad].tolist()} has no interior neighbor")
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * M, n * M))
    B_count = len(bnodes)
    bpts = domain.project(np.array(bnodes)) if B_count else np.zeros((0, domain.d))
    # every boundary node exists once per block
    if B_count:
        br = np.concatenate(brow)
        bc = np.concatenate(bcol)
        bv = np.concatenate(bval)
        blk_of_row = br // M
        Bm = sp.csr_matrix((bv, (br, blk_of_row * B_count + bc)), shape=(n * M, n * B_count))
    else:
        Bm = sp.csr_matrix((n * M, 0))
    return DiscreteOperator(grid, float(eps), n, A, Bm, bpts, modes, rf)


# -- Dirichlet problem -----------------------------------------------------------

@dataclass
class PdeSolution:
    op: DiscreteOperator = field(repr=False)
    values: np.ndarray  # (M, n) per interior node and block
    residual: float
    iterations: int
    bounds: tuple  # (min, max) of the boundary data
    max_principle_ok: bool
    max_principle_violation: float
    boundary: BoundaryData | None = field(default=None, repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.op.grid.points.shape[1]
        w.writerow([f"x{i + 1}" for i in range(d)] + [f"psi{k}" for k in self.op.modes])
        for p, v in zip(self.op.grid.points, self.values):
            w.writerow([repr(float(c)) for c in p] + [repr(float(c)) for c in v])
        return buf.getvalue()

    def at(self, points) -> np.ndarray:
        """Linear interpolation at arbitrary points in the closed domain, ``(P, n)``."""
        return interpolate(self, points)

    def summary(self) -> dict:
        return {"eps": self.op.eps, "h": self.op.grid.h, "unknowns": int(self.values.size),
                "residual": float(self.residual), "iterations": int(self.iterations),
                "boundary_min": float(self.bounds[0]), "boundary_max": float(self.bounds[1]),
                "max_principle_ok": bool(self.max_principle_ok),
                "max_principle_violation": float(self.max_principle_violation)}


def _solve(A: sp.csr_matrix, b: np.ndarray, rtol: float = 1e-10, max_refine: int = 20):
    """Sparse LU with iterative refinement.

    Stops when the normwise backward error ``|r| / (|A| |x| + |b|)`` (max
    norms) is below ``rtol``; scaling by ``|A| |x|`` keeps the test meaningful
    when the solution is much larger than the data, as for long exit times.
    """
    lu = splu(A.tocsc())
    x = lu.solve(b)
    normA = float(abs(A).sum(axis=1).max())

    def backward_error(x):
        r = b - A @ x
        scale = normA * float(np.max(np.abs(x))) + float(np.max(np.abs(b)))
        return r, float(np.max(np.abs(r))) / max(scale, 1e-300)

    r, res = backward_error(x)
    for it in range(1, max_refine + 1):
        if res <= rtol:
            return x, res, it
        x = x + lu.solve(r)
        r, res = backward_error(x)
    if res > rtol:
        raise ConvergenceError(f"linear solve backward error {res:.3e} above {rtol:g}")
    return x, res, max_refine


def solve_dirichlet(op: DiscreteOperator, boundary: BoundaryData, rhs: np.ndarray | None = None,
                    rtol: float = 1e-10, mp_tol: float = 1e-9) -> PdeSolution:
    """Solve ``L psi = -rhs`` in the interior with ``psi = g`` on the boundary.

    With ``rhs=None`` (the homogeneous problem) the discrete maximum
    principle is checked: every value must lie within the range of the
    boundary data of all modes.
    """
    gvec = op.boundary_vector(boundary)
    b = op.boundary_matrix @ gvec if gvec.size else np.zeros(op.matrix.shape[0])
    if rhs is not None:
        b = b + np.asarray(rhs, dtype=float).reshape(-1)
    x, res, it = _solve(-op.matrix, b, rtol)
    M = op.grid.size
    vals = x.reshape(op.n, M).T
    if gvec.size:
        lo, hi = float(gvec.min()), float(gvec.max())
    else:
        lo = hi = 0.0
    if rhs is None:
        viol = max(0.0, lo - float(vals.min()), float(vals.max()) - hi)
        ok = viol <= mp_tol * max(1.0, abs(lo), abs(hi))
    else:
        viol, ok = 0.0, True
    return PdeSolution(op, vals, res, it, (lo, hi), ok, viol, boundary)


def interpolate(sol: PdeSolution, points) -> np.ndarray:
    grid = sol.op.grid
    pts = np.asarray(points, dtype=float).reshape(-1, len(grid.axes))
    out = np.zeros((len(pts), sol.op.n))
    for blk in range(sol.op.n):
        full = np.zeros(grid.shape)
        full[grid.interior] = sol.values[:, blk]
        # boundary nodes carry the boundary value of the nearest boundary point
        if len(sol.op.boundary_points):
            outside = ~grid.interior
            nodes = np.stack(np.meshgrid(*grid.axes, indexing="ij"), axis=-1)[outside]
            proj = grid.domain.project(nodes)
            if sol.boundary is not None:
                full[outside] = sol.boundary.values(proj)[:, sol.op.modes[blk] - 1]
        interp = RegularGridInterpolator(grid.axes, full, method="linear")
        out[:, blk] = interp(pts)
    return out


def mean_exit_time(model: SwitchingModel, domain: DomainGeometry, grid: Grid, eps: float) -> PdeSolution:
    """Expected exit time from each node and starting mode: ``L T = -1``, ``T = 0`` on the boundary."""
    op = discretize(model, domain, grid, eps)
    zero = BoundaryData.constant([0.0] * model.n, domain.d)
    return solve_dirichlet(op, zero, rhs=np.ones(op.matrix.shape[0]))


# -- principal eigenvalue ----------------------------------------------------------

@dataclass
class EigenResult:
    lam: float
    psi: np.ndarray  # positive, max = 1
    iterations: int
    residual: float
    grid: Grid = field(repr=False)

    def to_dict(self) -> dict:
        return {"lambda": float(self.lam), "iterations": int(self.iterations),
                "residual": float(self.residual), "h": self.grid.h, "nodes": int(len(self.psi))}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.grid.points.shape[1]
        w.writerow([f"x{i + 1}" for i in range(d)] + ["psi"])
        for p, v in zip(self.grid.points, self.psi):
            w.writerow([repr(float(c)) for c in p] + [repr(float(v))])
        return buf.getvalue()


def principal_eigen(op: DiscreteOperator, tol: float = 1e-10, max_iter: int = 5000) -> EigenResult:
    """Smallest eigenvalue of ``-L`` with zero Dirichlet data, by inverse power iteration.

    ``-L`` is a nonsingular M-matrix, so its inverse is entrywise nonnegative
    and the iterates stay positive; a sign change is a hard error.
    """
    A = (-op.matrix).tocsc()
    lu = splu(A)
    v = np.ones(A.shape[0])
    lam_old = math.inf
    lam = math.nan
    for it in range(1, max_iter + 1):
        w = lu.solve(v)
        if np.any(w < -1e-14 * np.max(np.abs(w))):
            raise ConvergenceError("eigenvector iterate changed sign: discretization is not monotone")
        top = float(np.max(w))
        lam = 1.0 / top  # v has max 1
        v = w / top
        if abs(lam - lam_old) <= tol * abs(lam):
            break
        lam_old = lam
    else:
        raise ConvergenceError(f"inverse iteration did not converge in {max_iter} steps")
    res = float(np.max(np.abs(A @ v - lam * v)))
    if np.any(v <= 0):
        raise ConvergenceError("principal eigenfunction is not positive")
    return EigenResult(lam, v, it, res, op.grid)


# -- policy iteration ----------------------------------------------------------------

@dataclass
class FeedbackPolicy:
    points: np.ndarray
    controls: np.ndarray  # control value per interior node
    choice: np.ndarray  # index into the control set

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.points.shape[1]
        w.writerow([f"x{i + 1}" for i in range(d)] + ["u"])
        for p, u in zip(self.points, self.controls):
            w.writerow([repr(float(c)) for c in p] + [repr(float(u))])
        return buf.getvalue()


def _upwind_pairing(grid: Grid, psi: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Upwind discrete ``<grad psi, F>`` at every interior node for each candidate drift.

    ``F`` has shape ``(M, C, d)``; boundary values of ``psi`` are zero.
    """
    shape = np.array(grid.shape)
    out = np.zeros(F.shape[:2])
    for i in range(grid.points.shape[1]):
        e = np.zeros(len(shape), dtype=int)
        e[i] = 1
        vals = []
        for s in (1, -1):
            nb = grid.multi + s * e
            ok = np.all((nb >= 0) & (nb < shape), axis=1)
            tgt = np.where(ok, grid.index[tuple(np.clip(nb, 0, shape - 1).T)], -1)
            vals.append(np.where(tgt >= 0, psi[np.maximum(tgt, 0)], 0.0))
        fwd = (vals[0] - psi) / grid.h
        bwd = (psi - vals[1]) / grid.h
        fi = F[..., i]
        out += np.maximum(fi, 0.0) * fwd[:, None] + np.minimum(fi, 0.0) * bwd[:, None]
    return out


def constant_policy_eigen(model: SwitchingModel, domain: DomainGeometry, grid: Grid, eps: float, mode: int,
                          index: int) -> EigenResult:
    """Principal eigenvalue of one mode with the control fixed to the ``index``-th value everywhere."""
    u = float(model.controls.values[mode - 1][index])
    drift = model.controls.drift(mode, grid.points, u)
    return principal_eigen(discretize(model, domain, grid, eps, mode=mode, drift=drift))


def policy_iteration_eigen(model: SwitchingModel, domain: DomainGeometry, grid: Grid, eps: float, mode: int = 1,
                           max_sweeps: int = 50, initial: int | np.ndarray = 0, slack: float = 1e-12):
    """Feedback control lowering the principal eigenvalue of one mode.

    Alternates an eigen solve for the current feedback with the pointwise
    update ``v(x) <- argmax_u <grad_h psi(x), f_k(x, u)>`` using the upwind
    discrete gradient.  Because only the drift depends on the control this
    maximizes ``(L_u psi)(x)`` node by node, which cannot raise the
    eigenvalue.  Returns ``(policy, trace, info)``.
    """
    if model.controls is None:
        raise ValueError("model has no control family")
    U = np.asarray(model.controls.values[mode - 1], dtype=float)
    X = grid.points
    F = np.stack([model.controls.drift(mode, X, u) for u in U], axis=1)  # (M, C, d)
    choice = np.full(len(X), initial, dtype=int) if np.isscalar(initial) else np.asarray(initial, dtype=int).copy()
    trace = []
    best = None
    stable = False
    for sweep in range(max_sweeps):
        op = discretize(model, domain, grid, eps, mode=mode, drift=F[np.arange(len(X)), choice])
        eig = principal_eigen(op)
        trace.append(eig.lam)
        if best is None or eig.lam < best[0]:
            best = (eig.lam, choice.copy(), eig)
        score = _upwind_pairing(grid, eig.psi, F)
        cur = score[np.arange(len(X)), choice]
        cand = np.argmax(score, axis=1)
        better = score[np.arange(len(X)), cand] > cur + 1e-12 * (1 + np.abs(cur))
        if not better.any():
            stable = True
            break
        choice = np.where(better, cand, choice)
    if not stable:
        warnings.warn("policy iteration did not settle; returning the best policy seen", RuntimeWarning)
    lam, ch, eig = best
    audit = all(b <= a + slack * max(1.0, abs(a)) for a, b in zip(trace, trace[1:]))
    policy = FeedbackPolicy(X.copy(), U[ch], ch)
    return policy, trace, {"converged": stable, "sweeps": len(trace), "monotone": audit, "eigen": eig}


# -- epsilon ladder ----------------------------------------------------------------------

@dataclass
class LimitStudy:
    ladder: list
    probes: np.ndarray
    target: float  # g_{k0}(y0)
    psi: np.ndarray  # (eps, probes, n)
    distance: np.ndarray  # (eps, probes, n)
    solutions: list = field(default_factory=list, repr=False)

    def trend(self, slack: float = 0.02) -> dict:
        """Whether each distance column is non-increasing as eps decreases."""
        diffs = np.diff(self.distance, axis=0)
        worst = float(diffs.max()) if diffs.size else 0.0
        return {"non_increasing": bool(worst <= slack), "worst_increase": worst, "slack": slack}

    def rows(self) -> list:
        out = []
        for e, eps in enumerate(self.ladder):
            for p, x in enumerate(self.probes):
                for k in range(self.psi.shape[2]):
                    out.append({"eps": float(eps), "x": x.tolist(), "mode": k + 1,
                                "psi": float(self.psi[e, p, k]), "distance": float(self.distance[e, p, k])})
        return out


def epsilon_limit_study(model: SwitchingModel, domain: DomainGeometry, boundary: BoundaryData,
                        ladder: Sequence[float], probes, y0, k0: int, h: float = 1.0 / 256) -> LimitStudy:
    """Solve the coupled problem along the ladder and measure ``|psi_k(x) - g_{k0}(y0)|``."""
    grid = Grid.build(domain, h)
    probes = np.asarray(probes, dtype=float).reshape(-1, domain.d)
    target = float(boundary.g(k0, np.asarray(y0, dtype=float).reshape(domain.d)))
    psi = np.zeros((len(ladder), len(probes), model.n))
    sols = []
    for e, eps in enumerate(ladder):
        sol = solve_dirichlet(discretize(model, domain, grid, eps), boundary)
        psi[e] = sol.at(probes)
        sols.append(sol)
    return LimitStudy([float(v) for v in ladder], probes, target, psi, np.abs(psi - target), sols)
