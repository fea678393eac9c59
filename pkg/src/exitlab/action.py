"""
Hamiltonian matrix, its Perron root, Legendre transforms and discrete path actions.

For a model with effective drifts ``f_k``, diffusion matrices ``a_k`` and
generator ``Gamma`` the Hamiltonian matrix is

    H(x, p, alpha)[k, m] = Gamma_km(x)                                   (k != m)
    H(x, p, alpha)[k, k] = p.a_k(x)p / 2 + p.f_k(x) + alpha_k + Gamma_kk(x)

and ``lambda(x, p, alpha)`` is its principal eigenvalue.  ``eta`` is the
Legendre transform of ``lambda`` in ``(p, alpha)`` and ``rho`` the transform
in ``p`` alone at ``alpha = 0``.  The path functionals are composite sums over
segments using the midpoint state and the forward-difference velocity.

The optimizers work on batches: every array argument may carry leading
batch axes, which is how a whole path (one segment per batch entry) is
evaluated in a single call.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import fieldlang as fl
from .model import SwitchingModel
from .switching import averaged_field, generator_from_rates, generator_matrix, stationary_distribution

__all__ = [
    "EigenError", "PrincipalEig", "RatesClock", "DiscretizedPath", "hamiltonian",
    "principal_eigen", "perron", "eigen_and_grad", "legendre_eta", "legendre_rho",
    "path_action_S", "path_action_I", "eta_rho_consistency", "simplex_grid", "averaged_path",
]

SIMPLEX_TOL = 1e-9
NEG_TOL = 1e-12


class EigenError(ArithmeticError):
    pass


@dataclass
class PrincipalEig:
    lam: float
    r: np.ndarray  # right eigenvector, positive, sum(r) = n
    l: np.ndarray  # left eigenvector, positive, l.r = 1


@dataclass(frozen=True, eq=False)
class RatesClock:
    """Rates ``gamma_km(t)`` depending on time instead of position."""

    n: int
    rate_fields: tuple  # n x n of fieldlang expressions in ``t``; None on the diagonal

    @classmethod
    def from_rates(cls, rates: Sequence[Sequence]) -> "RatesClock":
        n = len(rates)
        rows = []
        for k in range(n):
            row = []
            for m in range(n):
                if k == m:
                    row.append(None)
                else:
                    v = rates[k][m]
                    row.append(fl.parse(v if isinstance(v, str) else repr(float(v)), ["t"]))
            rows.append(tuple(row))
        return cls(n, tuple(rows))

    def rates(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape + (self.n, self.n))
        for k in range(self.n):
            for m in range(self.n):
                if k != m:
                    fn = fl.compile_numpy(self.rate_fields[k][m], ["t"])
                    out[..., k, m] = fn(t)
        if self.n > 1 and np.any(out + np.eye(self.n) <= 0):
            raise ValueError("time-dependent rates must stay positive")
        return out

    def generator(self, t) -> np.ndarray:
        return generator_from_rates(self.rates(t))


def _coefficients(model: SwitchingModel, x: np.ndarray, clock: RatesClock | None = None, t=None):
    f = model.drifts(x)
    a = model.diffusions(x)
    if clock is None:
        G = generator_matrix(model, x) if model.n > 1 else np.zeros(x.shape[:-1] + (1, 1))
    else:
        G = np.broadcast_to(clock.generator(t), x.shape[:-1] + (model.n, model.n))
    return f, a, G


def _assemble(f, a, G, p, alpha) -> np.ndarray:
    n = G.shape[-1]
    quad = 0.5 * np.einsum("...i,...kij,...j->...k", p, a, p)
    lin = np.einsum("...i,...ki->...k", p, f)
    H = np.array(G, dtype=float, copy=True)
    idx = np.arange(n)
    H[..., idx, idx] += quad + lin + alpha
    return H


def hamiltonian(model: SwitchingModel, x, p, alpha=None, clock: RatesClock | None = None,
                t=None) -> np.ndarray:
    """The matrix ``H(x, p, alpha)``; with ``clock`` the rates are taken at time ``t``."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], p.shape[:-1])
    x = np.broadcast_to(x, batch + (model.d,))
    p = np.broadcast_to(p, batch + (model.d,))
    alpha = np.zeros(batch + (model.n,)) if alpha is None else np.broadcast_to(
        np.asarray(alpha, dtype=float), batch + (model.n,))
    f, a, G = _coefficients(model, x, clock, t)
    return _assemble(f, a, G, p, alpha)


def principal_eigen(H, tol: float = 1e-12, max_iter: int = 10_000) -> PrincipalEig:
    """Perron root and eigenvectors of a Metzler matrix by shifted power iteration.

    Iterates on ``H + cI`` with ``c = 1 + max|H_kk|`` (an entrywise positive
    matrix).  Falls back to a dense eigensolver for ``n <= 8`` when the
    iteration has not reached ``tol`` after ``max_iter`` sweeps.
    """
    H = np.asarray(H, dtype=float)
    n = H.shape[0]
    if H.shape != (n, n):
        raise ValueError("H must be square")
    if n == 1:
        return PrincipalEig(float(H[0, 0]), np.ones(1), np.ones(1))
    c = 1.0 + float(np.max(np.abs(np.diag(H))))
    B = H + c * np.eye(n)
    scale = max(1.0, float(np.max(np.abs(H))))

    def iterate(M):
        v = np.full(n, 1.0 / n)
        mu = 0.0
        res = math.inf
        for _ in range(max_iter):
            w = M @ v
            mu = float(w.sum() / v.sum())
            w /= w.sum()
            res = float(np.max(np.abs(M @ w - (M @ w).sum() / w.sum() * w)))
            v = w
            if res <= tol * scale:
                return v, mu - c, res
        return v, mu - c, res

    r, lam, res_r = iterate(B)
    l, _, res_l = iterate(B.T)
    if max(res_r, res_l) > tol * scale:
        if n > 8:
            raise EigenError(f"power iteration did not converge: residual {max(res_r, res_l):.3e}")
        lam, r, l = _dense_perron(H)
    r = r * (n / r.sum())
    l = l / float(l @ r)
    lam = float((l @ H @ r) / (l @ r))
    return PrincipalEig(lam, r, l)


def _dense_perron(H: np.ndarray):
    w, V = np.linalg.eig(H)
    i = int(np.argmax(w.real))
    r = np.abs(V[:, i].real)
    wl, U = np.linalg.eig(H.T)
    j = int(np.argmax(wl.real))
    l = np.abs(U[:, j].real)
    return float(w[i].real), r, l


# -- batched Perron root with derivatives -------------------------------------

def perron(H: np.ndarray):
    """Batched dense Perron decomposition.

    Returns ``(lam, w, L, R, i)``: Perron roots, all eigenvalues, the full
    biorthonormal eigenvector matrices (rows of ``L`` are left eigenvectors,
    columns of ``R`` right eigenvectors, ``L R = I``) and the Perron index.
    """
    H = np.asarray(H, dtype=float)
    w, R = np.linalg.eig(H)
    i = np.argmax(w.real, axis=-1)
    L = np.linalg.inv(R)
    lam = np.take_along_axis(w.real, i[..., None], -1)[..., 0]
    return lam, w, L, R, i


def _perron_lambda(H: np.ndarray) -> np.ndarray:
    if H.shape[-1] == 1:
        return H[..., 0, 0].copy()
    if H.shape[-1] == 2:
        half = 0.5 * (H[..., 0, 0] - H[..., 1, 1])
        return 0.5 * (H[..., 0, 0] + H[..., 1, 1]) + np.sqrt(half ** 2 + H[..., 0, 1] * H[..., 1, 0])
    return np.max(np.linalg.eigvals(H).real, axis=-1)


def _derivatives_2x2(H, deltas, second):
    # closed form: lam = (h11 + h22)/2 + sqrt(s^2 + h12 h21), s = (h11 - h22)/2
    half = 0.5 * (H[..., 0, 0] - H[..., 1, 1])
    bc = H[..., 0, 1] * H[..., 1, 0]
    r = np.sqrt(half ** 2 + bc)
    lam = 0.5 * (H[..., 0, 0] + H[..., 1, 1]) + r
    w1 = 0.5 + 0.5 * half / r
    weights = np.stack([w1, 1.0 - w1], axis=-1)
    grad = np.einsum("...k,...pk->...p", weights, deltas)
    diff = deltas[..., 0] - deltas[..., 1]
    curv = bc / (4.0 * r ** 3)
    hess = np.einsum("...k,...pqk->...pq", weights, second) + curv[..., None, None] * diff[..., :, None] * diff[..., None, :]
    return lam, grad, hess


def _derivatives(H, deltas, second):
    """Value, gradient and Hessian of the Perron root.

    ``deltas`` has shape ``(..., P, n)``: the derivative of the diagonal of
    ``H`` in each of ``P`` parameters (only the diagonal depends on them).
    ``second`` has shape ``(..., P, P, n)``: second derivatives of the diagonal.
    """
    n = H.shape[-1]
    if n == 1:
        lam = H[..., 0, 0].copy()
        grad = deltas[..., 0]
        hess = second[..., 0]
        return lam, grad, hess
    if n == 2:
        return _derivatives_2x2(H, deltas, second)
    lam, w, L, R, i = perron(H)
    Li = np.take_along_axis(L, i[..., None, None], -2)[..., 0, :]  # (..., n)
    Ri = np.take_along_axis(R, i[..., None, None], -1)[..., :, 0]  # (..., n)
    weights = (Li * Ri).real  # (..., n)
    grad = np.einsum("...k,...pk->...p", weights, deltas)
    hess = np.einsum("...k,...pqk->...pq", weights, second)
    # second-order perturbation: sum over the other eigenpairs
    M = np.einsum("...ik,...pk,...kj->...pij", L, deltas.astype(complex), R)  # L diag(delta_p) R
    Mi_row = np.take_along_axis(M, i[..., None, None, None], -2)[..., 0, :]  # (..., P, n): M_p[i*, j]
    Mi_col = np.take_along_axis(M, i[..., None, None, None], -1)[..., :, 0]  # (..., P, n): M_p[j, i*]
    gap = lam[..., None] - w
    idx = np.arange(n)
    mask = idx != i[..., None]
    inv_gap = np.where(mask, 1.0 / np.where(mask, gap, 1.0), 0.0)
    term = np.einsum("...pj,...qj,...j->...pq", Mi_row, Mi_col, inv_gap)
    hess = hess + (term + np.swapaxes(term, -1, -2)).real
    return lam, grad, hess


def _p_deltas(f, a, p):
    """Diagonal derivatives of H in p: ``delta_j[k] = (a_k p + f_k)_j``."""
    v = np.einsum("...kij,...j->...ki", a, p) + f  # (..., n, d)
    return np.swapaxes(v, -1, -2)  # (..., d, n)


def eigen_and_grad(model: SwitchingModel, x, p, alpha=None, clock: RatesClock | None = None, t=None):
    """``(lambda, grad_p lambda, grad_alpha lambda)`` at ``(x, p, alpha)``.

    The gradient is ``l . dH . r`` with ``l . r = 1``; the ``alpha_k``
    derivative of ``H`` is the unit diagonal matrix ``E_kk`` and the ``p_j``
    derivative has diagonal ``(a_k p + f_k)_j``.
    """
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], p.shape[:-1])
    x = np.broadcast_to(x, batch + (model.d,))
    p = np.broadcast_to(p, batch + (model.d,))
    alpha = np.zeros(batch + (model.n,)) if alpha is None else np.broadcast_to(
        np.asarray(alpha, dtype=float), batch + (model.n,))
    f, a, G = _coefficients(model, x, clock, t)
    H = _assemble(f, a, G, p, alpha)
    n = model.n
    if n == 1:
        lam = H[..., 0, 0].copy()
        return lam, _p_deltas(f, a, p)[..., 0], np.ones(batch + (1,))
    lam, w, L, R, i = perron(H)
    Li = np.take_along_axis(L, i[..., None, None], -2)[..., 0, :]
    Ri = np.take_along_axis(R, i[..., None, None], -1)[..., :, 0]
    weights = (Li * Ri).real
    gp = np.einsum("...k,...pk->...p", weights, _p_deltas(f, a, p))
    return lam, gp, weights


# -- Legendre transforms -------------------------------------------------------

def _maximize(objective_parts, z0, max_iter=200, gtol=1e-11):
    """Batched damped Newton ascent for a concave objective.

    ``objective_parts(z, need_derivs)`` returns ``(F, grad, neg_hess)`` with
    ``F`` to be maximized.  Stops per batch entry on a small gradient or when
    the objective no longer increases (sup approached at infinity).
    """
    z = z0.copy()
    F, g, Hn = objective_parts(z, True)
    B = z.shape[0]
    P = z.shape[1]
    active = np.ones(B, dtype=bool)
    converged = np.zeros(B, dtype=bool)
    stall = np.zeros(B, dtype=int)
    eye = np.eye(P)
    for _ in range(max_iter):
        gnorm = np.max(np.abs(g), axis=-1)
        done = gnorm <= gtol * (1.0 + np.max(np.abs(z), axis=-1))
        converged |= done & active
        active &= ~done
        if not active.any():
            break
        ia = np.nonzero(active)[0]
        Ha = Hn[ia]
        reg = 1e-12 * (1.0 + np.abs(np.trace(Ha, axis1=-2, axis2=-1)))[:, None, None] * eye
        try:
            step = np.linalg.solve(Ha + reg, g[ia][..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = g[ia].copy()
        bad = ~np.all(np.isfinite(step), axis=-1) | (np.einsum("bi,bi->b", step, g[ia]) <= 0)
        step[bad] = g[ia][bad]
        # backtracking line search (Armijo)
        t = np.ones(len(ia))
        accepted = np.zeros(len(ia), dtype=bool)
        slope = np.einsum("bi,bi->b", step, g[ia])
        Fa = F[ia]
        Fnew = Fa.copy()
        for _ls in range(40):
            todo = np.nonzero(~accepted)[0]
            if len(todo) == 0:
                break
            zt = z[ia[todo]] + t[todo, None] * step[todo]
            Ft, _, _ = objective_parts(zt, False, ia[todo])
            # rounding slack so steps at the optimum are accepted and then flagged as stalled
            slack = 8 * np.finfo(float).eps * (1.0 + np.abs(Fa[todo]))
            ok = np.isfinite(Ft) & (Ft >= Fa[todo] + 1e-4 * t[todo] * slope[todo] - slack)
            accepted[todo[ok]] = True
            Fnew[todo[ok]] = Ft[ok]
            t[todo[~ok]] *= 0.5
        moved = ia[accepted]
        gain = Fnew[accepted] - Fa[accepted]
        z[moved] = z[moved] + t[accepted, None] * step[accepted]
        small = gain <= 1e-15 * (1.0 + np.abs(Fnew[accepted]))
        stall[moved] = np.where(small, stall[moved] + 1, 0)
        stuck = ia[~accepted]
        converged[stuck] = True  # no ascent direction left at working precision
        active[stuck] = False
        flat = moved[stall[moved] >= 3]
        converged[flat] = True
        active[flat] = False
        if len(moved):
            Fm, gm, Hm = objective_parts(z[moved], True, moved)
            F[moved], g[moved], Hn[moved] = Fm, gm, Hm
    return z, F, converged, np.max(np.abs(g), axis=-1)


def legendre_eta(model: SwitchingModel, x, q, beta, clock: RatesClock | None = None, t=None,
                 return_info: bool = False):
    """``eta(x, q, beta) = sup_{p, alpha} [q.p + beta.alpha - lambda(x, p, alpha)]``.

    ``+inf`` whenever ``beta`` is off the probability simplex (tolerance
    ``1e-9`` on the sum, ``-1e-12`` on the entries).  The flat direction
    ``alpha -> alpha + c 1`` is removed by fixing ``alpha_n = 0``.
    """
    x = np.asarray(x, dtype=float)
    q = np.asarray(q, dtype=float)
    beta = np.asarray(beta, dtype=float)
    d, n = model.d, model.n
    batch = np.broadcast_shapes(x.shape[:-1], q.shape[:-1], beta.shape[:-1])
    xb = np.broadcast_to(x, batch + (d,)).reshape(-1, d)
    qb = np.broadcast_to(q, batch + (d,)).reshape(-1, d)
    bb = np.broadcast_to(beta, batch + (n,)).reshape(-1, n)
    tb = None if t is None else np.broadcast_to(np.asarray(t, dtype=float), batch).reshape(-1)
    out = np.full(len(xb), np.inf)
    ok = (np.abs(bb.sum(axis=-1) - 1.0) <= SIMPLEX_TOL) & np.all(bb >= -NEG_TOL, axis=-1)
    conv = np.ones(len(xb), dtype=bool)
    zopt = np.zeros((len(xb), d + n - 1))
    if ok.any():
        sel = np.nonzero(ok)[0]
        f, a, G = _coefficients(model, xb[sel], clock, None if tb is None else tb[sel])
        bs = np.clip(bb[sel], 0.0, None)
        z, F, c = _solve_transform(f, a, G, qb[sel], bs, with_alpha=True)
        out[sel] = np.maximum(F, 0.0)
        conv[sel] = c
        zopt[sel] = z
    out = out.reshape(batch)
    if return_info:
        return out, {"converged": conv.reshape(batch), "argmax": zopt.reshape(batch + (d + n - 1,))}
    return out


def legendre_rho(model: SwitchingModel, x, q, clock: RatesClock | None = None, t=None,
                 return_info: bool = False):
    """``rho(x, q) = sup_p [q.p - lambda(x, p, 0)]``."""
    x = np.asarray(x, dtype=float)
    q = np.asarray(q, dtype=float)
    d, n = model.d, model.n
    batch = np.broadcast_shapes(x.shape[:-1], q.shape[:-1])
    xb = np.broadcast_to(x, batch + (d,)).reshape(-1, d)
    qb = np.broadcast_to(q, batch + (d,)).reshape(-1, d)
    tb = None if t is None else np.broadcast_to(np.asarray(t, dtype=float), batch).reshape(-1)
    f, a, G = _coefficients(model, xb, clock, tb)
    z, F, c = _solve_transform(f, a, G, qb, None, with_alpha=False)
    out = np.maximum(F, 0.0).reshape(batch)
    if return_info:
        return out, {"converged": c.reshape(batch), "argmax": z.reshape(batch + (d,))}
    return out


def _solve_transform(f, a, G, q, beta, with_alpha: bool):
    B, n, d = f.shape
    P = d + (n - 1 if with_alpha else 0)

    def split(z, rows):
        p = z[:, :d]
        alpha = np.zeros((len(z), n))
        if with_alpha:
            alpha[:, : n - 1] = z[:, d:]
        return p, alpha

    def parts(z, derivs, rows=None):
        rows = slice(None) if rows is None else rows
        fr, ar, Gr, qr = f[rows], a[rows], G[rows], q[rows]
        p, alpha = split(z, rows)
        H = _assemble(fr, ar, Gr, p, alpha)
        lin = np.einsum("bi,bi->b", qr, p)
        if with_alpha:
            lin = lin + np.einsum("bk,bk->b", beta[rows], alpha)
        if not derivs:
            return lin - _perron_lambda(H), None, None
        deltas = np.zeros((len(z), P, n))
        deltas[:, :d, :] = _p_deltas(fr, ar, p)
        second = np.zeros((len(z), P, P, n))
        second[:, :d, :d, :] = np.moveaxis(ar, 1, -1)  # a_k[i, j]
        if with_alpha:
            for k in range(n - 1):
                deltas[:, d + k, k] = 1.0
        lam, grad, hess = _derivatives(H, deltas, second)
        target = qr
        if with_alpha:
            target = np.concatenate([qr, beta[rows][:, : n - 1]], axis=-1)
        return lin - lam, target - grad, hess

    z0 = np.zeros((B, P))
    z, F, conv, gnorm = _maximize(parts, z0)
    return z, F, conv


# -- discrete paths -------------------------------------------------------------

@dataclass
class DiscretizedPath:
    """Nodes ``phi_i`` on a time grid, optionally with occupation nodes ``mu_i``."""

    times: np.ndarray
    nodes: np.ndarray  # (N + 1, d)
    occupation: np.ndarray | None = None  # (N + 1, n)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.nodes = np.asarray(self.nodes, dtype=float)
        if self.nodes.ndim == 1:
            self.nodes = self.nodes[:, None]
        if self.occupation is not None:
            self.occupation = np.asarray(self.occupation, dtype=float)
        if len(self.times) < 2 or np.any(np.diff(self.times) <= 0):
            raise ValueError("path time grid must be strictly increasing with at least two nodes")
        if len(self.nodes) != len(self.times):
            raise ValueError("one node per grid time is required")
        if self.occupation is not None and len(self.occupation) != len(self.times):
            raise ValueError("one occupation node per grid time is required")

    @property
    def T(self) -> float:
        return float(self.times[-1] - self.times[0])

    def check_occupation(self, tol: float = 1e-10) -> list[str]:
        """Violations of the occupation constraints (empty when they hold)."""
        out = []
        mu = self.occupation
        if mu is None:
            return ["no occupation nodes"]
        if np.max(np.abs(mu[0])) > tol:
            out.append("mu(0) != 0")
        if np.any(np.diff(mu, axis=0) < -tol):
            out.append("occupation not non-decreasing")
        if np.max(np.abs(mu.sum(axis=1) - (self.times - self.times[0]))) > tol:
            out.append("sum of occupations differs from elapsed time")
        return out

    def segments(self):
        dt = np.diff(self.times)
        mid = 0.5 * (self.nodes[1:] + self.nodes[:-1])
        vel = np.diff(self.nodes, axis=0) / dt[:, None]
        tmid = 0.5 * (self.times[1:] + self.times[:-1])
        return dt, mid, vel, tmid

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.nodes.shape[1]
        head = ["t"] + [f"phi{i + 1}" for i in range(d)]
        if self.occupation is not None:
            head += [f"mu{k + 1}" for k in range(self.occupation.shape[1])]
        w.writerow(head)
        for i, t in enumerate(self.times):
            row = [repr(float(t))] + [repr(float(v)) for v in self.nodes[i]]
            if self.occupation is not None:
                row += [repr(float(v)) for v in self.occupation[i]]
            w.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DiscretizedPath":
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        rows = list(csv.reader(lines))
        head, data = rows[0], np.array([[float(v) for v in r] for r in rows[1:] if r])
        phi_cols = [i for i, h in enumerate(head) if h.startswith("phi")]
        mu_cols = [i for i, h in enumerate(head) if h.startswith("mu")]
        return cls(data[:, 0], data[:, phi_cols], data[:, mu_cols] if mu_cols else None)


def path_action_S(model: SwitchingModel, path: DiscretizedPath, clock: RatesClock | None = None,
                  per_segment: bool = False):
    """Discrete ``S_0T``: ``sum_i eta(midpoint_i, dphi_i/dt_i, dmu_i/dt_i) dt_i``.

    With ``clock`` the rates are evaluated at each segment's midpoint time.
    """
    if path.occupation is None:
        raise ValueError("S requires occupation nodes")
    dt, mid, vel, tmid = path.segments()
    beta = np.diff(path.occupation, axis=0) / dt[:, None]
    eta = legendre_eta(model, mid, vel, beta, clock, tmid if clock is not None else None)
    seg = eta * dt
    total = float(np.sum(seg)) if np.all(np.isfinite(seg)) else math.inf
    return (total, seg) if per_segment else total


def path_action_I(model: SwitchingModel, path: DiscretizedPath, clock: RatesClock | None = None,
                  per_segment: bool = False):
    """Discrete ``I_0T``: ``sum_i rho(midpoint_i, dphi_i/dt_i) dt_i``."""
    dt, mid, vel, tmid = path.segments()
    rho = legendre_rho(model, mid, vel, clock, tmid if clock is not None else None)
    seg = rho * dt
    total = float(np.sum(seg))
    return (total, seg) if per_segment else total


def averaged_path(model: SwitchingModel, x0, T: float, N: int) -> DiscretizedPath:
    """The averaged trajectory on ``N`` segments with ``dmu/dt = omega`` along it.

    Nodes come from a fine fourth-order Runge-Kutta integration; the
    occupation increments integrate ``omega`` by Simpson's rule per segment,
    then are renormalized so the occupations sum exactly to elapsed time.
    """
    from .switching import flow

    times = np.linspace(0.0, T, N + 1)
    sub = 8
    fl_ = flow(lambda z: averaged_field(model, z), np.asarray(x0, dtype=float), T, T / (N * sub))
    nodes = fl_.states[::sub]
    mids = fl_.states[sub // 2::sub]
    w0 = stationary_distribution(generator_matrix(model, nodes))
    wm = stationary_distribution(generator_matrix(model, mids))
    inc = (w0[:-1] + 4 * wm + w0[1:]) / 6.0 * np.diff(times)[:, None]
    inc /= inc.sum(axis=1, keepdims=True)
    inc *= np.diff(times)[:, None]
    mu = np.vstack([np.zeros(model.n), np.cumsum(inc, axis=0)])
    mu[:, -1] = times - mu[:, :-1].sum(axis=1)
    return DiscretizedPath(times, nodes, mu)


# -- eta / rho consistency -----------------------------------------------------------

def simplex_grid(n: int, step: float) -> np.ndarray:
    """All points of the probability simplex with coordinates on multiples of ``step``."""
    m = int(round(1.0 / step))
    if abs(m * step - 1.0) > 1e-9:
        raise ValueError("1/step must be an integer")
    if n == 1:
        return np.ones((1, 1))
    pts = []

    def rec(prefix, left, slots):
        if slots == 1:
            pts.append(prefix + [left])
            return
        for i in range(left + 1):
            rec(prefix + [i], left - i, slots - 1)

    rec([], m, n)
    return np.array(pts, dtype=float) / m


def eta_rho_consistency(model: SwitchingModel, x, q, beta_grid=None, step: float = 0.02,
                        tol: float = 1e-8) -> dict:
    """Compare ``min_beta eta(x, q, beta)`` over a simplex grid with ``rho(x, q)``."""
    grid = simplex_grid(model.n, step) if beta_grid is None else np.asarray(beta_grid, dtype=float)
    x = np.asarray(x, dtype=float)
    q = np.asarray(q, dtype=float)
    eta = legendre_eta(model, x[None], q[None], grid)
    rho = float(legendre_rho(model, x, q))
    j = int(np.argmin(eta))
    return {"min_eta": float(eta[j]), "rho": rho, "argmin_beta": grid[j].tolist(),
            "gap": float(eta[j] - rho), "lower_bound_holds": bool(eta[j] >= rho - tol),
            "grid_size": int(len(grid))}
