"""
Monte Carlo for the switching diffusion ``(X(t), zeta(t))``.

Between jumps the state follows an Euler-Maruyama step in the current mode,
``X <- X + f_k(X) dt + sqrt(eps) sigma_k(X) sqrt(dt) xi``.  Jumps of the
mode process are simulated by thinning against a constant bound ``lam`` on
the total jump rate; a proposal falling inside a step is resolved at the
state held at the start of that step, before the diffusion move.  An exit is
registered at the first step whose end point leaves ``D``; the exit time and
place are interpolated linearly between the last inside point and the first
outside point and the place is projected onto the boundary.

This endpoint test misses excursions that leave and re-enter ``D`` within
one step, which biases exit times up by O(sqrt(dt)).  With ``bridge=True``
each inside-to-inside step also exits with the Brownian-bridge crossing
probability ``exp(-2 d0 d1 / (eps dt |sigma^T n|^2))``, where ``d0``, ``d1`` are
the distances to the boundary along the normal ``n``; such an exit is placed
at the step midpoint, projected onto the boundary.

Noise comes from :mod:`exitlab.rng`, keyed by ``(base_seed, trial, stream)``,
so results do not depend on the number of workers.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from . import rng as _rng
from .domain import DomainGeometry
from .model import BoundaryData, SwitchingModel

__all__ = [
    "SimulationError", "RateBoundError", "ExitEvent", "TrajectorySample", "ExitStatistics",
    "rate_bound", "simulate_path", "simulate_trials", "run_monte_carlo", "estimate_exit_rate",
    "default_rate_window", "pdmp_simulate", "stochastic_representation_estimate",
]


class SimulationError(RuntimeError):
    pass


class RateBoundError(SimulationError):
    """The total jump rate exceeded the thinning bound; rerun with a larger bound."""

    def __init__(self, state, bound: float):
        self.state = np.asarray(state).tolist()
        self.bound = bound
        super().__init__(f"jump rate exceeded thinning bound {bound:.6g} at state {self.state}")


@dataclass
class ExitEvent:
    kind: str  # "exited" | "censored"
    tau: float
    y: np.ndarray
    mode: int  # 1-based

    @property
    def exited(self) -> bool:
        return self.kind == "exited"


@dataclass
class TrajectorySample:
    times: np.ndarray
    states: np.ndarray  # (steps + 1, d)
    modes: np.ndarray  # 1-based
    occupation: np.ndarray  # time spent in each mode
    exit: ExitEvent
    jump_times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def final_time(self) -> float:
        return float(self.times[-1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.states.shape[1]
        w.writerow(["t"] + [f"x{i + 1}" for i in range(d)] + ["mode"])
        for t, x, k in zip(self.times, self.states, self.modes):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [int(k)])
        return buf.getvalue()


def rate_bound(model: SwitchingModel, domain: DomainGeometry, eps: float,
               safety: float = 1.5, samples: int = 512) -> float:
    """Thinning bound: ``safety`` times the largest sampled total jump rate on the closed domain."""
    if model.n == 1:
        return 0.0
    rng = np.random.default_rng(12345)
    pts = np.concatenate([domain.sample_interior(samples, rng), domain.boundary_mesh(64, rng)])
    tot = model.rates(pts).sum(axis=-1)
    return float(safety * tot.max() * model.rate_factor(eps))


def _check_start(domain: DomainGeometry, x0) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float).reshape(domain.d)
    if not domain.phi(x0) < 0:
        raise ValueError(f"start point {x0.tolist()} is not inside the domain")
    return x0


def _check_mode(model: SwitchingModel, k0_mode: int) -> int:
    if not 1 <= int(k0_mode) <= model.n:
        raise ValueError(f"mode {k0_mode} outside 1..{model.n}")
    return int(k0_mode) - 1


def _nsteps(horizon: float, dt: float) -> int:
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    return int(math.ceil(horizon / dt - 1e-9))


def simulate_path(model: SwitchingModel, domain: DomainGeometry, eps: float, x0, k0_mode: int,
                  dt: float, horizon: float, seed: int, lam: float | None = None,
                  trial: int = 0, bridge: bool = False) -> TrajectorySample:
    """One recorded path of the switching diffusion, stopped at exit or at ``horizon``."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    x0 = _check_start(domain, x0)
    k0 = _check_mode(model, k0_mode)
    nsteps = _nsteps(horizon, dt)
    rf = model.rate_factor(eps) if model.n > 1 and eps > 0 else 1.0
    if lam is None:
        lam = rate_bound(model, domain, eps) if model.n > 1 else 0.0
    ks = _kernels.kernels(model, domain)
    rec_x = np.zeros((nsteps + 1, model.d))
    rec_k = np.zeros(nsteps + 1, dtype=np.int64)
    occ = np.zeros(model.n)
    y = np.zeros(model.d)
    bad = np.zeros(model.d)
    keyn = np.uint64(_rng.trial_key(seed, trial, _rng.STREAM_NORMAL))
    keyj = np.uint64(_rng.trial_key(seed, trial, _rng.STREAM_JUMP))
    keyb = np.uint64(_rng.trial_key(seed, trial, _rng.STREAM_EXTRA))
    st, tau, k, used = ks["diffusion_trial"](keyn, keyj, keyb, bool(bridge), x0, k0, float(eps), float(dt), nsteps,
                                             float(rf), float(lam), True, rec_x, rec_k, occ, y, bad)
    _raise_status(st, bad, lam)
    times = np.arange(used + 1) * dt
    states = rec_x[: used + 1].copy()
    modes = rec_k[: used + 1] + 1
    if st == _kernels.STATUS_EXITED:
        times[-1] = tau
        yb = domain.project(y)
        states[-1] = yb
        ev = ExitEvent("exited", float(tau), yb, int(k) + 1)
    else:
        ev = ExitEvent("censored", float(tau), states[-1].copy(), int(k) + 1)
    jumps = times[1:][np.diff(modes) != 0]
    return TrajectorySample(times, states, modes, occ, ev, jumps)


def _raise_status(st: int, bad: np.ndarray, lam: float) -> None:
    if st == _kernels.STATUS_RATE_BOUND:
        raise RateBoundError(bad, lam)
    if st == _kernels.STATUS_NONFINITE:
        raise SimulationError(f"non-finite state after {bad.tolist()}")
    if st == _kernels.STATUS_CAPACITY:
        raise SimulationError("path recording capacity exhausted")


@dataclass
class TrialBatch:
    """Raw per-trial results, ordered by trial index."""

    status: np.ndarray
    tau: np.ndarray  # +inf for censored trials
    y: np.ndarray  # projected exit points (NaN rows if censored)
    mode: np.ndarray  # 1-based mode at exit or at the horizon
    occupation: np.ndarray

    @property
    def exited(self) -> np.ndarray:
        return self.status == _kernels.STATUS_EXITED


def simulate_trials(model: SwitchingModel, domain: DomainGeometry, eps: float, x0, k0_mode: int,
                    dt: float, horizon: float, N: int, base_seed: int, workers: int = 1,
                    lam: float | None = None, first_trial: int = 0, bridge: bool = False) -> TrialBatch:
    """Run ``N`` independent trials; trial ``i`` uses the key ``(base_seed, first_trial + i)``."""
    if N < 1:
        raise ValueError("trials must be >= 1")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    x0 = _check_start(domain, x0)
    k0 = _check_mode(model, k0_mode)
    nsteps = _nsteps(horizon, dt)
    rf = model.rate_factor(eps) if model.n > 1 and eps > 0 else 1.0
    if lam is None:
        lam = rate_bound(model, domain, eps) if model.n > 1 else 0.0
    ks = _kernels.kernels(model, domain)
    idx = range(first_trial, first_trial + N)
    keys_n = np.array([_rng.trial_key(base_seed, i, _rng.STREAM_NORMAL) for i in idx], dtype=np.uint64)
    keys_j = np.array([_rng.trial_key(base_seed, i, _rng.STREAM_JUMP) for i in idx], dtype=np.uint64)
    keys_b = np.array([_rng.trial_key(base_seed, i, _rng.STREAM_EXTRA) for i in idx], dtype=np.uint64)
    status = np.zeros(N, dtype=np.int64)
    tau = np.zeros(N)
    mode = np.zeros(N, dtype=np.int64)
    y = np.zeros((N, model.d))
    occ = np.zeros((N, model.n))
    bad = np.zeros((N, model.d))
    args = (keys_n, keys_j, keys_b, bool(bridge), x0, k0, float(eps), float(dt), nsteps, float(rf), float(lam),
            status, tau, mode, y, occ, bad)
    workers = max(1, int(workers))
    if workers == 1:
        ks["run_block"](0, N, *args)
    else:
        bounds = np.linspace(0, N, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(ks["run_block"], int(a), int(b - a), *args)
                    for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
            for f in futs:
                f.result()
    for code in (_kernels.STATUS_RATE_BOUND, _kernels.STATUS_NONFINITE):
        hit = np.nonzero(status == code)[0]
        if len(hit):
            _raise_status(code, bad[hit[0]], lam)
    exited = status == _kernels.STATUS_EXITED
    yp = np.full((N, model.d), np.nan)
    if exited.any():
        yp[exited] = domain.project(y[exited])
    tau = np.where(exited, tau, np.inf)
    return TrialBatch(status, tau, yp, mode + 1, occ)


# -- statistics ----------------------------------------------------------------

@dataclass
class ExitStatistics:
    """Aggregated exit statistics of ``N`` trials from one start."""

    n_trials: int
    n_exited: int
    exit_fraction: float
    mean_exit_time: float | None
    mean_exit_time_se: float | None
    degenerate: bool
    time_grid: np.ndarray
    survival: np.ndarray
    mesh: np.ndarray
    histogram: np.ndarray
    mode_frequencies: np.ndarray
    delta: float
    y0_hint: np.ndarray | None
    concentration: float | None  # P{exited and |X(tau) - y0| <= delta}
    concentration_exited: float | None  # same, conditional on exit
    concentration_se: float | None
    rate: float | None = None
    rate_se: float | None = None
    rate_window: tuple | None = None
    settings: dict = field(default_factory=dict)
    trials: TrialBatch | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        def num(v):
            return None if v is None else float(v)
        return {
            "n_trials": int(self.n_trials),
            "n_exited": int(self.n_exited),
            "exit_fraction": float(self.exit_fraction),
            "mean_exit_time": num(self.mean_exit_time),
            "mean_exit_time_se": num(self.mean_exit_time_se),
            "degenerate": bool(self.degenerate),
            "mode_frequencies": [float(v) for v in self.mode_frequencies],
            "mesh": self.mesh.tolist(),
            "histogram": [float(v) for v in self.histogram],
            "delta": float(self.delta) if math.isfinite(self.delta) else "inf",
            "y0_hint": None if self.y0_hint is None else self.y0_hint.tolist(),
            "concentration": num(self.concentration),
            "concentration_exited": num(self.concentration_exited),
            "concentration_se": num(self.concentration_se),
            "exit_rate": num(self.rate),
            "exit_rate_se": num(self.rate_se),
            "exit_rate_window": None if self.rate_window is None else [float(v) for v in self.rate_window],
            "settings": self.settings,
        }

    def survival_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "survival"])
        for t, s in zip(self.time_grid, self.survival):
            w.writerow([repr(float(t)), repr(float(s))])
        return buf.getvalue()

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.mesh.shape[1]
        w.writerow([f"y{i + 1}" for i in range(d)] + ["mass"])
        for p, m in zip(self.mesh, self.histogram):
            w.writerow([repr(float(v)) for v in p] + [repr(float(m))])
        return buf.getvalue()


def aggregate(batch: TrialBatch, domain: DomainGeometry, n_modes: int, delta: float = math.inf,
              y0_hint=None, mesh: np.ndarray | None = None, grid_points: int = 400,
              horizon: float | None = None) -> ExitStatistics:
    N = len(batch.tau)
    ex = batch.exited
    n_ex = int(ex.sum())
    mesh = domain.boundary_mesh() if mesh is None else np.asarray(mesh, dtype=float)
    hist = np.zeros(len(mesh))
    modes = np.zeros(n_modes)
    mean = se = None
    if n_ex:
        yy = batch.y[ex]
        nearest = np.argmin(np.linalg.norm(yy[:, None, :] - mesh[None], axis=-1), axis=1)
        hist = np.bincount(nearest, minlength=len(mesh)) / N
        modes = np.bincount(batch.mode[ex] - 1, minlength=n_modes) / n_ex
        mean = float(batch.tau[ex].mean())
        se = float(batch.tau[ex].std(ddof=1) / math.sqrt(n_ex)) if n_ex > 1 else 0.0
    t_end = float(batch.tau[ex].max()) if n_ex == N else float(horizon or (batch.tau[ex].max() if n_ex else 1.0))
    grid = np.linspace(0.0, t_end, grid_points + 1)
    tau_sorted = np.sort(batch.tau)
    survival = 1.0 - np.searchsorted(tau_sorted, grid, side="right") / N
    conc = conc_ex = conc_se = None
    y0 = None
    if y0_hint is not None:
        y0 = np.asarray(y0_hint, dtype=float).reshape(-1)
        if n_ex:
            near = np.linalg.norm(batch.y[ex] - y0, axis=-1) <= delta
            hits = int(near.sum())
        else:
            hits = 0
        conc = hits / N
        conc_ex = hits / n_ex if n_ex else None
        base = conc_ex if conc_ex is not None else conc
        denom = n_ex if n_ex else N
        conc_se = math.sqrt(max(base * (1 - base), 0.0) / denom)
    elif math.isinf(delta):
        conc = n_ex / N
        conc_ex = 1.0 if n_ex else None
    return ExitStatistics(N, n_ex, n_ex / N, mean, se, n_ex == 0, grid, survival, mesh, hist, modes,
                          float(delta), y0, conc, conc_ex, conc_se, trials=batch)


def run_monte_carlo(model: SwitchingModel, domain: DomainGeometry, eps: float, x0, k0_mode: int,
                    dt: float, horizon: float, N: int, base_seed: int, delta: float = math.inf,
                    y0_hint=None, workers: int = 1, mesh=None, rate_window: tuple | None = None,
                    bridge: bool = False) -> ExitStatistics:
    """``N`` trials from ``(x0, k0_mode)`` aggregated into :class:`ExitStatistics`.

    All trials censored marks the result ``degenerate`` (no mean exit time).
    The tail exit rate is estimated on ``rate_window`` or, by default, on the
    part of the survival curve between 0.3 and ``max(1e-3, 30/N)``.
    """
    batch = simulate_trials(model, domain, eps, x0, k0_mode, dt, horizon, N, base_seed, workers,
                            bridge=bridge)
    stats = aggregate(batch, domain, model.n, delta, y0_hint, mesh, horizon=horizon)
    stats.settings = {"eps": float(eps), "x0": np.asarray(x0, dtype=float).reshape(-1).tolist(),
                      "k0_mode": int(k0_mode), "dt": float(dt), "horizon": float(horizon),
                      "trials": int(N), "base_seed": int(base_seed)}
    window = rate_window or default_rate_window(stats)
    if window is not None:
        try:
            stats.rate, stats.rate_se = estimate_exit_rate(stats, window)
            stats.rate_window = tuple(window)
        except ValueError:
            pass
    return stats


def default_rate_window(stats: ExitStatistics, upper: float = 0.3, lower: float | None = None):
    """Time window where the survival curve lies between ``lower`` and ``upper``."""
    lower = max(1e-3, 30.0 / stats.n_trials) if lower is None else lower
    s = stats.survival
    inside = np.nonzero((s <= upper) & (s >= lower))[0]
    if len(inside) < 3:
        return None
    return float(stats.time_grid[inside[0]]), float(stats.time_grid[inside[-1]])


def estimate_exit_rate(stats: ExitStatistics, window: tuple[float, float]) -> tuple[float, float]:
    """Least-squares slope of ``-log P{tau > t}`` over ``window``, with its standard error."""
    t0, t1 = window
    t = stats.time_grid
    s = stats.survival
    sel = (t >= t0) & (t <= t1) & (s > 0)
    if sel.sum() < 3:
        raise ValueError("fewer than 3 usable survival points in the window")
    tt = t[sel]
    yy = -np.log(s[sel])
    tm = tt.mean()
    sxx = float(np.sum((tt - tm) ** 2))
    slope = float(np.sum((tt - tm) * (yy - yy.mean())) / sxx)
    resid = yy - (yy.mean() + slope * (tt - tm))
    dof = len(tt) - 2
    se = math.sqrt(float(np.sum(resid ** 2)) / dof / sxx) if dof > 0 else 0.0
    return slope, se


def pdmp_simulate(model: SwitchingModel, domain: DomainGeometry, x0, k0_mode: int, dt: float,
                  horizon: float, seed: int, max_jumps: int = 1_000_000) -> TrajectorySample:
    """The eps = 0 process: mode-wise flows with exactly timed jumps.

    Jump times invert the integrated jump hazard along the flow (trapezoidal
    rule on each step); the unscaled rates ``gamma_km`` are used.
    """
    x0 = _check_start(domain, x0)
    k0 = _check_mode(model, k0_mode)
    nsteps = _nsteps(horizon, dt)
    ks = _kernels.kernels(model, domain)
    cap = nsteps + 2 * min(max_jumps, 10 * nsteps) + 4
    rec_t = np.zeros(cap)
    rec_x = np.zeros((cap, model.d))
    rec_k = np.zeros(cap, dtype=np.int64)
    jumps = np.zeros(max_jumps)
    occ = np.zeros(model.n)
    y = np.zeros(model.d)
    bad = np.zeros(model.d)
    keyj = np.uint64(_rng.trial_key(seed, 0, _rng.STREAM_JUMP))
    st, tau, k, used, nj = ks["pdmp_trial"](keyj, x0, k0, float(dt), float(horizon), 1.0,
                                            rec_t, rec_x, rec_k, jumps, occ, y, bad)
    _raise_status(st, bad, 0.0)
    times = rec_t[:used].copy()
    states = rec_x[:used].copy()
    modes = rec_k[:used] + 1
    if st == _kernels.STATUS_EXITED:
        yb = domain.project(y)
        states[-1] = yb
        ev = ExitEvent("exited", float(tau), yb, int(k) + 1)
    else:
        ev = ExitEvent("censored", float(tau), states[-1].copy(), int(k) + 1)
    return TrajectorySample(times, states, modes, occ, ev, jumps[: min(nj, max_jumps)].copy())


@dataclass
class RepresentationEstimate:
    points: np.ndarray
    modes: list  # 1-based starting modes
    mean: np.ndarray  # (points, modes)
    se: np.ndarray
    n_exited: np.ndarray
    n_censored: np.ndarray
    horizon_too_short: bool

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "modes": list(self.modes),
                "mean": self.mean.tolist(), "se": self.se.tolist(),
                "n_exited": self.n_exited.tolist(), "n_censored": self.n_censored.tolist(),
                "horizon_too_short": bool(self.horizon_too_short)}


def stochastic_representation_estimate(model: SwitchingModel, domain: DomainGeometry, eps: float,
                                       points, boundary: BoundaryData, N: int, seed: int, dt: float,
                                       horizon: float, modes: Sequence[int] | None = None,
                                       workers: int = 1, bridge: bool = False) -> RepresentationEstimate:
    """Monte Carlo estimate of ``E[g_{zeta(tau)}(X(tau))]`` from each point and starting mode.

    Censored trials are excluded and counted; more than half censored at any
    start sets ``horizon_too_short``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, domain.d)
    modes = list(range(1, model.n + 1)) if modes is None else [int(m) for m in modes]
    P, M = len(pts), len(modes)
    mean = np.zeros((P, M))
    se = np.zeros((P, M))
    n_ex = np.zeros((P, M), dtype=int)
    n_cen = np.zeros((P, M), dtype=int)
    for i, p in enumerate(pts):
        for j, k in enumerate(modes):
            # disjoint trial ranges so every (point, mode) cell has its own noise
            first = (i * M + j) * N
            b = simulate_trials(model, domain, eps, p, k, dt, horizon, N, seed, workers, first_trial=first,
                                bridge=bridge)
            ex = b.exited
            n_ex[i, j] = int(ex.sum())
            n_cen[i, j] = N - n_ex[i, j]
            if n_ex[i, j] == 0:
                mean[i, j] = se[i, j] = np.nan
                continue
            gv = boundary.values(b.y[ex])[np.arange(n_ex[i, j]), b.mode[ex] - 1]
            mean[i, j] = gv.mean()
            se[i, j] = gv.std(ddof=1) / math.sqrt(n_ex[i, j]) if n_ex[i, j] > 1 else 0.0
    too_short = bool(np.any(n_cen > 0.5 * N))
    return RepresentationEstimate(pts, modes, mean, se, n_ex, n_cen, too_short)
