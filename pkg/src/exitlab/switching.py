"""Generator matrix, stationary distribution, averaged field and deterministic flows."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .domain import DomainGeometry
from .model import SwitchingModel

__all__ = [
    "RateError", "FlowDivergence", "Flow", "generator_from_rates", "generator_matrix",
    "stationary_distribution", "averaged_field", "flow", "invariant_set_check",
    "find_equilibrium",
]


class RateError(ValueError):
    pass


class FlowDivergence(ArithmeticError):
    """Raised when a flow produces a non-finite state; ``partial`` holds the valid prefix."""

    def __init__(self, message: str, partial: "Flow"):
        super().__init__(message)
        self.partial = partial


def generator_from_rates(rates: np.ndarray, check: bool = True) -> np.ndarray:
    """Build ``Gamma`` from off-diagonal rates of shape ``(..., n, n)``."""
    n = rates.shape[-1]
    off = rates * (1.0 - np.eye(n))
    if check and n > 1:
        mask = ~np.eye(n, dtype=bool)
        bad = (off <= 0) & mask
        if np.any(bad):
            idx = np.argwhere(bad)[0]
            k, m = int(idx[-2]) + 1, int(idx[-1]) + 1
            raise RateError(f"nonpositive rate gamma_{k}{m} = {off[tuple(idx)]!r}")
    G = off.copy()
    diag = -off.sum(axis=-1)
    idx = np.arange(n)
    G[..., idx, idx] = diag
    return G


def generator_matrix(model: SwitchingModel, x) -> np.ndarray:
    """``Gamma(x)``: off-diagonal ``gamma_km(x)``, rows summing to zero.

    Accepts a single point ``(d,)`` or a batch ``(..., d)``.
    """
    return generator_from_rates(model.rates(np.asarray(x, dtype=float)))


def stationary_distribution(G: np.ndarray) -> np.ndarray:
    """Unique probability vector ``omega`` with ``omega @ G = 0``.

    Solves ``G^T omega = 0`` with the last equation replaced by
    ``sum(omega) = 1``.  Works on batches of generators.
    """
    G = np.asarray(G, dtype=float)
    n = G.shape[-1]
    if n == 1:
        return np.ones(G.shape[:-1])
    A = np.swapaxes(G, -1, -2).copy()
    A[..., -1, :] = 1.0
    b = np.zeros(G.shape[:-1])
    b[..., -1] = 1.0
    w = np.linalg.solve(A, b[..., None])[..., 0]
    resid = np.max(np.abs(np.einsum("...k,...km->...m", w, G)))
    if not np.all(np.isfinite(w)) or resid > 1e-8 * max(1.0, np.max(np.abs(G))):
        raise np.linalg.LinAlgError(f"stationary distribution residual {resid:.3e}")
    return w


def averaged_field(model: SwitchingModel, x) -> np.ndarray:
    """``f_av(x) = sum_k omega_k(x) f_k(x)`` for a point or a batch of points."""
    x = np.asarray(x, dtype=float)
    w = stationary_distribution(generator_matrix(model, x))
    return np.einsum("...k,...kd->...d", w, model.drifts(x))


@dataclass
class Flow:
    times: np.ndarray
    states: np.ndarray  # (steps + 1, ..., d)

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]


def flow(field: Callable[[np.ndarray], np.ndarray], x0, T: float, dt: float) -> Flow:
    """Integrate ``x' = field(x)`` with the classical fourth-order Runge-Kutta scheme.

    ``x0`` may be a single point or a batch; ``field`` must broadcast over
    leading axes.  The last step is shortened so the flow ends exactly at ``T``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if T < 0:
        raise ValueError("T must be nonnegative")
    x = np.array(x0, dtype=float)
    steps = int(np.ceil(T / dt - 1e-12)) if T > 0 else 0
    times = np.minimum(np.arange(steps + 1) * dt, T)
    states = np.empty((steps + 1,) + x.shape)
    states[0] = x
    for i in range(steps):
        h = times[i + 1] - times[i]
        k1 = field(x)
        k2 = field(x + 0.5 * h * k1)
        k3 = field(x + 0.5 * h * k2)
        k4 = field(x + h * k3)
        nxt = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(nxt)):
            raise FlowDivergence(f"non-finite state at t = {times[i + 1]:.6g}",
                                 Flow(times[: i + 1], states[: i + 1]))
        x = nxt
        states[i + 1] = x
    return Flow(times, states)


def invariant_set_check(field: Callable, domain: DomainGeometry, starts: Sequence, T: float,
                        dt: float) -> dict:
    """Report which flows started in ``D`` stay in the closure of ``D`` up to ``T``.

    The overall flag is true when at least one trajectory stays, a witness that
    the flow has a non-empty invariant set in the closed domain.
    """
    starts = np.asarray(starts, dtype=float).reshape(-1, domain.d) if len(starts) else np.zeros((0, domain.d))
    if len(starts) == 0:
        return {"contained": [], "exit_times": [], "any_contained": False, "n_starts": 0}
    fl = flow(field, starts, T, dt)
    outside = domain.phi(fl.states) > 1e-12  # (steps+1, S)
    contained = ~outside.any(axis=0)
    exit_times = []
    for j in range(len(starts)):
        hit = np.nonzero(outside[:, j])[0]
        exit_times.append(None if len(hit) == 0 else float(fl.times[hit[0]]))
    return {"contained": contained.tolist(), "exit_times": exit_times,
            "any_contained": bool(contained.any()), "n_starts": int(len(starts))}


def find_equilibrium(model: SwitchingModel, guess, tol: float = 1e-12) -> np.ndarray:
    """Zero of the averaged field near ``guess`` (flow relaxation, then Newton)."""
    from scipy.optimize import root

    x = np.asarray(guess, dtype=float)
    fl = flow(lambda z: averaged_field(model, z), x, 20.0, 0.01)
    sol = root(lambda z: averaged_field(model, z), fl.endpoint, tol=tol)
    return np.asarray(sol.x, dtype=float)
