"""Generated numba kernels for the switching diffusion and its PDMP limit."""
from __future__ import annotations

import math
import threading

import numpy as np
from numba import njit

from . import fieldlang as fl
from . import rng as _rng
from .domain import DomainGeometry
from .model import SwitchingModel

STATUS_CENSORED = 0
STATUS_EXITED = 1
STATUS_RATE_BOUND = 2
STATUS_NONFINITE = 3
STATUS_CAPACITY = 4

_TEMPLATE = '''
@njit(nogil=True, inline='always')
def _bridge_probability(x, phi_old, phi_new, S, var, g):
    """Crossing probability of the bridge between two inside points; leaves grad phi(x) in ``g``."""
    d = x.shape[0]
    h = 1e-7 * (1.0 + abs(phi_old))
    gn = 0.0
    for i in range(d):
        xi = x[i]
        x[i] = xi + h
        fp = phi(x)
        x[i] = xi - h
        fm = phi(x)
        x[i] = xi
        g[i] = (fp - fm) / (2.0 * h)
        gn += g[i] * g[i]
    if gn <= 0.0:
        return 0.0
    gn = math.sqrt(gn)
    v = 0.0
    for j in range(d):
        c = 0.0
        for i in range(d):
            c += g[i] * S[i, j]
        v += (c / gn) ** 2
    v *= var
    if v <= 0.0:
        return 0.0
    return math.exp(-2.0 * (phi_old / gn) * (phi_new / gn) / v)


@njit(nogil=True)
def diffusion_trial(keyn, keyj, keyb, bridge, x0, k0, eps, dt, nsteps, rf, lam,
                    record, rec_x, rec_k, occ, y, xbad):
    d = x0.shape[0]
    x = x0.copy()
    xn = np.empty(d)
    g = np.empty(d)
    f = np.empty(d)
    S = np.empty((d, d))
    sq = math.sqrt(eps * dt)
    k = k0
    for i in range(occ.shape[0]):
        occ[i] = 0.0
    jc = 0
    if lam > 0.0:
        next_prop = -math.log(uniform(keyj, 0)) / lam
        jc = 1
    else:
        next_prop = math.inf
    if record:
        for i in range(d):
            rec_x[0, i] = x[i]
        rec_k[0] = k
    phi_old = phi(x)
    for step in range(nsteps):
        t = step * dt
        t_end = t + dt
        # jumps proposed inside this step act before the diffusion move
        while next_prop < t_end:
            tot = total_rate(k, x) * rf
            if tot > lam:
                for i in range(d):
                    xbad[i] = x[i]
                return 2, next_prop, k, step
            u = uniform(keyj, jc)
            v = uniform(keyj, jc + 1)
            jc += 2
            if u * lam < tot:
                target = v * tot
                acc = 0.0
                new_k = k
                for m in range(occ.shape[0]):
                    if m != k:
                        acc += rate(k, m, x) * rf
                        new_k = m
                        if target < acc:
                            break
                k = new_k
            next_prop += -math.log(uniform(keyj, jc)) / lam
            jc += 1
        drift(k, x, f)
        sigma(k, x, S)
        base = step * d
        for i in range(d):
            xn[i] = x[i] + f[i] * dt
        if eps > 0.0:
            for j in range(d):
                z = normal(keyn, base + j)
                for i in range(d):
                    xn[i] += sq * S[i, j] * z
        for i in range(d):
            if not math.isfinite(xn[i]):
                for q in range(d):
                    xbad[q] = x[q]
                return 3, t, k, step
        phi_new = phi(xn)
        if phi_new >= 0.0:
            theta = phi_old / (phi_old - phi_new)
            if theta < 0.0:
                theta = 0.0
            for i in range(d):
                y[i] = x[i] + theta * (xn[i] - x[i])
            occ[k] += theta * dt
            if record:
                for i in range(d):
                    rec_x[step + 1, i] = y[i]
                rec_k[step + 1] = k
            return 1, t + theta * dt, k, step + 1
        if bridge and eps > 0.0:
            # Brownian-bridge test for an excursion between two inside points
            pb = _bridge_probability(x, phi_old, phi_new, S, eps * dt, g)
            if pb > 1e-300 and uniform(keyb, step) < pb:
                gn = 0.0
                for i in range(d):
                    gn += g[i] * g[i]
                for i in range(d):
                    y[i] = 0.5 * (x[i] + xn[i])
                shift = phi(y) / gn
                for i in range(d):
                    y[i] -= shift * g[i]
                occ[k] += 0.5 * dt
                if record:
                    for i in range(d):
                        rec_x[step + 1, i] = y[i]
                    rec_k[step + 1] = k
                return 1, t + 0.5 * dt, k, step + 1
        occ[k] += dt
        for i in range(d):
            x[i] = xn[i]
        phi_old = phi_new
        if record:
            for i in range(d):
                rec_x[step + 1, i] = x[i]
            rec_k[step + 1] = k
    for i in range(d):
        y[i] = x[i]
    return 0, nsteps * dt, k, nsteps


@njit(nogil=True)
def run_block(first, count, keys_n, keys_j, keys_b, bridge, x0, k0, eps, dt, nsteps, rf, lam,
              out_status, out_tau, out_mode, out_y, out_occ, out_bad):
    d = x0.shape[0]
    dummy_x = np.empty((1, d))
    dummy_k = np.empty(1, dtype=np.int64)
    for j in range(count):
        i = first + j
        st, tau, k, _ = diffusion_trial(keys_n[i], keys_j[i], keys_b[i], bridge, x0, k0, eps, dt, nsteps, rf, lam,
                                        False, dummy_x, dummy_k, out_occ[i], out_y[i], out_bad[i])
        out_status[i] = st
        out_tau[i] = tau
        out_mode[i] = k


@njit(nogil=True)
def _rk4(k, x, h, out, k1, k2, k3, k4, tmp):
    d = x.shape[0]
    drift(k, x, k1)
    for i in range(d):
        tmp[i] = x[i] + 0.5 * h * k1[i]
    drift(k, tmp, k2)
    for i in range(d):
        tmp[i] = x[i] + 0.5 * h * k2[i]
    drift(k, tmp, k3)
    for i in range(d):
        tmp[i] = x[i] + h * k3[i]
    drift(k, tmp, k4)
    for i in range(d):
        out[i] = x[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@njit(nogil=True)
def pdmp_trial(keyj, x0, k0, dt, horizon, rf, rec_t, rec_x, rec_k, jumps, occ, y, xbad):
    d = x0.shape[0]
    n = occ.shape[0]
    x = x0.copy()
    xn = np.empty(d)
    xs = np.empty(d)
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    tmp = np.empty(d)
    cap = rec_t.shape[0]
    jcap = jumps.shape[0]
    for i in range(n):
        occ[i] = 0.0
    k = k0
    t = 0.0
    jc = 0
    nj = 0
    level = -math.log(uniform(keyj, jc))
    jc += 1
    cum = 0.0
    rec_t[0] = 0.0
    for i in range(d):
        rec_x[0, i] = x[i]
    rec_k[0] = k
    r = 1
    phi_old = phi(x)
    while t < horizon - 1e-12:
        h = dt
        if t + h > horizon:
            h = horizon - t
        rate_a = total_rate(k, x) * rf
        _rk4(k, x, h, xn, k1, k2, k3, k4, tmp)
        for i in range(d):
            if not math.isfinite(xn[i]):
                for q in range(d):
                    xbad[q] = x[q]
                return 3, t, k, r, nj
        rate_b = total_rate(k, xn) * rf
        inc = 0.5 * (rate_a + rate_b) * h
        phi_new = phi(xn)
        theta_e = 2.0
        if phi_new >= 0.0:
            theta_e = phi_old / (phi_old - phi_new)
        theta_j = 2.0
        if n > 1 and cum + inc >= level and inc > 0.0:
            # invert the trapezoidal hazard: rate_a*s + (rate_b-rate_a)*s^2/2 = level-cum
            need = (level - cum) / h
            a2 = 0.5 * (rate_b - rate_a)
            if abs(a2) < 1e-14 * (abs(rate_a) + 1e-300):
                theta_j = need / rate_a
            else:
                disc = rate_a * rate_a + 4.0 * a2 * need
                if disc < 0.0:
                    disc = 0.0
                theta_j = (-rate_a + math.sqrt(disc)) / (2.0 * a2)
            if theta_j < 0.0:
                theta_j = 0.0
            if theta_j > 1.0:
                theta_j = 1.0
        if r >= cap - 1:
            return 4, t, k, r, nj
        if theta_e <= theta_j and theta_e <= 1.0:
            for i in range(d):
                y[i] = x[i] + theta_e * (xn[i] - x[i])
            occ[k] += theta_e * h
            t += theta_e * h
            rec_t[r] = t
            for i in range(d):
                rec_x[r, i] = y[i]
            rec_k[r] = k
            return 1, t, k, r + 1, nj
        if theta_j <= 1.0:
            hs = theta_j * h
            _rk4(k, x, hs, xs, k1, k2, k3, k4, tmp)
            occ[k] += hs
            t += hs
            for i in range(d):
                x[i] = xs[i]
            u = uniform(keyj, jc)
            jc += 1
            tot = total_rate(k, x)
            target = u * tot
            acc = 0.0
            new_k = k
            for m in range(n):
                if m != k:
                    acc += rate(k, m, x)
                    new_k = m
                    if target < acc:
                        break
            k = new_k
            if nj < jcap:
                jumps[nj] = t
            nj += 1
            level = -math.log(uniform(keyj, jc))
            jc += 1
            cum = 0.0
            phi_old = phi(x)
            rec_t[r] = t
            for i in range(d):
                rec_x[r, i] = x[i]
            rec_k[r] = k
            r += 1
            continue
        cum += inc
        occ[k] += h
        t += h
        for i in range(d):
            x[i] = xn[i]
        phi_old = phi_new
        rec_t[r] = t
        for i in range(d):
            rec_x[r, i] = x[i]
        rec_k[r] = k
        r += 1
    for i in range(d):
        y[i] = x[i]
    return 0, t, k, r, nj
'''


def _field_functions(model: SwitchingModel, domain: DomainGeometry) -> str:
    d, n = model.d, model.n
    unpack = "\n".join(f"    x{i + 1} = x[{i}]" for i in range(d))
    src = []

    lines = ["@njit(nogil=True, inline='always')", "def drift(k, x, out):", unpack]
    for k, mode in enumerate(model.modes):
        lines.append(f"    {'if' if k == 0 else 'elif'} k == {k}:")
        for i, f in enumerate(mode.drift_fields):
            lines.append(f"        out[{i}] = {fl.to_source(f.expr, 'math')}")
    src.append("\n".join(lines))

    lines = ["@njit(nogil=True, inline='always')", "def sigma(k, x, out):", unpack]
    for k, mode in enumerate(model.modes):
        lines.append(f"    {'if' if k == 0 else 'elif'} k == {k}:")
        for i, row in enumerate(mode.sigma_fields):
            for j, f in enumerate(row):
                lines.append(f"        out[{i}, {j}] = {fl.to_source(f.expr, 'math')}")
    src.append("\n".join(lines))

    lines = ["@njit(nogil=True, inline='always')", "def rate(k, m, x):", unpack]
    for k in range(n):
        for m in range(n):
            if k != m:
                lines.append(f"    if k == {k} and m == {m}:")
                lines.append(f"        return {fl.to_source(model.rate_fields[k][m].expr, 'math')}")
    lines.append("    return 0.0")
    src.append("\n".join(lines))

    lines = ["@njit(nogil=True, inline='always')", "def total_rate(k, x):", unpack]
    for k in range(n):
        terms = [fl.to_source(model.rate_fields[k][m].expr, "math") for m in range(n) if m != k]
        if terms:
            lines.append(f"    if k == {k}:")
            lines.append(f"        return {' + '.join(terms)}")
    lines.append("    return 0.0")
    src.append("\n".join(lines))

    src.append("@njit(nogil=True, inline='always')\ndef phi(x):\n" + domain.phi_source())
    return "\n\n\n".join(src)


_CACHE: dict[str, dict] = {}
_LOCK = threading.Lock()


def kernels(model: SwitchingModel, domain: DomainGeometry) -> dict:
    """Compiled kernels for this (model, domain) pair, cached by generated source."""
    src = _field_functions(model, domain) + "\n\n" + _TEMPLATE
    with _LOCK:
        ns = _CACHE.get(src)
        if ns is None:
            ns = {"np": np, "math": math, "njit": njit,
                  "uniform": _rng.uniform, "normal": _rng.normal}
            exec(compile(src, "<exitlab-kernels>", "exec"), ns)
            _CACHE[src] = ns
    return ns
