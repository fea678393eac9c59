"""
Counter-based random numbers keyed by (seed, trial, stream).

Every draw is a pure function of its key and a counter, so a trial's noise
does not depend on which worker ran it or in what order.  The mixing
function is the SplitMix64 finalizer.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit, uint64

_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1

STREAM_NORMAL = 0
STREAM_JUMP = 1
STREAM_EXTRA = 2


def mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def trial_key(seed: int, trial: int, stream: int) -> int:
    """64-bit key for one (seed, trial, stream) triple."""
    k = mix64(int(seed) & _MASK)
    k = mix64(k ^ ((int(trial) * _GOLDEN) & _MASK))
    return mix64(k ^ ((int(stream) * _M1 + 1) & _MASK))


def uniform_py(key: int, counter: int) -> float:
    z = mix64((key + counter * _GOLDEN) & _MASK)
    return ((z >> 11) + 0.5) * 2.0 ** -53


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> uint64(30))) * uint64(_M1)
    z = (z ^ (z >> uint64(27))) * uint64(_M2)
    return z ^ (z >> uint64(31))


@njit(cache=True, inline="always")
def uniform(key, counter):
    """Uniform draw in (0, 1) for ``counter`` under ``key``."""
    z = _mix(key + uint64(counter) * uint64(_GOLDEN))
    return (float(z >> uint64(11)) + 0.5) * 1.1102230246251565e-16


@njit(cache=True, inline="always")
def normal(key, index):
    """Standard normal draw number ``index`` (Box-Muller over counter pairs)."""
    pair = index // 2
    u1 = uniform(key, 2 * pair)
    u2 = uniform(key, 2 * pair + 1)
    r = math.sqrt(-2.0 * math.log(u1))
    if index % 2 == 0:
        return r * math.cos(2.0 * math.pi * u2)
    return r * math.sin(2.0 * math.pi * u2)


@njit(cache=True)
def uniforms(key, start, count):
    out = np.empty(count)
    for i in range(count):
        out[i] = uniform(key, start + i)
    return out


@njit(cache=True)
def normals(key, start, count):
    out = np.empty(count)
    for i in range(count):
        out[i] = normal(key, start + i)
    return out
