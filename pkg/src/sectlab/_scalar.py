"""Scalar smooth-profile functions shared by the plain and compiled paths.

Everything here is scalar float -> float and free of Python objects so the
same definitions can be jitted for the orbit kernels.  The vectorised wrappers
live in field_library.
"""

import os

try:
    if os.environ.get("SECTLAB_NO_NUMBA"):
        raise ImportError
    from numba import njit as _njit

    def njit(f):
        return _njit(cache=True)(f)

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via SECTLAB_NO_NUMBA
    def njit(f):
        return f

    HAVE_NUMBA = False

import math


@njit
def sigma(t):
    # exp(-1/t) on t > 0, identically 0 for t <= 0; C-infinity at 0
    if t <= 0.0:
        return 0.0
    return math.exp(-1.0 / t)


@njit
def sigma_d1(t):
    if t <= 0.0:
        return 0.0
    return math.exp(-1.0 / t) / (t * t)


@njit
def sigma_d2(t):
    if t <= 0.0:
        return 0.0
    return math.exp(-1.0 / t) * (1.0 - 2.0 * t) / (t * t * t * t)


@njit
def step(u):
    """Smooth monotone 0 -> 1 transition on [0, 1]."""
    a = sigma(u)
    b = sigma(1.0 - u)
    return a / (a + b)


@njit
def step_d1(u):
    if u <= 0.0 or u >= 1.0:
        return 0.0
    a = sigma(u)
    b = sigma(1.0 - u)
    da = sigma_d1(u)
    db = sigma_d1(1.0 - u)
    s = a + b
    return (da * b + a * db) / (s * s)


@njit
def step_d2(u):
    if u <= 0.0 or u >= 1.0:
        return 0.0
    a = sigma(u)
    b = sigma(1.0 - u)
    da = sigma_d1(u)
    db = sigma_d1(1.0 - u)
    d2a = sigma_d2(u)
    d2b = sigma_d2(1.0 - u)
    s = a + b
    ds = da - db
    n = da * b + a * db
    # d/du [n / s^2]
    dn = d2a * b - da * db + da * db - a * d2b  # = d2a*b - a*d2b
    return dn / (s * s) - 2.0 * n * ds / (s * s * s)


@njit
def bump(t, a, b):
    """Even plateau bump: 1 on |t|<=a, 0 on |t|>=b, monotone between."""
    x = abs(t)
    if x <= a:
        return 1.0
    if x >= b:
        return 0.0
    return 1.0 - step((x - a) / (b - a))


@njit
def bump_d1(t, a, b):
    x = abs(t)
    if x <= a or x >= b:
        return 0.0
    s = 1.0 if t > 0.0 else -1.0
    return -s * step_d1((x - a) / (b - a)) / (b - a)


@njit
def bump_d2(t, a, b):
    x = abs(t)
    if x <= a or x >= b:
        return 0.0
    w = b - a
    return -step_d2((x - a) / w) / (w * w)
