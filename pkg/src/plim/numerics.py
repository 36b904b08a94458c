"""Shared low-level numerics: RK4 stepping and Gauss-Legendre rules."""

import numpy as np

from .errors import IntegrationDivergedError


def rk4_step(f, y, h):
    """One classical Runge-Kutta step of size h for an autonomous rhs."""
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_trajectory(f, y0, dt, t_end, t0=0.0):
    """Fixed-step RK4 from t0 to t_end; the final step is shortened to land
    exactly on t_end.

    Returns (t, Y) with Y[k] the state at t[k]; Y[0] == y0. Raises
    IntegrationDivergedError if a non-finite state appears, carrying the last
    finite state.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    span = t_end - t0
    if span < 0:
        raise ValueError("t_end must be >= t0")
    n = int(np.ceil(span / dt - 1e-12)) if span > 0 else 0
    y0 = np.asarray(y0, dtype=float)
    t = np.empty(n + 1)
    Y = np.empty((n + 1, y0.size))
    t[0] = t0
    Y[0] = y0
    y = y0
    for k in range(n):
        h = dt if k < n - 1 else t_end - (t0 + k * dt)
        y = rk4_step(f, y, h)
        if not np.all(np.isfinite(y)):
            raise IntegrationDivergedError(t0 + k * dt, Y[k].copy())
        t[k + 1] = t0 + (k + 1) * dt if k < n - 1 else t_end
        Y[k + 1] = y
    return t, Y


def gauss_rule(n):
    """Gauss-Legendre nodes and weights on [-1, 1]."""
    return np.polynomial.legendre.leggauss(n)


def gauss_rule_on(a, b, n):
    """Gauss-Legendre nodes and weights mapped to [a, b]."""
    x, w = gauss_rule(n)
    return 0.5 * (a + b) + 0.5 * (b - a) * x, 0.5 * (b - a) * w


def make_rng(seed):
    """Counter-based generator keyed by seed; replayable across platforms."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))
