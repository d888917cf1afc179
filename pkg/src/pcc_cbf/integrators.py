"""Fixed-step integration of the PCC dynamics under a constant input.

Two schemes share one interface:

``rk4``
    Classical fourth-order Runge-Kutta on ``(q, qd)``.
``imex``
    The second-order, L-stable ARS(2,2,2) implicit-explicit scheme. Damping
    ``-M^-1 D qd`` is taken implicitly (a linear solve per stage) and the rest
    explicitly. The damping of soft segments is orders of magnitude faster than
    any other time scale, which puts RK4's stability limit near microseconds.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .dynamics import REFINE_STEPS, REGULARIZATION, _terms_kernel
from .model import RobotModel

METHODS = ("rk4", "imex")

_GAMMA = 1.0 - 1.0 / math.sqrt(2.0)
_DELTA = 1.0 - 1.0 / (2.0 * _GAMMA)


@njit(cache=True)
def _cholesky(A):
    """Lower Cholesky factor of symmetric ``A``; NaNs if ``A`` is not positive definite."""
    n = A.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return np.full((n, n), np.nan)
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, n):
            t = A[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / L[j, j]
    return L


@njit(cache=True)
def _cho_apply(L, b):
    n = b.shape[0]
    y = np.zeros(n)
    for i in range(n):
        t = b[i]
        for k in range(i):
            t -= L[i, k] * y[k]
        y[i] = t / L[i, i]
    x = np.zeros(n)
    for i in range(n - 1, -1, -1):
        t = y[i]
        for k in range(i + 1, n):
            t -= L[k, i] * x[k]
        x[i] = t / L[i, i]
    return x


@njit(cache=True)
def _solve_spd(A, b, lam):
    """Solve ``A x = b`` through the factor of ``A + lam I`` plus refinement against ``A``."""
    n = A.shape[0]
    Areg = A.copy()
    for i in range(n):
        Areg[i, i] += lam
    L = _cholesky(Areg)
    x = _cho_apply(L, b)
    for _ in range(REFINE_STEPS):
        x = x + _cho_apply(L, b - A @ x)
    return x


@njit(cache=True)
def _floor(M):
    return REGULARIZATION * np.trace(M) / M.shape[0]


@njit(cache=True)
def _accel(q, v, tau, L0s, ds, masses, gravity, kdiag, ddiag):
    M, C, G = _terms_kernel(q, v, L0s, ds, masses, gravity)
    rhs = tau - C @ v - G - kdiag * q - ddiag * v
    return _solve_spd(M, rhs, _floor(M))


@njit(cache=True)
def _rk4(q, v, tau, nsteps, h, L0s, ds, masses, gravity, kdiag, ddiag):
    for _ in range(nsteps):
        a1 = _accel(q, v, tau, L0s, ds, masses, gravity, kdiag, ddiag)
        q2 = q + 0.5 * h * v
        v2 = v + 0.5 * h * a1
        a2 = _accel(q2, v2, tau, L0s, ds, masses, gravity, kdiag, ddiag)
        q3 = q + 0.5 * h * v2
        v3 = v + 0.5 * h * a2
        a3 = _accel(q3, v3, tau, L0s, ds, masses, gravity, kdiag, ddiag)
        q4 = q + h * v3
        v4 = v + h * a3
        a4 = _accel(q4, v4, tau, L0s, ds, masses, gravity, kdiag, ddiag)
        q = q + (h / 6.0) * (v + 2 * v2 + 2 * v3 + v4)
        v = v + (h / 6.0) * (a1 + 2 * a2 + 2 * a3 + a4)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v))):
            break
    return q, v


@njit(cache=True)
def _explicit_part(q, v, tau, L0s, ds, masses, gravity, kdiag):
    M, C, G = _terms_kernel(q, v, L0s, ds, masses, gravity)
    return _solve_spd(M, tau - C @ v - G - kdiag * q, _floor(M))


@njit(cache=True)
def _implicit_velocity(q, rhs, hg, L0s, ds, masses, gravity, ddiag):
    # (M + h*gamma*D) V = M rhs
    M, _, _ = _terms_kernel(q, rhs, L0s, ds, masses, gravity)
    A = M.copy()
    for i in range(A.shape[0]):
        A[i, i] += hg * ddiag[i]
    return _solve_spd(A, M @ rhs, _floor(M))


@njit(cache=True)
def _imex(q, v, tau, nsteps, h, gamma, delta, L0s, ds, masses, gravity, kdiag, ddiag):
    hg = h * gamma
    for _ in range(nsteps):
        e1 = _explicit_part(q, v, tau, L0s, ds, masses, gravity, kdiag)
        q2 = q + hg * v
        r2 = v + hg * e1
        v2 = _implicit_velocity(q2, r2, hg, L0s, ds, masses, gravity, ddiag)
        i2 = (v2 - r2) / hg
        e2 = _explicit_part(q2, v2, tau, L0s, ds, masses, gravity, kdiag)
        q3 = q + h * (delta * v + (1.0 - delta) * v2)
        r3 = v + h * (delta * e1 + (1.0 - delta) * e2) + h * (1.0 - gamma) * i2
        v = _implicit_velocity(q3, r3, hg, L0s, ds, masses, gravity, ddiag)
        q = q3
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v))):
            break
    return q, v


def substeps(dt_total: float, dt_sub: float) -> tuple[int, float]:
    """Number of equal substeps no longer than ``dt_sub`` that tile ``dt_total``."""
    if not (dt_total > 0 and dt_sub > 0):
        raise ValueError("step sizes must be positive")
    if dt_sub > dt_total * (1 + 1e-12):
        raise ValueError(f"substep {dt_sub} exceeds interval {dt_total}")
    n = max(1, math.ceil(dt_total / dt_sub - 1e-9))
    return n, dt_total / n


def integrate(q, qdot, tau, model: RobotModel, dt_total: float, dt_sub: float, method: str = "rk4"):
    """Advance ``(q, qd)`` by ``dt_total`` with ``tau`` held constant.

    Returns the new ``(q, qd)``; entries are non-finite if the run diverged.
    """
    n, h = substeps(dt_total, dt_sub)
    arr = model.arrays
    q = np.array(q, dtype=float)
    v = np.array(qdot, dtype=float)
    tau = np.asarray(tau, dtype=float)
    args = (arr.L0, arr.d, arr.mass, arr.gravity, arr.stiffness, arr.damping)
    if method == "rk4":
        return _rk4(q, v, tau, n, h, *args)
    if method == "imex":
        return _imex(q, v, tau, n, h, _GAMMA, _DELTA, *args)
    raise ValueError(f"unknown integrator {method!r}; expected one of {METHODS}")
