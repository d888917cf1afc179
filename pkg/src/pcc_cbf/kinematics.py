"""Piecewise-constant-curvature geometry in the (Delta_x, Delta_y, delta_L) coordinates.

Everything here is written in terms of two entire functions of
``u = theta**2``::

    g(u) = sin(theta) / theta
    h(u) = (1 - cos(theta)) / theta**2

so the transform, the corner heights and all of their derivatives are smooth
through the straight configuration. Below ``SERIES_SWITCH`` both functions and
their first two u-derivatives come from truncated power series, above it from
the closed forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .model import RobotModel, SegmentParams

SERIES_SWITCH = 1.0  # rad; series below, closed forms above
_N_TERMS = 16  # truncation error below u**16 / 33! at theta < 1

_G = np.array([(-1) ** k / math.factorial(2 * k + 1) for k in range(_N_TERMS)])
_H = np.array([(-1) ** k / math.factorial(2 * k + 2) for k in range(_N_TERMS)])


@njit(cache=True)
def _series(coef, u):
    f = f1 = f2 = 0.0
    for k in range(coef.shape[0] - 1, -1, -1):
        if k >= 2:
            f2 = f2 * u + k * (k - 1) * coef[k]
        if k >= 1:
            f1 = f1 * u + k * coef[k]
        f = f * u + coef[k]
    return f, f1, f2


@njit(cache=True)
def _curvature(u):
    if u < SERIES_SWITCH * SERIES_SWITCH:
        g, g1, g2 = _series(_G, u)
        h, h1, h2 = _series(_H, u)
        return g, g1, g2, h, h1, h2
    t = math.sqrt(u)
    s, c = math.sin(t), math.cos(t)
    g = s / t
    g1 = (t * c - s) / (2 * t**3)
    g2 = (3 * s - 3 * t * c - t * t * s) / (4 * t**5)
    h = (1 - c) / u
    h1 = (t * s - 2 + 2 * c) / (2 * u * u)
    h2 = (u * c - 5 * t * s + 8 - 8 * c) / (4 * u**3)
    return g, g1, g2, h, h1, h2


def curvature_functions(u: float) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
    """Return ``(g, g', g'')`` and ``(h, h', h'')`` at ``u = theta**2``.

    Derivatives are taken with respect to ``u``, not theta.
    """
    g, g1, g2, h, h1, h2 = _curvature(float(u))
    return (g, g1, g2), (h, h1, h2)


def bend_angle(delta_x: float, delta_y: float, d: float) -> float:
    return math.hypot(delta_x, delta_y) / d


def _u_jet(dx, dy, d):
    inv = 1.0 / (d * d)
    u = (dx * dx + dy * dy) * inv
    du = np.array([2 * dx * inv, 2 * dy * inv, 0.0])
    ddu = np.diag([2 * inv, 2 * inv, 0.0])
    return u, du, ddu


def _times(F, du, ddu, p, dp, ddp):
    """Value, gradient and Hessian of ``F(u(q)) * P(q)`` given the jets of both factors.

    ``p``, ``dp``, ``ddp`` may carry a leading batch axis.
    """
    f, f1, f2 = F
    p = np.asarray(p, dtype=float)
    pe = p[..., None]
    val = f * p
    grad = f1 * du * pe + f * dp
    outer_u = np.outer(du, du)
    cross = du[:, None] * dp[..., None, :] + dp[..., :, None] * du[None, :]
    hess = (f2 * outer_u + f1 * ddu) * pe[..., None] + f1 * cross + f * ddp
    return val, grad, hess


def _corner_terms(q_i, params: SegmentParams):
    dx, dy, dl = (float(v) for v in q_i)
    phi = np.asarray(params.phi)
    k = params.r / params.d
    a = params.L0 + dl - k * (dx * np.cos(phi) + dy * np.sin(phi))
    da = np.stack([-k * np.cos(phi), -k * np.sin(phi), np.ones(6)], axis=1)
    return dx, dy, a, da


def corner_jets(q_i, params: SegmentParams):
    """Heights, Jacobian rows and Hessians of the six plate corners of one segment.

    Returns arrays of shape (6,), (6, 3) and (6, 3, 3).
    """
    dx, dy, a, da = _corner_terms(q_i, params)
    u, du, ddu = _u_jet(dx, dy, params.d)
    G, _ = curvature_functions(u)
    return _times(G, du, ddu, a, da, np.zeros((6, 3, 3)))


def corner_heights(q_i, params: SegmentParams) -> np.ndarray:
    dx, dy, a, _ = _corner_terms(q_i, params)
    (g, _, _), _ = curvature_functions((dx * dx + dy * dy) / params.d**2)
    return g * a


def corner_height(q_i, params: SegmentParams, j: int) -> float:
    """z-height of plate corner ``j`` above the segment's base plate."""
    _check_corner(j)
    return float(corner_heights(q_i, params)[j])


def corner_jacobian(q_i, params: SegmentParams, j: int) -> np.ndarray:
    _check_corner(j)
    return corner_jets(q_i, params)[1][j]


def corner_jacobian_dot(q_i, qdot_i, params: SegmentParams, j: int) -> np.ndarray:
    _check_corner(j)
    hess = corner_jets(q_i, params)[2][j]
    return hess @ np.asarray(qdot_i, dtype=float)


def _check_corner(j):
    if not 0 <= j < 6:
        raise IndexError(f"corner index {j} outside 0..5")


def segment_transform(q_i, params: SegmentParams, s: float = 1.0) -> np.ndarray:
    """Homogeneous transform from the segment base to the cross-section at arc fraction ``s``.

    The partial arc shares the full segment's curvature: bending coordinates and
    arc length are both scaled by ``s``.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"arc fraction {s!r} outside [0, 1]")
    dx, dy, dl = (float(v) for v in q_i)
    d = params.d
    dx, dy, length = s * dx, s * dy, s * (params.L0 + dl)
    (g, _, _), (h, _, _) = curvature_functions((dx * dx + dy * dy) / d**2)
    T = np.eye(4)
    T[0, 0] = 1 - h * dx * dx / d**2
    T[1, 1] = 1 - h * dy * dy / d**2
    T[0, 1] = T[1, 0] = -h * dx * dy / d**2
    T[0, 2] = g * dx / d
    T[1, 2] = g * dy / d
    T[2, 0] = -T[0, 2]
    T[2, 1] = -T[1, 2]
    T[2, 2] = 1 - h * (dx * dx + dy * dy) / d**2
    T[0, 3] = h * dx * length / d
    T[1, 3] = h * dy * length / d
    T[2, 3] = g * length
    return T


# Non-constant entries of the segment transform. Each is sign * F(u) * P(q) with
# F = g where _USES_G is set and F = h otherwise; the polynomial factors P are
# spelled out in _segment_jets.
_ROWS = np.array([0, 1, 0, 1, 0, 1, 2, 2, 2, 0, 1, 2])
_COLS = np.array([0, 1, 1, 0, 2, 2, 0, 1, 2, 3, 3, 3])
_USES_G = np.array([False, False, False, False, True, True, True, True, False, False, False, True])
_SIGN = np.array([-1.0, -1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0])


@njit(cache=True)
def _segment_jets(dx, dy, dl, d, L0):
    L = L0 + dl
    inv2 = 1.0 / (d * d)
    u = (dx * dx + dy * dy) * inv2
    g, g1, g2, h, h1, h2 = _curvature(u)
    du = np.array([2 * dx * inv2, 2 * dy * inv2, 0.0])
    ddu = np.zeros((3, 3))
    ddu[0, 0] = ddu[1, 1] = 2 * inv2

    p = np.array([
        dx * dx * inv2, dy * dy * inv2, dx * dy * inv2, dx * dy * inv2,
        dx / d, dy / d, dx / d, dy / d, u,
        dx * L / d, dy * L / d, L,
    ])
    dp = np.zeros((12, 3))
    dp[0, 0] = 2 * dx * inv2
    dp[1, 1] = 2 * dy * inv2
    for e in (2, 3):
        dp[e, 0] = dy * inv2
        dp[e, 1] = dx * inv2
    dp[4, 0] = dp[6, 0] = 1 / d
    dp[5, 1] = dp[7, 1] = 1 / d
    dp[8] = du
    dp[9, 0] = L / d
    dp[9, 2] = dx / d
    dp[10, 1] = L / d
    dp[10, 2] = dy / d
    dp[11, 2] = 1.0
    ddp = np.zeros((12, 3, 3))
    ddp[0, 0, 0] = 2 * inv2
    ddp[1, 1, 1] = 2 * inv2
    for e in (2, 3):
        ddp[e, 0, 1] = ddp[e, 1, 0] = inv2
    ddp[8] = ddu
    ddp[9, 0, 2] = ddp[9, 2, 0] = 1 / d
    ddp[10, 1, 2] = ddp[10, 2, 1] = 1 / d

    T = np.eye(4)
    dT = np.zeros((3, 4, 4))
    ddT = np.zeros((3, 3, 4, 4))
    for e in range(12):
        if _USES_G[e]:
            f, f1, f2 = g, g1, g2
        else:
            f, f1, f2 = h, h1, h2
        r, c, sg = _ROWS[e], _COLS[e], _SIGN[e]
        T[r, c] += sg * f * p[e]
        for a in range(3):
            dT[a, r, c] = sg * (f1 * du[a] * p[e] + f * dp[e, a])
            for b in range(3):
                ddT[a, b, r, c] = sg * (
                    (f2 * du[a] * du[b] + f1 * ddu[a, b]) * p[e]
                    + f1 * (du[a] * dp[e, b] + dp[e, a] * du[b])
                    + f * ddp[e, a, b]
                )
    return T, dT, ddT


def segment_transform_jets(q_i, params: SegmentParams):
    """Full transform of one segment with first and second derivatives.

    Returns ``T`` (4, 4), ``dT`` (3, 4, 4) and ``ddT`` (3, 3, 4, 4), derivatives
    taken with respect to the segment's own (Delta_x, Delta_y, delta_L).
    """
    dx, dy, dl = (float(v) for v in q_i)
    return _segment_jets(dx, dy, dl, params.d, params.L0)


@njit(cache=True)
def _mm4(A, B):
    out = np.zeros((4, 4))
    for i in range(4):
        for k in range(4):
            a = A[i, k]
            if a != 0.0:
                for j in range(4):
                    out[i, j] += a * B[k, j]
    return out


@njit(cache=True)
def _chain_jets(q, L0s, ds):
    nseg = L0s.shape[0]
    n = 3 * nseg
    P = np.eye(4)
    dP = np.zeros((n, 4, 4))
    ddP = np.zeros((n, n, 4, 4))
    pos = np.zeros((nseg, 3))
    Jp = np.zeros((nseg, 3, n))
    Hp = np.zeros((nseg, n, n, 3))
    for i in range(nseg):
        s = 3 * i
        T, dT, ddT = _segment_jets(q[s], q[s + 1], q[s + 2], ds[i], L0s[i])
        ddP_new = np.zeros((n, n, 4, 4))
        dP_new = np.zeros((n, 4, 4))
        # coordinates of later segments do not enter yet
        for a in range(s):
            dP_new[a] = _mm4(dP[a], T)
            for b in range(s):
                ddP_new[a, b] = _mm4(ddP[a, b], T)
            for k in range(3):
                X = _mm4(dP[a], dT[k])
                ddP_new[a, s + k] += X
                ddP_new[s + k, a] += X
        for k in range(3):
            dP_new[s + k] = _mm4(P, dT[k])
            for m in range(3):
                ddP_new[s + k, s + m] += _mm4(P, ddT[k, m])
        P = _mm4(P, T)
        dP = dP_new
        ddP = ddP_new
        for x in range(3):
            pos[i, x] = P[x, 3]
            for a in range(n):
                Jp[i, x, a] = dP[a, x, 3]
                for b in range(n):
                    Hp[i, a, b, x] = ddP[a, b, x, 3]
    return pos, Jp, Hp


def chain_point_jets(q, model: RobotModel):
    """Top-plate centre of every segment in the robot base frame, with derivatives.

    Returns arrays ``p`` (n_seg, 3), ``Jp`` (n_seg, 3, 3n) and ``Hp``
    (n_seg, 3n, 3n, 3) where ``Hp[i, a, b]`` is the second derivative of
    point ``i`` with respect to ``q[a]`` and ``q[b]``.
    """
    arr = model.arrays
    return _chain_jets(np.asarray(q, dtype=float), arr.L0, arr.d)


def chain_points(q, model: RobotModel) -> list[np.ndarray]:
    q = np.asarray(q, dtype=float)
    P = np.eye(4)
    pts = []
    for i, seg in enumerate(model.segments):
        P = P @ segment_transform(q[3 * i : 3 * i + 3], seg)
        pts.append(P[:3, 3].copy())
    return pts


@dataclass(frozen=True)
class ConstraintSet:
    """Stacked barrier values with their Jacobian and Jacobian-rate rows.

    ``p`` is the linear class-K coefficient used when these rows are turned
    into safety constraints.
    """

    b: np.ndarray
    J: np.ndarray
    Jdot: np.ndarray
    p: float = 5.0

    def __post_init__(self):
        if not self.p > 0:
            raise ValueError(f"class-K coefficient must be positive, got {self.p!r}")
        N = self.b.shape[0]
        if self.J.shape[0] != N or self.Jdot.shape != self.J.shape:
            raise ValueError("inconsistent constraint dimensions")


def stack_constraints(q, qdot, model: RobotModel, p: float = 5.0) -> ConstraintSet:
    """Barrier rows ``b_j = c_j - epsilon`` for all corners of all segments."""
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    n = model.ndof
    N = model.n_constraints
    b = np.empty(N)
    J = np.zeros((N, n))
    Jdot = np.zeros((N, n))
    for i, seg in enumerate(model.segments):
        sl = slice(3 * i, 3 * i + 3)
        rows = slice(6 * i, 6 * i + 6)
        c, jac, hess = corner_jets(q[sl], seg)
        b[rows] = c - seg.epsilon
        J[rows, sl] = jac
        Jdot[rows, sl] = hess @ qdot[sl]
    return ConstraintSet(b=b, J=J, Jdot=Jdot, p=p)
