"""Dense strictly convex QP for the per-step safety filter.

Solves::

    minimize    1/2 x^T H x + F^T x
    subject to  A x >= lo,   u_min <= x <= u_max (optional)

with the Goldfarb-Idnani dual active-set method. Starting from the
unconstrained minimizer it adds the most violated row, dropping rows whose
multipliers would turn negative, until every row is satisfied. Once the active
set is known the equality-constrained KKT system is solved directly to polish
``x`` and the multipliers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"

TOL = 1e-9
DEPENDENT = 1e-10  # relative size of a normal's component outside the working set


@dataclass(frozen=True)
class QpProblem:
    H: np.ndarray
    F: np.ndarray
    A: np.ndarray
    lo: np.ndarray
    box: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        F = np.atleast_1d(np.asarray(self.F, dtype=float))
        q = F.shape[0]
        A = np.asarray(self.A, dtype=float).reshape(-1, q)
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float)).reshape(-1)
        if H.shape != (q, q):
            raise ValueError(f"H has shape {H.shape}, expected {(q, q)}")
        if A.shape[0] != lo.shape[0]:
            raise ValueError("A and lo disagree on the number of rows")
        if not np.allclose(H, H.T, rtol=1e-12, atol=0.0):
            raise ValueError("H must be symmetric")
        box = self.box
        if box is not None:
            u_min = np.broadcast_to(np.asarray(box[0], dtype=float), (q,)).copy()
            u_max = np.broadcast_to(np.asarray(box[1], dtype=float), (q,)).copy()
            if np.any(u_min > u_max):
                raise ValueError("box bounds need u_min <= u_max")
            box = (u_min, u_max)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "box", box)

    @classmethod
    def projection(cls, target, A, lo, box=None) -> "QpProblem":
        """``minimize 1/2 ||x - target||^2`` over the constraint set."""
        target = np.asarray(target, dtype=float)
        return cls(H=np.eye(target.shape[0]), F=-target, A=A, lo=lo, box=box)

    @property
    def n_vars(self) -> int:
        return self.F.shape[0]

    def stacked_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Inequality rows with box bounds appended (lower bounds, then upper)."""
        if self.box is None:
            return self.A, self.lo
        q = self.n_vars
        I = np.eye(q)
        return np.vstack([self.A, I, -I]), np.concatenate([self.lo, self.box[0], -self.box[1]])

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H @ x + self.F @ x)


@dataclass(frozen=True)
class QpSolution:
    tau_star: np.ndarray
    status: str
    kkt_residual: float
    active_set: tuple[int, ...]
    multipliers: np.ndarray = field(repr=False)
    iterations: int = 0
    certificate: np.ndarray | None = field(default=None, repr=False)
    slack: np.ndarray | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def kkt_residuals(problem: QpProblem, x, lam) -> dict[str, float]:
    """Stationarity, primal feasibility, dual feasibility and complementarity residuals.

    ``lam`` holds one multiplier per stacked row (see ``QpProblem.stacked_rows``).
    """
    A, lo = problem.stacked_rows()
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    slack = A @ x - lo if A.size else np.zeros(0)
    grad = problem.H @ x + problem.F - (A.T @ lam if A.size else 0.0)
    return {
        "stationarity": float(np.max(np.abs(grad), initial=0.0)),
        "primal": float(np.max(-slack, initial=0.0)),
        "dual": float(np.max(-lam, initial=0.0)),
        "complementarity": float(np.max(np.abs(lam * slack), initial=0.0)),
    }


def _kkt_solve(Hf, x0, An, lon, W):
    """Minimizer on the face ``An[W] x = lon[W]``: returns x and multipliers of W."""
    if not W:
        return x0, np.zeros(0)
    N = An[W]
    HiNt = cho_solve(Hf, N.T)
    S = N @ HiNt
    lam = np.linalg.solve(S, lon[W] - N @ x0)
    return x0 + HiNt @ lam, lam


def _normalize(A, lo):
    norms = np.linalg.norm(A, axis=1)
    scale = np.where(norms > 0, norms, 1.0)
    return A / scale[:, None], lo / scale, norms


class QpSolver:
    """Active-set QP solver that remembers the last active set as a warm start.

    One instance per control loop; not meant to be shared between threads.
    """

    def __init__(self, tol: float = TOL, max_iter: int | None = None):
        self.tol = tol
        self.max_iter = max_iter
        self._warm: tuple[int, ...] | None = None

    def reset(self):
        self._warm = None

    def solve(self, problem: QpProblem) -> QpSolution:
        sol = _solve(problem, self.tol, self.max_iter, self._warm)
        if sol.ok:
            self._warm = sol.active_set
        return sol


def solve_qp(problem: QpProblem, tol: float = TOL, max_iter: int | None = None) -> QpSolution:
    """Global minimizer of a strictly convex QP, with its KKT certificate."""
    return _solve(problem, tol, max_iter, None)


def _solve(problem: QpProblem, tol, max_iter, warm) -> QpSolution:
    H, F = problem.H, problem.F
    A, lo = problem.stacked_rows()
    q, m = problem.n_vars, A.shape[0]
    if max_iter is None:
        max_iter = 100 * (q + m)
    Hf = cho_factor(H)
    x0 = -cho_solve(Hf, F)
    An, lon, norms = _normalize(A, lo)

    # rows with a zero normal are either vacuous or contradictory
    null_rows = np.flatnonzero(norms == 0)
    bad = [i for i in null_rows if lo[i] > tol]
    if bad:
        cert = np.zeros(m)
        cert[bad[0]] = 1.0
        return _finish(problem, x0, [], np.zeros(0), norms, INFEASIBLE, 0, tol, certificate=cert)
    live = norms > 0

    if warm is not None:
        W = [i for i in warm if i < m and live[i]]
        try:
            x, lam = _kkt_solve(Hf, x0, An, lon, W)
        except np.linalg.LinAlgError:
            x = None
        if x is not None and np.all(lam >= -tol) and np.all((An @ x - lon)[live] >= -tol):
            return _finish(problem, x, W, lam, norms, OPTIMAL, 0, tol)

    x = x0.copy()
    W: list[int] = []
    u = np.zeros(0)
    it = 0
    while True:
        s = An @ x - lon
        s[~live] = np.inf
        s[W] = np.inf
        p = int(np.argmin(s)) if m else 0
        if m == 0 or s[p] >= -tol:
            break
        n_p = An[p]
        u_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                return _finish(problem, x, W, u, norms, MAX_ITER, it, tol, polish=False)
            Hinv_np = cho_solve(Hf, n_p)
            if W:
                N = An[W]
                HiNt = cho_solve(Hf, N.T)
                r = np.linalg.solve(N @ HiNt, N @ Hinv_np)
                z = Hinv_np - HiNt @ r
            else:
                r = np.zeros(0)
                z = Hinv_np
            # partial step: largest move before an active multiplier hits zero
            t1, drop = np.inf, -1
            for k, rk in enumerate(r):
                if rk > tol and u[k] / rk < t1:
                    t1, drop = u[k] / rk, k
            # a row whose normal the working set (nearly) spans cannot be added
            zn = float(z @ n_p)
            t2 = np.inf if zn <= DEPENDENT * float(Hinv_np @ n_p) else -(float(n_p @ x) - lon[p]) / zn
            if np.isinf(t1) and np.isinf(t2):
                cert = np.zeros(m)
                cert[p] = 1.0
                for k, i in enumerate(W):
                    cert[i] = max(-r[k], 0.0)
                cert = cert / np.where(norms > 0, norms, 1.0)
                return _finish(problem, x, W, u, norms, INFEASIBLE, it, tol, certificate=cert, polish=False)
            if np.isinf(t2):
                u = u - t1 * r
                u_p += t1
                W.pop(drop)
                u = np.delete(u, drop)
                continue
            t = min(t1, t2)
            x = x + t * z
            u = u - t * r
            u_p += t
            if t2 <= t1:
                W.append(p)
                u = np.append(u, u_p)
                break
            W.pop(drop)
            u = np.delete(u, drop)
    return _finish(problem, x, W, u, norms, OPTIMAL, it, tol, Hf=Hf, x0=x0, An=An, lon=lon)


def _finish(problem, x, W, u, norms, status, it, tol, certificate=None, polish=True, Hf=None, x0=None, An=None, lon=None):
    A, lo = problem.stacked_rows()
    m = A.shape[0]
    W = list(W)
    if status == OPTIMAL and polish and W and Hf is not None:
        try:
            xp, up = _kkt_solve(Hf, x0, An, lon, W)
            live = norms > 0
            if np.all(up >= -tol) and np.all((An @ xp - lon)[live] >= -tol):
                x, u = xp, up
        except np.linalg.LinAlgError:
            pass
    lam = np.zeros(m)
    for k, i in enumerate(W):
        lam[i] = max(u[k], 0.0) / norms[i]
    res = kkt_residuals(problem, x, lam)
    order = sorted(W)
    return QpSolution(
        tau_star=np.asarray(x, dtype=float),
        status=status,
        kkt_residual=max(res.values()),
        active_set=tuple(order),
        multipliers=lam,
        iterations=it,
        certificate=certificate,
    )


def solve_qp_relaxed(problem: QpProblem, penalty: float = 1e6, tol: float = TOL) -> QpSolution:
    """Solve with one nonnegative slack per inequality row, penalized by ``penalty * ||s||^2``.

    Always feasible: ``A x + s >= lo`` can be met by a large enough slack. Box
    bounds stay hard.
    """
    if not penalty > 0:
        raise ValueError("penalty must be positive")
    q, N = problem.n_vars, problem.A.shape[0]
    if N == 0:
        return solve_qp(problem, tol)
    H = np.zeros((q + N, q + N))
    H[:q, :q] = problem.H
    H[q:, q:] = 2.0 * penalty * np.eye(N)
    F = np.concatenate([problem.F, np.zeros(N)])
    A = np.block([[problem.A, np.eye(N)], [np.zeros((N, q)), np.eye(N)]])
    lo = np.concatenate([problem.lo, np.zeros(N)])
    if problem.box is not None:
        Ab = np.hstack([np.eye(q), np.zeros((q, N))])
        A = np.vstack([A, Ab, -Ab])
        lo = np.concatenate([lo, problem.box[0], -problem.box[1]])
    inner = solve_qp(QpProblem(H=H, F=F, A=A, lo=lo), tol)
    x = inner.tau_star[:q]
    lam = inner.multipliers[:N]
    if problem.box is not None:
        lam = np.concatenate([lam, inner.multipliers[2 * N :]])
    active = tuple(i for i in inner.active_set if i < N) + tuple(
        i - N for i in inner.active_set if i >= 2 * N
    )
    return QpSolution(
        tau_star=x,
        status=inner.status,
        kkt_residual=inner.kkt_residual,
        active_set=active,
        multipliers=lam,
        iterations=inner.iterations,
        slack=inner.tau_star[q:],
    )
