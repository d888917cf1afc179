"""PD+ nominal control and the relative-degree-two barrier rows that filter it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DynamicsTerms, mass_solve
from .kinematics import ConstraintSet

DEFAULT_P = 5.0


@dataclass(frozen=True, eq=False)
class PdPlusGains:
    Kp: np.ndarray
    Kd: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, PdPlusGains):
            return NotImplemented
        return np.array_equal(self.Kp, other.Kp) and np.array_equal(self.Kd, other.Kd)

    def __post_init__(self):
        Kp = np.asarray(self.Kp, dtype=float)
        Kd = np.asarray(self.Kd, dtype=float)
        Kp = np.diag(Kp) if Kp.ndim == 1 else Kp
        Kd = np.diag(Kd) if Kd.ndim == 1 else Kd
        for name, K in (("Kp", Kp), ("Kd", Kd)):
            if K.ndim != 2 or K.shape[0] != K.shape[1]:
                raise ValueError(f"{name} must be square")
            if np.any(K != np.diag(np.diagonal(K))):
                raise ValueError(f"{name} must be diagonal")
            if np.any(np.diagonal(K) <= 0):
                raise ValueError(f"{name} needs strictly positive diagonal entries")
        if Kp.shape != Kd.shape:
            raise ValueError("Kp and Kd sizes differ")
        object.__setattr__(self, "Kp", Kp)
        object.__setattr__(self, "Kd", Kd)

    @classmethod
    def uniform(cls, kp: float, kd: float, n: int) -> "PdPlusGains":
        return cls(Kp=np.full(n, float(kp)), Kd=np.full(n, float(kd)))


class SetPoint:
    """Constant reference with zero velocity and acceleration."""

    def __init__(self, q_bar):
        self.q_bar = np.asarray(q_bar, dtype=float)
        if not np.all(np.isfinite(self.q_bar)):
            raise ValueError("set point must be finite")

    def __call__(self, t: float):
        z = np.zeros_like(self.q_bar)
        return self.q_bar.copy(), z, z.copy()

    def __eq__(self, other):
        return isinstance(other, SetPoint) and np.array_equal(self.q_bar, other.q_bar)

    def __repr__(self):
        return f"SetPoint({self.q_bar.tolist()!r})"


class WaypointTrajectory:
    """Rest-to-rest cubic moves through timed waypoints.

    Between waypoints ``(t_k, q_k)`` and ``(t_k+1, q_k+1)`` the reference follows
    ``q_k + (q_k+1 - q_k) * (3 s^2 - 2 s^3)`` with ``s`` the normalized time,
    so velocity vanishes at every waypoint. Before the first and after the last
    waypoint the reference holds still.
    """

    def __init__(self, times, points):
        self.times = np.asarray(times, dtype=float)
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.times.ndim != 1 or self.times.shape[0] != self.points.shape[0]:
            raise ValueError("need one time per waypoint")
        if self.times.shape[0] < 1:
            raise ValueError("need at least one waypoint")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("waypoint times must be strictly increasing")
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.points))):
            raise ValueError("waypoints must be finite")

    def __call__(self, t: float):
        ts, ps = self.times, self.points
        z = np.zeros(ps.shape[1])
        if t <= ts[0]:
            return ps[0].copy(), z, z.copy()
        if t >= ts[-1]:
            return ps[-1].copy(), z, z.copy()
        k = int(np.searchsorted(ts, t, side="right")) - 1
        T = ts[k + 1] - ts[k]
        s = (t - ts[k]) / T
        dq = ps[k + 1] - ps[k]
        return (
            ps[k] + dq * (3 * s**2 - 2 * s**3),
            dq * (6 * s - 6 * s**2) / T,
            dq * (6 - 12 * s) / T**2,
        )

    def __eq__(self, other):
        return (
            isinstance(other, WaypointTrajectory)
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.points, other.points)
        )

    def __repr__(self):
        return f"WaypointTrajectory({self.times.tolist()!r}, {self.points.tolist()!r})"


def pd_plus(q, qdot, t, ref, gains: PdPlusGains, terms: DynamicsTerms) -> np.ndarray:
    """Model-based feedforward along the reference plus PD feedback on the tracking error.

    ``tau = M qdd_ref + C(q, qd) qd + G + K q_ref + D qd_ref + Kp (q_ref - q) + Kd (qd_ref - qd)``.
    The Coriolis term uses the measured velocity, elasticity and damping use the reference.
    """
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    q_ref, qd_ref, qdd_ref = ref(t)
    return (
        terms.M @ qdd_ref
        + terms.C @ qdot
        + terms.G
        + terms.K @ q_ref
        + terms.D @ qd_ref
        + gains.Kp @ (q_ref - q)
        + gains.Kd @ (qd_ref - qdot)
    )


@dataclass(frozen=True)
class HocbfRows:
    """Safety rows in the form ``A @ tau >= lo``, one per barrier function."""

    A: np.ndarray
    lo: np.ndarray

    def psi2(self, tau) -> np.ndarray:
        """``bdd + 2 p bd + p^2 b`` that the input ``tau`` would produce."""
        return self.A @ np.asarray(tau, dtype=float) - self.lo


def hocbf_rows(qdot, terms: DynamicsTerms, cons: ConstraintSet) -> HocbfRows:
    """Rows of ``p^2 b + 2p J qd + J M^-1 (tau - C qd - G - K q - D qd) + Jdot qd >= 0``.

    ``M^-1`` is applied with the same regularized, refined solve the simulator
    uses for forward dynamics.
    """
    qdot = np.asarray(qdot, dtype=float)
    A = mass_solve(terms.M, cons.J.T).T
    p = cons.p
    drift = p * p * cons.b + 2 * p * (cons.J @ qdot) + cons.Jdot @ qdot - A @ terms.bias(qdot)
    A = np.ascontiguousarray(A)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(drift))):
        raise FloatingPointError("non-finite barrier rows")
    return HocbfRows(A=A, lo=-drift)


def psi_sequence(b, bdot, p: float, m: int, bddot=None) -> list:
    """``psi_0 = b`` and ``psi_i = d/dt psi_(i-1) + p psi_(i-1)`` for linear class-K terms.

    ``m = 1`` is the ordinary barrier condition, ``m = 2`` needs ``bddot`` too.
    Works elementwise on arrays.
    """
    if m not in (1, 2):
        raise ValueError(f"relative degree {m} not supported (use 1 or 2)")
    b = np.asarray(b, dtype=float)
    bdot = np.asarray(bdot, dtype=float)
    psi = [b, bdot + p * b]
    if m == 2:
        if bddot is None:
            raise ValueError("relative degree 2 needs the second derivative of b")
        psi.append(np.asarray(bddot, dtype=float) + 2 * p * bdot + p * p * b)
    return psi
