"""Lumped point-mass dynamics of the PCC chain.

Each segment carries its mass at the centre of its top plate, so

    M(q) = sum_i m_i Jp_i^T Jp_i

with ``Jp_i`` the positional Jacobian of that point. The Coriolis matrix comes
from the Christoffel symbols of ``M``. Elasticity and damping are linear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .kinematics import _chain_jets, chain_point_jets
from .model import RobotModel

REGULARIZATION = 1e-9
REFINE_STEPS = 2  # refinement sweeps that remove the floor's effect on solves


class DynamicsError(RuntimeError):
    """Raised when the dynamics cannot be evaluated at a state."""


@dataclass(frozen=True)
class DynamicsTerms:
    M: np.ndarray
    C: np.ndarray
    G: np.ndarray
    Kq: np.ndarray
    Ddq: np.ndarray
    K: np.ndarray
    D: np.ndarray

    def bias(self, qdot) -> np.ndarray:
        """``C qd + G + K q + D qd``: everything on the left except ``M qdd``."""
        return self.C @ qdot + self.G + self.Kq + self.Ddq


@njit(cache=True)
def _mass_and_derivative(Jp, Hp, masses):
    nseg, _, n = Jp.shape
    M = np.zeros((n, n))
    dM = np.zeros((n, n, n))
    for i in range(nseg):
        m = masses[i]
        for a in range(n):
            for b in range(n):
                acc = 0.0
                for x in range(3):
                    acc += Jp[i, x, a] * Jp[i, x, b]
                M[a, b] += m * acc
        for c in range(n):
            for a in range(n):
                for b in range(n):
                    acc = 0.0
                    for x in range(3):
                        acc += Hp[i, c, a, x] * Jp[i, x, b] + Jp[i, x, a] * Hp[i, c, b, x]
                    dM[c, a, b] += m * acc
    return M, dM


@njit(cache=True)
def _christoffel(dM, qdot):
    n = qdot.shape[0]
    C = np.zeros((n, n))
    for k in range(n):
        for j in range(n):
            acc = 0.0
            for i in range(n):
                acc += (dM[i, k, j] + dM[j, k, i] - dM[k, i, j]) * qdot[i]
            C[k, j] = 0.5 * acc
    return C


@njit(cache=True)
def _terms_kernel(q, qdot, L0s, ds, masses, gravity):
    _, Jp, Hp = _chain_jets(q, L0s, ds)
    M, dM = _mass_and_derivative(Jp, Hp, masses)
    n = q.shape[0]
    G = np.zeros(n)
    for i in range(masses.shape[0]):
        for a in range(n):
            for x in range(3):
                G[a] -= masses[i] * Jp[i, x, a] * gravity[x]
    return M, _christoffel(dM, qdot), G


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise DynamicsError(f"{name} has non-finite entries")
    return arr


def stiffness_matrix(model: RobotModel) -> np.ndarray:
    """Block-diagonal ``diag(k_theta/d^2, k_theta/d^2, k_L)`` per segment.

    With this scaling ``0.5 * K_xx * (Dx^2 + Dy^2) = 0.5 * k_theta * theta^2``.
    """
    return np.diag(model.arrays.stiffness)


def damping_matrix(model: RobotModel) -> np.ndarray:
    return np.diag(model.arrays.damping)


def elastic_force(q, model: RobotModel) -> np.ndarray:
    return model.arrays.stiffness * np.asarray(q, dtype=float)


def mass_matrix(q, model: RobotModel) -> np.ndarray:
    _, Jp, Hp = chain_point_jets(q, model)
    M, _ = _mass_and_derivative(Jp, Hp, model.arrays.mass)
    return _check_finite("mass matrix", M)


def mass_matrix_derivative(q, model: RobotModel) -> np.ndarray:
    """``dM[c, a, b] = dM_ab / dq_c``."""
    _, Jp, Hp = chain_point_jets(q, model)
    return _mass_and_derivative(Jp, Hp, model.arrays.mass)[1]


def christoffel_coriolis(dM: np.ndarray, qdot) -> np.ndarray:
    """``C_kj = 1/2 sum_i (dM_kj/dq_i + dM_ki/dq_j - dM_ij/dq_k) qd_i``."""
    return _christoffel(dM, np.asarray(qdot, dtype=float))


def coriolis_matrix(q, qdot, model: RobotModel) -> np.ndarray:
    C = christoffel_coriolis(mass_matrix_derivative(q, model), qdot)
    return _check_finite("Coriolis matrix", C)


def gravity_vector(q, model: RobotModel) -> np.ndarray:
    """Generalized gravity force ``G = -sum_i m_i Jp_i^T g``."""
    _, Jp, _ = chain_point_jets(q, model)
    arr = model.arrays
    return -np.einsum("i,ixa,x->a", arr.mass, Jp, arr.gravity)


def potential_energy(q, model: RobotModel) -> float:
    """Gravitational potential ``-sum_i m_i g . p_i``; elastic energy is separate."""
    pos, _, _ = chain_point_jets(q, model)
    arr = model.arrays
    return float(-arr.mass @ pos @ arr.gravity)


def elastic_energy(q, model: RobotModel) -> float:
    q = np.asarray(q, dtype=float)
    return float(0.5 * q @ (model.arrays.stiffness * q))


def kinetic_energy(q, qdot, model: RobotModel) -> float:
    qdot = np.asarray(qdot, dtype=float)
    return float(0.5 * qdot @ mass_matrix(q, model) @ qdot)


def dynamics_terms(q, qdot, model: RobotModel) -> DynamicsTerms:
    """All terms of ``M qdd + C qd + G + K q + D qd = tau`` from one kinematic sweep."""
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    arr = model.arrays
    M, C, G = _terms_kernel(q, qdot, arr.L0, arr.d, arr.mass, arr.gravity)
    _check_finite("mass matrix", M)
    _check_finite("Coriolis matrix", C)
    _check_finite("gravity vector", G)
    return DynamicsTerms(
        M=M,
        C=C,
        G=G,
        Kq=arr.stiffness * q,
        Ddq=arr.damping * qdot,
        K=np.diag(arr.stiffness),
        D=np.diag(arr.damping),
    )


def regularized(M: np.ndarray) -> np.ndarray:
    """``M + lambda I`` with ``lambda = 1e-9 * trace(M) / n``."""
    n = M.shape[0]
    return M + (REGULARIZATION * np.trace(M) / n) * np.eye(n)


def factor_mass(M: np.ndarray):
    """Cholesky factor of the regularized mass matrix, for use with ``cho_solve``."""
    _check_finite("mass matrix", M)
    try:
        return cho_factor(regularized(M))
    except LinAlgError as exc:
        raise DynamicsError(f"mass matrix is not positive definite: {exc}") from exc


def mass_solve(M: np.ndarray, rhs, factor=None) -> np.ndarray:
    """Solve ``M x = rhs`` (vector or matrix right-hand side).

    The regularized factor guarantees a solve even when ``M`` is nearly
    singular; a few refinement sweeps against ``M`` itself then remove the
    bias the floor would otherwise leave in well-conditioned cases.
    """
    factor = factor_mass(M) if factor is None else factor
    rhs = np.asarray(rhs, dtype=float)
    x = cho_solve(factor, rhs)
    for _ in range(REFINE_STEPS):
        x = x + cho_solve(factor, rhs - M @ x)
    return x


def forward_dynamics(q, qdot, tau, model: RobotModel, terms: DynamicsTerms | None = None) -> np.ndarray:
    """Accelerations from ``M qdd = tau - C qd - G - K q - D qd``."""
    qdot = np.asarray(qdot, dtype=float)
    if terms is None:
        terms = dynamics_terms(q, qdot, model)
    rhs = np.asarray(tau, dtype=float) - terms.bias(qdot)
    return mass_solve(terms.M, rhs)
