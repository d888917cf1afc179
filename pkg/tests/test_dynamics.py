import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, random_segment_configs
from pcc_cbf.dynamics import (
    REGULARIZATION,
    DynamicsError,
    coriolis_matrix,
    damping_matrix,
    dynamics_terms,
    elastic_energy,
    elastic_force,
    factor_mass,
    forward_dynamics,
    gravity_vector,
    kinetic_energy,
    mass_matrix,
    mass_matrix_derivative,
    mass_solve,
    potential_energy,
    regularized,
    stiffness_matrix,
)
from pcc_cbf.integrators import integrate
from pcc_cbf.kinematics import bend_angle, chain_points
from pcc_cbf.model import RobotModel, SegmentParams, reference_robot

ROBOT = reference_robot()


def random_state(rng, model=ROBOT, speed=0.1):
    q = np.concatenate(random_segment_configs(rng, model.n_segments, n_small=0, theta_max=1.5))
    return q, rng.normal(scale=speed, size=model.ndof)


def kinetic_energy_fd(q, qd, model, h=1e-6):
    """Half the mass-weighted squared speed of the plate centres, velocities by differencing."""
    plus = chain_points(q + h * qd, model)
    minus = chain_points(q - h * qd, model)
    total = 0.0
    for seg, a, b in zip(model.segments, plus, minus):
        v = (a - b) / (2 * h)
        total += 0.5 * seg.mass * v @ v
    return total


def test_single_straight_segment_axial_mass():
    model = RobotModel(segments=(SegmentParams(),))
    M = mass_matrix(np.zeros(3), model)
    assert M[2, 2] == pytest.approx(0.15, rel=1e-15)
    assert M[2, 0] == M[2, 1] == 0


def test_mass_matrix_exactly_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(50):
        q, _ = random_state(rng)
        M = mass_matrix(q, ROBOT)
        assert np.array_equal(M, M.T)


def test_mass_matrix_kinetic_energy_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        q, qd = random_state(rng)
        two_t = qd @ mass_matrix(q, ROBOT) @ qd
        assert two_t == pytest.approx(2 * kinetic_energy_fd(q, qd, ROBOT), rel=1e-8)
        assert kinetic_energy(q, qd, ROBOT) == pytest.approx(0.5 * two_t, rel=1e-14)


def test_mass_matrix_spd_after_regularization():
    rng = np.random.default_rng(2)
    states = [np.zeros(6)] + [random_state(rng)[0] for _ in range(50)]
    for q in states:
        M = mass_matrix(q, ROBOT)
        floor = REGULARIZATION * np.trace(M) / 6
        eig = np.linalg.eigvalsh(regularized(M))
        assert eig.min() >= floor * (1 - 1e-6)
        factor_mass(M)


def test_mass_solve_matrix_rhs():
    rng = np.random.default_rng(12)
    q, _ = random_state(rng)
    M = mass_matrix(q, ROBOT)
    B = rng.normal(size=(6, 4))
    X = mass_solve(M, B)
    assert np.allclose(M @ X, B, atol=1e-10)


def test_factor_rejects_non_finite():
    with pytest.raises(DynamicsError):
        factor_mass(np.full((3, 3), np.nan))


def test_mass_derivative_by_difference():
    rng = np.random.default_rng(3)
    for _ in range(10):
        q, _ = random_state(rng)
        dM = mass_matrix_derivative(q, ROBOT)
        ref = central_difference(lambda x: mass_matrix(x, ROBOT), q, 1e-6)
        assert np.allclose(np.moveaxis(dM, 0, -1), ref, rtol=1e-6, atol=1e-9)


def test_coriolis_zero_velocity():
    rng = np.random.default_rng(4)
    q, _ = random_state(rng)
    assert np.all(coriolis_matrix(q, np.zeros(6), ROBOT) == 0)


def test_coriolis_skew_property():
    rng = np.random.default_rng(5)
    h = 1e-6
    for _ in range(50):
        q, qd = random_state(rng)
        Mdot = (mass_matrix(q + h * qd, ROBOT) - mass_matrix(q - h * qd, ROBOT)) / (2 * h)
        N = Mdot - 2 * coriolis_matrix(q, qd, ROBOT)
        for _ in range(5):
            x = rng.normal(size=6)
            assert abs(x @ N @ x) <= 1e-8 * (x @ x) * np.linalg.norm(qd)


def test_coriolis_pure_extension_straight():
    model = RobotModel(segments=(SegmentParams(),))
    qd = np.array([0.0, 0.0, 0.3])
    Cqd = coriolis_matrix(np.zeros(3), qd, model) @ qd
    assert Cqd[2] == 0


def test_gravity_zero():
    model = reference_robot(gravity=(0, 0, 0))
    rng = np.random.default_rng(6)
    q, _ = random_state(rng)
    assert np.all(gravity_vector(q, model) == 0)


def test_gravity_straight_only_axial():
    G = gravity_vector(np.zeros(6), ROBOT)
    assert np.all(G[[0, 1, 3, 4]] == 0)
    # both masses load the first segment's extension, only the tip loads the second
    assert G[2] == pytest.approx(2 * 0.15 * 9.81)
    assert G[5] == pytest.approx(0.15 * 9.81)


def test_gravity_matches_potential_gradient():
    rng = np.random.default_rng(7)
    for gravity in [(0, 0, -9.81), (1.0, -2.0, 3.0)]:
        model = reference_robot(gravity=gravity)
        for _ in range(20):
            q, _ = random_state(rng)
            ref = central_difference(lambda x: potential_energy(x, model), q, 1e-6)
            assert np.max(np.abs(gravity_vector(q, model) - ref)) <= 1e-6


def test_stiffness_values():
    K = stiffness_matrix(ROBOT)
    assert K[0, 0] == pytest.approx(6250.0)
    assert K[1, 1] == pytest.approx(6250.0)
    assert K[2, 2] == 10.0
    assert np.all(K == np.diag(np.diagonal(K)))
    D = damping_matrix(ROBOT)
    assert D[0, 0] == pytest.approx(5 / 0.0016)
    assert D[2, 2] == 5.0
    assert np.all(elastic_force(np.zeros(6), ROBOT) == 0)


@given(st.floats(-0.06, 0.06), st.floats(-0.05, 0.05))
def test_bending_energy_matches_angle_form(dx, dl):
    q = np.array([dx, 0.0, dl, 0.0, 0.0, 0.0])
    theta = bend_angle(dx, 0.0, 0.04)
    expected = 0.5 * 10.0 * theta**2 + 0.5 * 10.0 * dl**2
    assert elastic_energy(q, ROBOT) == pytest.approx(expected, rel=1e-12, abs=1e-300)
    assert elastic_force(q, ROBOT) == pytest.approx(stiffness_matrix(ROBOT) @ q)


def test_forward_dynamics_equilibrium():
    rng = np.random.default_rng(8)
    for _ in range(10):
        q, _ = random_state(rng)
        tau = gravity_vector(q, ROBOT) + elastic_force(q, ROBOT)
        assert np.max(np.abs(forward_dynamics(q, np.zeros(6), tau, ROBOT))) <= 1e-9


def test_forward_dynamics_residual():
    rng = np.random.default_rng(9)
    for _ in range(100):
        q, qd = random_state(rng, speed=0.5)
        tau = rng.normal(scale=50, size=6)
        qdd = forward_dynamics(q, qd, tau, ROBOT)
        t = dynamics_terms(q, qd, ROBOT)
        residual = t.M @ qdd + t.C @ qd + t.G + t.Kq + t.Ddq - tau
        assert np.linalg.norm(residual) <= 1e-10 * (1 + np.linalg.norm(tau))


def test_dynamics_terms_consistent_with_parts():
    rng = np.random.default_rng(10)
    q, qd = random_state(rng)
    t = dynamics_terms(q, qd, ROBOT)
    assert np.allclose(t.M, mass_matrix(q, ROBOT), rtol=1e-14, atol=1e-16)
    assert np.allclose(t.C, coriolis_matrix(q, qd, ROBOT), rtol=1e-12, atol=1e-14)
    assert np.allclose(t.G, gravity_vector(q, ROBOT), rtol=1e-14)
    assert np.array_equal(t.Ddq, damping_matrix(ROBOT) @ qd)


def total_energy(q, qd, model):
    return kinetic_energy(q, qd, model) + elastic_energy(q, model)


@pytest.mark.parametrize("method, dt", [("imex", 1e-4), ("rk4", 2e-6)])
def test_damped_free_motion_dissipates(method, dt):
    model = reference_robot(gravity=(0, 0, 0))
    q = np.array([0.02, -0.01, 0.01, -0.015, 0.01, -0.02])
    qd = np.array([0.1, 0.0, -0.2, 0.05, 0.1, 0.0])
    energies = [total_energy(q, qd, model)]
    steps = 200 if method == "imex" else 100
    for _ in range(steps):
        q, qd = integrate(q, qd, np.zeros(6), model, 1e-3 if method == "imex" else 2e-5, dt, method)
        energies.append(total_energy(q, qd, model))
    assert np.all(np.diff(energies) <= 1e-9)
    assert energies[-1] < energies[0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mass_matrix_symmetric_positive_property(seed):
    rng = np.random.default_rng(seed)
    q, qd = random_state(rng)
    M = mass_matrix(q, ROBOT)
    assert np.array_equal(M, M.T)
    assert qd @ regularized(M) @ qd > 0
