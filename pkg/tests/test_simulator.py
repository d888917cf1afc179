import logging

import numpy as np
import pytest

from pcc_cbf.control import PdPlusGains, SetPoint, WaypointTrajectory, hocbf_rows
from pcc_cbf.dynamics import dynamics_terms, gravity_vector, stiffness_matrix
from pcc_cbf.kinematics import stack_constraints
from pcc_cbf.model import reference_robot
from pcc_cbf.qp import QpProblem, solve_qp
from pcc_cbf.simulator import (
    Controller,
    InadmissibleStart,
    Scenario,
    SimulationError,
    check_admissible,
    control_step,
    run_scenario,
    steady_state_index,
)

ROBOT = reference_robot()
GAINS = PdPlusGains.uniform(5.0, 1.0, 6)
Q_BAR = np.array([0.08, 0.0, -0.05, 0.0, -0.06, -0.07])
# bent far enough that segment 0's lowest corner sits 3 mm above the margin
NEAR_CONTACT = np.array([0.055, 0.0, -0.02, 0.0, 0.0, 0.0])


def smooth_move(target, duration):
    return WaypointTrajectory([0.0, duration], [np.zeros(6), target])


def test_log_matches_grid():
    sc = Scenario(model=ROBOT, reference=SetPoint(Q_BAR), gains=GAINS, t_final=0.05, control_dt=1e-3)
    log = run_scenario(sc)
    assert len(log) == 51 == sc.n_steps + 1
    assert log.t == [k * 1e-3 for k in range(51)]
    assert np.all(np.diff(log.t) > 0)
    arr = log.arrays()
    assert arr["b"].shape == (51, 12)
    assert arr["q"].shape == arr["tau"].shape == (51, 6)


def test_runs_are_bit_identical():
    sc = Scenario(model=ROBOT, reference=SetPoint(Q_BAR), gains=GAINS, t_final=0.05)
    a, b = run_scenario(sc).arrays(), run_scenario(sc).arrays()
    for key in ("q", "qd", "tau", "tau_nom", "b"):
        assert a[key].tobytes() == b[key].tobytes()


def test_zero_run_stays_zero():
    model = reference_robot(gravity=(0, 0, 0))
    for mode in ("pd_plus", "cbf_qp"):
        sc = Scenario(model=model, reference=SetPoint(np.zeros(6)), gains=GAINS, controller=mode, t_final=0.1)
        arr = run_scenario(sc).arrays()
        assert np.all(arr["q"] == 0) and np.all(arr["qd"] == 0)


def test_equilibrium_start_stays_at_rest():
    q_bar = np.array([0.01, 0.005, 0.02, -0.01, 0.0, 0.01])
    sc = Scenario(model=ROBOT, reference=SetPoint(q_bar), gains=GAINS, q0=q_bar, t_final=0.2)
    log = run_scenario(sc)
    expected = gravity_vector(q_bar, ROBOT) + stiffness_matrix(ROBOT) @ q_bar
    assert np.allclose(log.tau[0], expected, rtol=1e-14, atol=1e-12)
    arr = log.arrays()
    assert np.max(np.abs(arr["q"] - q_bar)) <= 1e-10
    assert np.max(np.abs(arr["qd"])) <= 1e-9
    assert all(s == "optimal" for s in log.qp_status)


def test_modes_agree_far_from_contact():
    ref = smooth_move(np.array([0.004, 0.0, 0.02, 0.0, 0.003, 0.02]), 2.0)
    logs = {}
    for mode in ("pd_plus", "cbf_qp"):
        sc = Scenario(model=ROBOT, reference=ref, gains=GAINS, controller=mode, t_final=3.0)
        logs[mode] = run_scenario(sc).arrays()
    assert np.max(np.abs(logs["cbf_qp"]["tau"] - logs["pd_plus"]["tau"])) <= 1e-8


def test_filter_binds_near_contact():
    qd = np.array([0.2, 0.0, -0.1, 0.0, 0.0, 0.0])
    sc = Scenario(model=ROBOT, reference=SetPoint(Q_BAR), gains=GAINS, q0=NEAR_CONTACT, qdot0=np.zeros(6))
    step = Controller(sc).step(NEAR_CONTACT, qd, 0.0)
    terms = dynamics_terms(NEAR_CONTACT, qd, ROBOT)
    rows = hocbf_rows(qd, terms, stack_constraints(NEAR_CONTACT, qd, ROBOT, sc.p))
    assert np.min(rows.psi2(step.tau_nom)) < 0
    assert step.status == "optimal"
    slack = rows.A @ step.tau - rows.lo
    scale = np.linalg.norm(rows.A, axis=1)
    assert np.all(slack >= -1e-8 * scale)
    assert step.active_set
    assert np.allclose(slack[list(step.active_set)], 0, atol=1e-8 * np.max(scale))
    # the applied input is the closest safe input to the nominal one
    ref = solve_qp(QpProblem.projection(step.tau_nom, rows.A, rows.lo))
    assert np.allclose(step.tau, ref.tau_star, atol=1e-9)


def test_relaxed_fallback_logged(caplog):
    qd = np.array([1.0, 0.0, -0.5, 0.0, 0.0, 0.0])
    terms = dynamics_terms(NEAR_CONTACT, qd, ROBOT)
    tau_nom = gravity_vector(NEAR_CONTACT, ROBOT) + terms.Kq
    box = (tau_nom - 1e-3, tau_nom + 1e-3)
    sc = Scenario(model=ROBOT, reference=SetPoint(NEAR_CONTACT), gains=GAINS, q0=NEAR_CONTACT, torque_box=box)
    ctl = Controller(sc)
    with caplog.at_level(logging.WARNING, logger="pcc_cbf.simulator"):
        step = ctl.step(NEAR_CONTACT, qd, 0.25)
    assert step.status == "relaxed"
    assert ctl.relaxed_steps == [0.25]
    assert "relaxed" in caplog.text
    assert np.all(step.tau >= box[0] - 1e-12) and np.all(step.tau <= box[1] + 1e-12)


def test_control_step_modes():
    sc = Scenario(model=ROBOT, reference=SetPoint(Q_BAR), gains=GAINS, controller="pd_plus")
    tau = control_step(np.zeros(6), np.zeros(6), 0.0, sc)
    terms = dynamics_terms(np.zeros(6), np.zeros(6), ROBOT)
    assert np.allclose(tau, terms.G + terms.K @ Q_BAR + GAINS.Kp @ Q_BAR)


def test_inadmissible_start_refused():
    q0 = np.array([0.0, 0.0, 0.0, 0.07, 0.0, -0.01])
    sc = Scenario(model=ROBOT, reference=SetPoint(Q_BAR), gains=GAINS, q0=q0)
    with pytest.raises(InadmissibleStart) as err:
        run_scenario(sc)
    assert err.value.rows and all(6 <= j < 12 for j in err.value.rows)
    assert "row" in str(err.value)
    # the unfiltered controller has no such precondition
    run_scenario(sc.replace(controller="pd_plus", t_final=0.01))


def test_approach_velocity_refused():
    # positive margin but closing fast enough that psi_1 = bd + p b < 0
    qd0 = np.array([0.0, 0.0, -1.0, 0.0, 0.0, 0.0])
    sc = Scenario(model=ROBOT, reference=SetPoint(Q_BAR), gains=GAINS, qdot0=qd0)
    with pytest.raises(InadmissibleStart):
        check_admissible(sc)


def test_scenario_validation():
    with pytest.raises(ValueError):
        Scenario(model=ROBOT, reference=SetPoint(Q_BAR), gains=GAINS, control_dt=1e-3, integrator_dt=2e-3)
    with pytest.raises(ValueError):
        Scenario(model=ROBOT, reference=SetPoint(Q_BAR), gains=GAINS, t_final=0.0105, control_dt=1e-3)
    with pytest.raises(ValueError):
        Scenario(model=ROBOT, reference=SetPoint(Q_BAR), gains=GAINS, controller="lqr")
    with pytest.raises(ValueError):
        Scenario(model=ROBOT, reference=SetPoint(Q_BAR[:3]), gains=GAINS)
    with pytest.raises(ValueError):
        Scenario(model=ROBOT, reference=SetPoint(Q_BAR), gains=GAINS, q0=[0, 0, -0.2, 0, 0, 0])
    sc = Scenario(model=ROBOT, reference=SetPoint(Q_BAR), gains=GAINS)
    assert sc.integrator_dt == pytest.approx(1e-4)
    assert sc.replace(control_dt=1e-4).integrator_dt == pytest.approx(1e-5)
    assert sc == Scenario(model=ROBOT, reference=SetPoint(Q_BAR.copy()), gains=GAINS)
    assert sc != sc.replace(p=4.0)


def test_divergence_returns_partial_log():
    sc = Scenario(
        model=ROBOT, reference=SetPoint(Q_BAR), gains=GAINS, controller="pd_plus",
        t_final=0.2, control_dt=1e-3, integrator_dt=1e-3, integrator="rk4",
    )
    with pytest.raises(SimulationError) as err:
        run_scenario(sc)
    partial = err.value.log
    assert 0 < len(partial) < sc.n_steps + 1


def test_steady_state_detection():
    sc = Scenario(model=ROBOT, reference=smooth_move(np.array([0.004, 0.0, 0.02, 0.0, 0.003, 0.02]), 0.5),
                  gains=GAINS, controller="pd_plus", t_final=3.0)
    log = run_scenario(sc)
    k = steady_state_index(log)
    assert k is not None
    speeds = np.linalg.norm(np.asarray(log.qd), axis=1)
    assert np.all(speeds[k:] < 1e-5)
    assert log.t[-1] - log.t[k] >= 0.5
    assert steady_state_index(log, speed=1e-30) is None
