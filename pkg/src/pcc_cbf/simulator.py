"""Closed-loop simulation with a zero-order hold on the control input."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .control import DEFAULT_P, PdPlusGains, hocbf_rows, pd_plus, psi_sequence
from .dynamics import DynamicsError, dynamics_terms
from .integrators import METHODS, integrate
from .kinematics import ConstraintSet, stack_constraints
from .model import RobotModel, validate_config, validate_rate
from .qp import OPTIMAL, QpProblem, QpSolver, solve_qp_relaxed

log = logging.getLogger(__name__)

CONTROLLERS = ("pd_plus", "cbf_qp")
RELAX_PENALTY = 1e6
STEADY_SPEED = 1e-5
STEADY_HOLD = 0.5


class InadmissibleStart(ValueError):
    """The initial state is outside the safe set of the barrier functions."""

    def __init__(self, message, rows):
        super().__init__(message)
        self.rows = rows


class SimulationError(RuntimeError):
    """A run stopped early; ``log`` holds the records up to the failure."""

    def __init__(self, message, log):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True, eq=False)
class Scenario:
    model: RobotModel
    reference: object
    gains: PdPlusGains
    controller: str = "cbf_qp"
    p: float = DEFAULT_P
    q0: np.ndarray | None = None
    qdot0: np.ndarray | None = None
    t_final: float = 10.0
    control_dt: float = 1e-3
    integrator_dt: float | None = None
    integrator: str = "imex"
    torque_box: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        n = self.model.ndof
        q0 = np.zeros(n) if self.q0 is None else np.asarray(self.q0, dtype=float)
        qdot0 = np.zeros(n) if self.qdot0 is None else np.asarray(self.qdot0, dtype=float)
        object.__setattr__(self, "q0", validate_config(q0, self.model))
        object.__setattr__(self, "qdot0", validate_rate(qdot0, self.model))
        if self.integrator_dt is None:
            object.__setattr__(self, "integrator_dt", self.control_dt / 10)
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}, got {self.controller!r}")
        if self.integrator not in METHODS:
            raise ValueError(f"integrator must be one of {METHODS}, got {self.integrator!r}")
        if not self.p > 0:
            raise ValueError("class-K coefficient p must be positive")
        if not (self.t_final > 0 and self.control_dt > 0 and self.integrator_dt > 0):
            raise ValueError("t_final, control_dt and integrator_dt must be positive")
        if self.integrator_dt > self.control_dt * (1 + 1e-12):
            raise ValueError("integrator_dt must not exceed control_dt")
        steps = self.t_final / self.control_dt
        if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
            raise ValueError("control_dt must divide t_final")
        if self.gains.Kp.shape[0] != n:
            raise ValueError(f"gains sized for {self.gains.Kp.shape[0]} coordinates, robot has {n}")
        if np.asarray(self.reference(0.0)[0]).shape != (n,):
            raise ValueError(f"reference must have length {n}")

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if f.name == "torque_box":
                if (a is None) != (b is None):
                    return False
                if a is not None and not all(np.array_equal(x, y) for x, y in zip(a, b)):
                    return False
            elif isinstance(a, np.ndarray):
                if not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.control_dt))

    def replace(self, **changes) -> "Scenario":
        if "control_dt" in changes and "integrator_dt" not in changes:
            changes["integrator_dt"] = changes["control_dt"] / 10
        return replace(self, **changes)


@dataclass
class StepResult:
    tau_nom: np.ndarray
    tau: np.ndarray
    constraints: ConstraintSet
    status: str
    solve_time: float
    active_set: tuple[int, ...] = ()


class Controller:
    """Per-run controller: PD+ alone or PD+ filtered through the barrier QP.

    Holds the QP warm start, so one instance belongs to one run.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.solver = QpSolver()
        self.relaxed_steps: list[float] = []

    def step(self, q, qdot, t: float) -> StepResult:
        sc = self.scenario
        terms = dynamics_terms(q, qdot, sc.model)
        tau_nom = pd_plus(q, qdot, t, sc.reference, sc.gains, terms)
        cons = stack_constraints(q, qdot, sc.model, sc.p)
        if sc.controller == "pd_plus":
            tau = tau_nom if sc.torque_box is None else np.clip(tau_nom, *sc.torque_box)
            return StepResult(tau_nom, tau, cons, "skipped", 0.0)
        start = time.perf_counter()
        rows = hocbf_rows(qdot, terms, cons)
        problem = QpProblem.projection(tau_nom, rows.A, rows.lo, box=sc.torque_box)
        sol = self.solver.solve(problem)
        status = sol.status
        if status != OPTIMAL:
            log.warning("t=%.6g: safety QP %s, falling back to the relaxed problem", t, status)
            self.relaxed_steps.append(t)
            self.solver.reset()
            sol = solve_qp_relaxed(problem, RELAX_PENALTY)
            status = "relaxed"
        elapsed = time.perf_counter() - start
        return StepResult(tau_nom, sol.tau_star, cons, status, elapsed, sol.active_set)


def control_step(q, qdot, t: float, scenario: Scenario, controller: Controller | None = None) -> np.ndarray:
    """Input applied over ``[t, t + control_dt)``."""
    controller = controller or Controller(scenario)
    return controller.step(q, qdot, t).tau


def integrate_interval(q, qdot, tau, model: RobotModel, dt_total: float, dt_sub: float, method: str = "rk4"):
    """Hold ``tau`` for ``dt_total`` seconds; raises on a non-finite state."""
    q_new, qd_new = integrate(q, qdot, tau, model, dt_total, dt_sub, method)
    if not (np.all(np.isfinite(q_new)) and np.all(np.isfinite(qd_new))):
        raise DynamicsError(
            f"state became non-finite within {dt_total:g} s (substep {dt_sub:g} s, {method})"
        )
    return q_new, qd_new


def check_admissible(scenario: Scenario) -> ConstraintSet:
    """Raise ``InadmissibleStart`` unless ``psi_0 > 0`` and ``psi_1 > 0`` on every row at t = 0."""
    cons = stack_constraints(scenario.q0, scenario.qdot0, scenario.model, scenario.p)
    psi0, psi1 = psi_sequence(cons.b, cons.J @ scenario.qdot0, scenario.p, 1)
    bad = [int(j) for j in np.flatnonzero((psi0 <= 0) | (psi1 <= 0))]
    if bad:
        detail = ", ".join(f"row {j} (b={psi0[j]:.6g}, psi1={psi1[j]:.6g})" for j in bad)
        raise InadmissibleStart(f"initial state violates the safety margin: {detail}", bad)
    return cons


@dataclass
class TrajectoryLog:
    t: list = field(default_factory=list)
    q: list = field(default_factory=list)
    qd: list = field(default_factory=list)
    tau_nom: list = field(default_factory=list)
    tau: list = field(default_factory=list)
    b: list = field(default_factory=list)
    qp_status: list = field(default_factory=list)
    qp_time_us: list = field(default_factory=list)

    def append(self, t, q, qd, step: StepResult):
        self.t.append(float(t))
        self.q.append(np.array(q, dtype=float))
        self.qd.append(np.array(qd, dtype=float))
        self.tau_nom.append(np.array(step.tau_nom, dtype=float))
        self.tau.append(np.array(step.tau, dtype=float))
        self.b.append(np.array(step.constraints.b, dtype=float))
        self.qp_status.append(step.status)
        self.qp_time_us.append(step.solve_time * 1e6)

    def __len__(self):
        return len(self.t)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "t": np.asarray(self.t),
            "q": np.asarray(self.q),
            "qd": np.asarray(self.qd),
            "tau_nom": np.asarray(self.tau_nom),
            "tau": np.asarray(self.tau),
            "b": np.asarray(self.b),
            "qp_time_us": np.asarray(self.qp_time_us),
        }

    def min_b(self) -> float:
        return float(np.min(self.b)) if self.b else math.nan


def run_scenario(scenario: Scenario) -> TrajectoryLog:
    """Alternate control and integration on the control grid until ``t_final``.

    There is one record per grid point, the last one at ``t_final``.
    """
    if scenario.controller == "cbf_qp":
        check_admissible(scenario)
    controller = Controller(scenario)
    out = TrajectoryLog()
    q, qd = scenario.q0.copy(), scenario.qdot0.copy()
    dt = scenario.control_dt
    for k in range(scenario.n_steps + 1):
        t = k * dt
        try:
            step = controller.step(q, qd, t)
        except (DynamicsError, FloatingPointError, np.linalg.LinAlgError) as exc:
            raise SimulationError(f"control failed at t={t:.6g}: {exc}", out) from exc
        out.append(t, q, qd, step)
        if k == scenario.n_steps:
            break
        try:
            q, qd = integrate_interval(q, qd, step.tau, scenario.model, dt, scenario.integrator_dt, scenario.integrator)
        except DynamicsError as exc:
            raise SimulationError(f"integration failed after t={t:.6g}: {exc}", out) from exc
    return out


def steady_state_index(log: TrajectoryLog, speed: float = STEADY_SPEED, hold: float = STEADY_HOLD) -> int | None:
    """First record from which ``||qd|| < speed`` holds for at least ``hold`` seconds up to the end."""
    t = np.asarray(log.t)
    slow = np.linalg.norm(np.asarray(log.qd), axis=1) < speed
    if not slow.size or not slow[-1]:
        return None
    k = len(slow) - 1
    while k > 0 and slow[k - 1]:
        k -= 1
    return k if t[-1] - t[k] >= hold else None
