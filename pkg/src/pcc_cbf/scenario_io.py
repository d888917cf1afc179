"""Scenario files (INI-style) and trajectory CSV logs.

A scenario file has the sections ``[robot]``, one ``[segment.N]`` per segment
(numbered from 0), ``[controller]``, ``[reference]``, ``[sim]`` and optionally
``[output]``. Vectors are comma-separated; waypoint lists separate vectors with
semicolons. Every quantity is SI, angles in radians.
"""

from __future__ import annotations

import configparser
import csv
import io
import math
from importlib import resources
from pathlib import Path

import numpy as np

from .control import PdPlusGains, SetPoint, WaypointTrajectory
from .model import RobotModel, SegmentParams
from .simulator import Scenario, TrajectoryLog


class ConfigError(ValueError):
    """Malformed scenario file; the message names the offending key."""


SEGMENT_KEYS = ("L0", "d", "r", "mass", "kappa_theta", "kappa_L", "beta_theta", "beta_L", "epsilon")
SECTIONS = {
    "robot": ({"gravity"}, set()),
    "controller": ({"mode", "Kp", "Kd"}, {"p", "epsilon", "torque_min", "torque_max"}),
    "reference": (set(), {"set_point", "waypoint_times", "waypoints"}),
    "sim": ({"t_final", "control_dt"}, {"integrator_dt", "integrator", "q0", "qdot0"}),
    "output": (set(), {"trajectory"}),
}
REQUIRED_SECTIONS = ("robot", "controller", "reference", "sim")


def bundled_config(name: str = "paper_sim.cfg") -> Path:
    return Path(str(resources.files("pcc_cbf") / "data" / name))


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(default_section="__defaults__", interpolation=None)
    cp.optionxform = str
    return cp


def _floats(text: str, where: str) -> np.ndarray:
    try:
        values = [float(v) for v in text.replace("\n", " ").split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"{where}: expected comma-separated numbers, got {text!r}") from exc
    if not all(math.isfinite(v) for v in values):
        raise ConfigError(f"{where}: values must be finite")
    return np.array(values)


def _float(text: str, where: str) -> float:
    arr = _floats(text, where)
    if arr.shape != (1,):
        raise ConfigError(f"{where}: expected a single number, got {text!r}")
    return float(arr[0])


def _vector(text: str, where: str, n: int) -> np.ndarray:
    arr = _floats(text, where)
    if arr.shape == (1,):
        return np.full(n, arr[0])
    if arr.shape != (n,):
        raise ConfigError(f"{where}: expected 1 or {n} values, got {arr.shape[0]}")
    return arr


def _exact_vector(text: str, where: str, n: int) -> np.ndarray:
    arr = _floats(text, where)
    if arr.shape != (n,):
        raise ConfigError(f"{where}: expected {n} values, got {arr.shape[0]}")
    return arr


def _check_keys(section, name, required, optional):
    keys = set(section.keys())
    unknown = sorted(keys - required - optional)
    if unknown:
        raise ConfigError(f"unknown key {name}.{unknown[0]}")
    missing = sorted(required - keys)
    if missing:
        raise ConfigError(f"missing required key {name}.{missing[0]}")


def parse_scenario(text: str, source: str = "<config>") -> tuple[Scenario, dict]:
    """Build a ``Scenario`` from scenario-file text.

    Returns the scenario and the ``[output]`` settings.
    """
    cp = _parser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    seg_names = []
    for name in cp.sections():
        if name.startswith("segment."):
            seg_names.append(name)
        elif name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    for name in REQUIRED_SECTIONS:
        if not cp.has_section(name):
            raise ConfigError(f"missing required section [{name}]")
    try:
        indices = sorted(int(s.split(".", 1)[1]) for s in seg_names)
    except ValueError as exc:
        raise ConfigError(f"segment sections must be named [segment.N]: {seg_names}") from exc
    if not indices:
        raise ConfigError("missing required section [segment.0]")
    if indices != list(range(len(indices))):
        raise ConfigError(f"segment sections must be numbered 0..{len(indices) - 1}, got {indices}")
    for name in SECTIONS:
        if cp.has_section(name):
            _check_keys(cp[name], name, *SECTIONS[name])

    ctrl = cp["controller"]
    eps_override = _float(ctrl["epsilon"], "controller.epsilon") if "epsilon" in ctrl else None
    segments = []
    for i in indices:
        name = f"segment.{i}"
        sec = cp[name]
        _check_keys(sec, name, set(SEGMENT_KEYS) - ({"epsilon"} if eps_override is not None else set()), {"phi", "epsilon"})
        kwargs = {k: _float(sec[k], f"{name}.{k}") for k in SEGMENT_KEYS if k in sec}
        if eps_override is not None:
            kwargs["epsilon"] = eps_override
        if "phi" in sec:
            kwargs["phi"] = tuple(_exact_vector(sec["phi"], f"{name}.phi", 6))
        try:
            segments.append(SegmentParams(**kwargs))
        except ValueError as exc:
            raise ConfigError(f"{name}: {exc}") from exc
    try:
        model = RobotModel(segments=tuple(segments), gravity=tuple(_exact_vector(cp["robot"]["gravity"], "robot.gravity", 3)))
    except ValueError as exc:
        raise ConfigError(f"robot: {exc}") from exc
    n = model.ndof

    try:
        gains = PdPlusGains(Kp=_vector(ctrl["Kp"], "controller.Kp", n), Kd=_vector(ctrl["Kd"], "controller.Kd", n))
    except ValueError as exc:
        raise ConfigError(f"controller: {exc}") from exc
    box = None
    if ("torque_min" in ctrl) != ("torque_max" in ctrl):
        raise ConfigError("controller.torque_min and controller.torque_max must be given together")
    if "torque_min" in ctrl:
        box = (_vector(ctrl["torque_min"], "controller.torque_min", n), _vector(ctrl["torque_max"], "controller.torque_max", n))

    ref = cp["reference"]
    if "set_point" in ref:
        if "waypoints" in ref or "waypoint_times" in ref:
            raise ConfigError("reference: give either set_point or waypoints, not both")
        reference = SetPoint(_exact_vector(ref["set_point"], "reference.set_point", n))
    elif "waypoints" in ref and "waypoint_times" in ref:
        times = _floats(ref["waypoint_times"], "reference.waypoint_times")
        pts = [_exact_vector(chunk, f"reference.waypoints[{k}]", n) for k, chunk in enumerate(ref["waypoints"].split(";"))]
        try:
            reference = WaypointTrajectory(times, np.array(pts))
        except ValueError as exc:
            raise ConfigError(f"reference: {exc}") from exc
    else:
        raise ConfigError("missing required key reference.set_point (or reference.waypoints with reference.waypoint_times)")

    sim = cp["sim"]
    kwargs = dict(
        model=model,
        reference=reference,
        gains=gains,
        controller=ctrl["mode"].strip(),
        p=_float(ctrl["p"], "controller.p") if "p" in ctrl else 5.0,
        t_final=_float(sim["t_final"], "sim.t_final"),
        control_dt=_float(sim["control_dt"], "sim.control_dt"),
        torque_box=box,
    )
    if "integrator_dt" in sim:
        kwargs["integrator_dt"] = _float(sim["integrator_dt"], "sim.integrator_dt")
    if "integrator" in sim:
        kwargs["integrator"] = sim["integrator"].strip()
    if "q0" in sim:
        kwargs["q0"] = _exact_vector(sim["q0"], "sim.q0", n)
    if "qdot0" in sim:
        kwargs["qdot0"] = _exact_vector(sim["qdot0"], "sim.qdot0", n)
    try:
        scenario = Scenario(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}") from exc
    output = dict(cp["output"]) if cp.has_section("output") else {}
    return scenario, output


def load_scenario(path) -> tuple[Scenario, dict]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_scenario(text, str(path))


def _fmt(values) -> str:
    return ", ".join(repr(float(v)) for v in np.atleast_1d(values))


def emit_scenario(scenario: Scenario, output: dict | None = None) -> str:
    """Scenario-file text that ``parse_scenario`` turns back into an equal scenario."""
    cp = _parser()
    cp["robot"] = {"gravity": _fmt(scenario.model.gravity)}
    for i, seg in enumerate(scenario.model.segments):
        sec = {k: repr(float(getattr(seg, k))) for k in SEGMENT_KEYS}
        sec["phi"] = _fmt(seg.phi)
        cp[f"segment.{i}"] = sec
    ctrl = {
        "mode": scenario.controller,
        "Kp": _fmt(np.diagonal(scenario.gains.Kp)),
        "Kd": _fmt(np.diagonal(scenario.gains.Kd)),
        "p": repr(float(scenario.p)),
    }
    if scenario.torque_box is not None:
        ctrl["torque_min"] = _fmt(scenario.torque_box[0])
        ctrl["torque_max"] = _fmt(scenario.torque_box[1])
    cp["controller"] = ctrl
    ref = scenario.reference
    if isinstance(ref, SetPoint):
        cp["reference"] = {"set_point": _fmt(ref.q_bar)}
    elif isinstance(ref, WaypointTrajectory):
        cp["reference"] = {
            "waypoint_times": _fmt(ref.times),
            "waypoints": "; ".join(_fmt(p) for p in ref.points),
        }
    else:
        raise TypeError(f"cannot write reference of type {type(ref).__name__}")
    cp["sim"] = {
        "t_final": repr(float(scenario.t_final)),
        "control_dt": repr(float(scenario.control_dt)),
        "integrator_dt": repr(float(scenario.integrator_dt)),
        "integrator": scenario.integrator,
        "q0": _fmt(scenario.q0),
        "qdot0": _fmt(scenario.qdot0),
    }
    if output:
        cp["output"] = dict(output)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def csv_header(n_segments: int) -> list[str]:
    n = 3 * n_segments
    cols = ["t"]
    for name in ("q", "qd", "tau_nom", "tau"):
        cols += [f"{name}{i}" for i in range(n)]
    cols += [f"b{j}" for j in range(6 * n_segments)]
    return cols + ["qp_status", "qp_time_us"]


def _num(x) -> str:
    return format(float(x), ".17g")


def write_trajectory_csv(log: TrajectoryLog, n_segments: int, dest) -> None:
    """One header row, then one row per control step in the fixed column order."""
    own = isinstance(dest, (str, Path))
    fh = open(dest, "w", newline="") if own else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(n_segments))
        for k in range(len(log)):
            row = [_num(log.t[k])]
            for arr in (log.q[k], log.qd[k], log.tau_nom[k], log.tau[k], log.b[k]):
                row += [_num(v) for v in arr]
            row += [log.qp_status[k], _num(log.qp_time_us[k])]
            w.writerow(row)
    finally:
        if own:
            fh.close()


class CsvError(ValueError):
    pass


def read_trajectory_csv(path) -> tuple[TrajectoryLog, int]:
    """Parse a trajectory CSV back into a log; returns the log and the segment count."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CsvError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise CsvError(f"{path}: empty file")
    header = rows[0]
    n_b = sum(1 for c in header if c.startswith("b") and c[1:].isdigit())
    if n_b == 0 or n_b % 6:
        raise CsvError(f"{path}: cannot infer segment count from header")
    n_seg = n_b // 6
    if header != csv_header(n_seg):
        raise CsvError(f"{path}: unexpected header")
    n = 3 * n_seg
    log = TrajectoryLog()
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise CsvError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            vals = [float(v) for v in row[:-2]]
            qp_time = float(row[-1])
        except ValueError as exc:
            raise CsvError(f"{path}:{lineno}: {exc}") from exc
        v = np.array(vals)
        log.t.append(v[0])
        off = 1
        for name in ("q", "qd", "tau_nom", "tau"):
            getattr(log, name).append(v[off : off + n])
            off += n
        log.b.append(v[off : off + 2 * n])
        log.qp_status.append(row[-2])
        log.qp_time_us.append(qp_time)
    if len(log) == 0:
        raise CsvError(f"{path}: no data rows")
    return log, n_seg
