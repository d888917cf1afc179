"""Command-line front end: ``simulate``, ``check`` and ``compare``.

Exit codes: 0 success, 2 bad input (config, CSV or grid mismatch), 3 initial
state outside the safe set, 4 numerical failure during the run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .scenario_io import ConfigError, CsvError, bundled_config, load_scenario, read_trajectory_csv, write_trajectory_csv
from .simulator import CONTROLLERS, InadmissibleStart, SimulationError, check_admissible, run_scenario, steady_state_index

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INADMISSIBLE = 3
EXIT_NUMERICAL = 4


def _resolve_config(path: str) -> Path:
    p = Path(path)
    if not p.exists() and p.parent == Path("."):
        bundled = bundled_config(p.name)
        if bundled.exists():
            return bundled
    return p


def _apply_overrides(scenario, args):
    changes = {}
    if getattr(args, "controller", None):
        changes["controller"] = args.controller
    if getattr(args, "t_final", None) is not None:
        changes["t_final"] = args.t_final
    if getattr(args, "p", None) is not None:
        changes["p"] = args.p
    if getattr(args, "dt", None) is not None:
        changes["control_dt"] = args.dt
        changes["integrator_dt"] = min(scenario.integrator_dt, args.dt)
    if not changes:
        return scenario
    try:
        return scenario.replace(**changes)
    except ValueError as exc:
        raise ConfigError(f"override: {exc}") from exc


def steady_torque_norm(log) -> tuple[float, bool]:
    """Norm of the applied input at steady state (or at the last record if never steady)."""
    k = steady_state_index(log)
    tau = np.asarray(log.tau)
    if k is None:
        return float(np.linalg.norm(tau[-1])), False
    return float(np.mean(np.linalg.norm(tau[k:], axis=1))), True


def _summary(log, out=None):
    out = out or sys.stdout
    b = np.asarray(log.b)
    print(f"records: {len(log)}  t_final: {log.t[-1]:.6g} s", file=out)
    print(f"constraint rows: {b.shape[1]}", file=out)
    for j, v in enumerate(b.min(axis=0)):
        print(f"  min b{j}: {v:+.6e} m", file=out)
    print(f"min b overall: {b.min():+.6e} m", file=out)
    norm, steady = steady_torque_norm(log)
    tag = "steady-state" if steady else "final (not steady)"
    print(f"{tag} |tau|: {norm:.6g}", file=out)
    print(f"final |qd|: {np.linalg.norm(log.qd[-1]):.3e}", file=out)
    counts = Counter(log.qp_status)
    print("qp status: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())), file=out)
    times = np.asarray(log.qp_time_us)
    solved = times[np.asarray(log.qp_status) != "skipped"]
    if solved.size:
        print(f"qp time: median {np.median(solved):.1f} us, max {solved.max():.1f} us", file=out)


def cmd_simulate(config_path, out_path=None, controller=None, t_final=None, dt=None, p=None) -> int:
    args = argparse.Namespace(controller=controller, t_final=t_final, dt=dt, p=p)
    try:
        scenario, output = load_scenario(_resolve_config(config_path))
        scenario = _apply_overrides(scenario, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    out_path = out_path or output.get("trajectory")
    if not out_path:
        print("error: no output path (use --out or [output] trajectory)", file=sys.stderr)
        return EXIT_INPUT
    try:
        log = run_scenario(scenario)
    except InadmissibleStart as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INADMISSIBLE
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if len(exc.log):
            write_trajectory_csv(exc.log, scenario.model.n_segments, out_path)
            print(f"partial log ({len(exc.log)} records) written to {out_path}", file=sys.stderr)
        return EXIT_NUMERICAL
    write_trajectory_csv(log, scenario.model.n_segments, out_path)
    print(f"controller: {scenario.controller}  wrote {out_path}")
    _summary(log)
    return EXIT_OK


def cmd_check(config_path) -> int:
    try:
        scenario, _ = load_scenario(_resolve_config(config_path))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        cons = check_admissible(scenario)
    except InadmissibleStart as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INADMISSIBLE
    print(f"segments: {scenario.model.n_segments}  rows: {cons.b.shape[0]}  controller: {scenario.controller}")
    for j, v in enumerate(cons.b):
        print(f"  b{j} = {v:.6g} m")
    print("initial state admissible")
    return EXIT_OK


def cmd_compare(log_a, log_b) -> int:
    try:
        a, na = read_trajectory_csv(log_a)
        b, nb = read_trajectory_csv(log_b)
    except CsvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if na != nb or len(a) != len(b) or not np.array_equal(np.asarray(a.t), np.asarray(b.t)):
        print("error: logs are not on the same time grid", file=sys.stderr)
        return EXIT_INPUT
    min_a, min_b = float(np.min(a.b)), float(np.min(b.b))
    ta, sa = steady_torque_norm(a)
    tb, sb = steady_torque_norm(b)
    print(f"min b   A: {min_a:+.6e}  B: {min_b:+.6e}  diff: {min_a - min_b:+.6e}")
    print(f"|tau|   A: {ta:.6g}{'' if sa else ' (not steady)'}  B: {tb:.6g}{'' if sb else ' (not steady)'}")
    ratio = ta / tb if tb != 0 else (1.0 if ta == 0 else float("inf"))
    print(f"torque ratio A/B: {ratio:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcc-cbf", description="Safe self-contact control for PCC soft-rigid manipulators.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario and write the trajectory CSV")
    sim.add_argument("--config", required=True)
    sim.add_argument("--out")
    sim.add_argument("--controller", choices=CONTROLLERS)
    sim.add_argument("--t-final", type=float, dest="t_final")
    sim.add_argument("--dt", type=float, help="control period in seconds")
    sim.add_argument("--p", type=float, help="class-K coefficient in 1/s")

    chk = sub.add_parser("check", help="validate a scenario and its initial state")
    chk.add_argument("--config", required=True)

    cmp_ = sub.add_parser("compare", help="compare two trajectory logs")
    cmp_.add_argument("log_a")
    cmp_.add_argument("log_b")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "simulate":
        return cmd_simulate(args.config, args.out, args.controller, args.t_final, args.dt, args.p)
    if args.command == "check":
        return cmd_check(args.config)
    return cmd_compare(args.log_a, args.log_b)


if __name__ == "__main__":
    sys.exit(main())
