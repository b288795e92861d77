"""Command-line interface: simulate, render, bench, fit, validate (plus synth for test data).

Exit codes: 0 success, 2 malformed input, 3 simulation or fit failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import run_bench
from .constraints import contact_eval, joint_constraint
from .environment import validate_scene
from .fitting import FitError, fit, project_reference
from .io import (
    ParseError,
    fit_summary,
    fitted_trajectory,
    load_scene,
    read_reference,
    read_trajectory,
    write_reference,
    write_trajectory,
)
from .model import endpoints
from .render import render_trajectory
from .stepper import SimulationError, Stepper, simulate
from .synthetic import make_case

EXIT_OK, EXIT_PARSE, EXIT_FAILURE = 0, 2, 3

log = logging.getLogger("vinesim")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load(args):
    setup = load_scene(args.scene)
    if getattr(args, "dt", None) is not None:
        if not args.dt > 0:
            raise ParseError(f"--dt must be positive, got {args.dt}")
        setup.config = replace(setup.config, dt=args.dt)
    if getattr(args, "steps", None) is not None:
        if args.steps < 0:
            raise ParseError(f"--steps must be non-negative, got {args.steps}")
        setup.steps = args.steps
    return setup


def trajectory_summary(setup, traj) -> dict:
    q = traj.q
    c = joint_constraint(setup.model, q).c
    out = {
        "steps": len(traj) - 1,
        "bodies": setup.model.n,
        "max_joint_residual": float(np.max(np.abs(c), initial=0.0)),
        "mean_step_ms": float(np.mean([d.step_time for d in traj.diagnostics]) * 1e3) if traj.diagnostics else 0.0,
        "max_active_contacts": max((int(np.sum(d.contact_impulses > 1e-9)) for d in traj.diagnostics), default=0),
    }
    if setup.scene.obstacles and setup.model.contact_sites:
        out["min_signed_distance"] = float(contact_eval(setup.model, setup.scene, q).phi.min())
    return out


def cmd_simulate(args) -> int:
    setup = _load(args)
    stepper = Stepper(setup.model, setup.scene, setup.config)
    try:
        traj = simulate(setup.model, setup.scene, setup.state0, setup.schedule, setup.steps, setup.config, stepper)
    except SimulationError as exc:
        if args.out and exc.partial is not None:
            write_trajectory(args.out, exc.partial)
        raise CliError(f"simulation failed at step {exc.step_index}: {exc}", EXIT_FAILURE) from exc
    if args.out:
        write_trajectory(args.out, traj)
    print(json.dumps(trajectory_summary(setup, traj), indent=2))
    return EXIT_OK


def cmd_render(args) -> int:
    if args.stride < 1:
        raise ParseError(f"--stride must be at least 1, got {args.stride}")
    setup = _load(args)
    traj = read_trajectory(args.trajectory)
    if traj.q.shape[1] != 3 * setup.model.n:
        raise ParseError(
            f"{args.trajectory}: trajectory has {traj.q.shape[1] // 3} bodies, scene model has {setup.model.n}"
        )
    paths = render_trajectory(setup.model, setup.scene, traj, args.out, args.stride)
    print(f"wrote {len(paths)} frame(s) to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        counts = [int(b) for b in args.bodies.split(",") if b.strip()]
    except ValueError as exc:
        raise ParseError(f"--bodies must be a comma-separated list of integers, got {args.bodies!r}") from exc
    base = load_scene(args.scene).source if args.scene else None
    try:
        report = run_bench(counts, steps=args.steps, repeats=args.repeats, dt=args.dt, base=base)
    except ValueError as exc:
        raise ParseError(str(exc)) from exc
    except SimulationError as exc:
        raise CliError(f"bench simulation failed: {exc}", EXIT_FAILURE) from exc
    print(report.table())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK


def cmd_fit(args) -> int:
    setup = _load(args)
    ref = read_reference(args.ref, setup.model, setup.scene)
    problem = setup.fit_problem()
    t0 = time.perf_counter()
    try:
        q0, v0, ok = project_reference(setup.model, setup.scene, ref, polish=False)
        if not np.all(ok):
            log.warning("projection did not converge on %d frame(s)", int(np.sum(~ok)))
        result = fit(problem, ref, (q0, v0))
    except (FitError, SimulationError, np.linalg.LinAlgError) as exc:
        raise CliError(f"fit failed: {exc}", EXIT_FAILURE) from exc
    tip_meas = ref.points[:, -1, :]
    tip_fit = endpoints(setup.model, result.q)[1][:, -1, :]
    tip_mae = float(np.mean(np.hypot(*(tip_fit - tip_meas).T)))
    summary = fit_summary(result, setup.model, tip_mae)
    summary["wall_time"] = time.perf_counter() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fit.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_trajectory(out / "trajectory.csv", fitted_trajectory(result, ref.dt))
    print(
        f"K = {np.round(result.stiffness, 6)}  C = {np.round(result.damping, 6)}  objective {result.objective:.6g}  "
        f"tip MAE {tip_mae * 1e3:.3f} mm  converged {result.converged}"
    )
    if not result.converged:
        raise CliError("fit did not converge; best iterate written", EXIT_FAILURE)
    return EXIT_OK


def cmd_validate(args) -> int:
    setup = _load(args)
    report = validate_scene(setup.scene, setup.model, setup.max_gap())
    print(f"contact point spacing {report.max_spacing:.4g} m, smallest feature radius {report.min_feature_radius:.4g} m")
    for w in report.warnings:
        print(f"warning: {w}")
    print("ok" if report.ok else f"{len(report.warnings)} warning(s)")
    return EXIT_OK


def cmd_synth(args) -> int:
    setup = _load(args)
    try:
        case = make_case(setup, seed=args.seed, noise=args.noise, n_pts=args.points, start=args.start)
    except SimulationError as exc:
        raise CliError(f"simulation failed at step {exc.step_index}: {exc}", EXIT_FAILURE) from exc
    write_reference(args.out, case.reference, setup.model)
    print(f"wrote {case.reference.frames} frames of {case.reference.n_pts} points (from frame {case.start}) to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vinesim", description="Vine robot simulator and parameter fitting.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, steps=True):
        p.add_argument("--scene", required=True, help="scene JSON file")
        p.add_argument("--dt", type=float, help="override the scene timestep, s")
        if steps:
            p.add_argument("--steps", type=int, help="override the scene step count")

    p = sub.add_parser("simulate", help="run a scene and write the trajectory CSV")
    common(p)
    p.add_argument("--out", help="trajectory CSV path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("render", help="write SVG frames of a trajectory")
    p.add_argument("trajectory", help="trajectory CSV")
    common(p, steps=False)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--stride", type=int, default=10)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bench", help="per-step runtime versus body count")
    p.add_argument("--bodies", default="10,20,30,40,60")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--repeats", type=int, default=3, help="runs per body count; the fastest is reported")
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--scene", default=None, help="base scene (default: shipped circle scene)")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("fit", help="fit stiffness and damping to a reference")
    common(p, steps=False)
    p.add_argument("--ref", required=True, help="reference CSV (sidecars found next to it)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("validate", help="check the contact spacing rule for a scene")
    common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("synth", help="write a synthetic noisy reference simulated from a scene")
    common(p)
    p.add_argument("--out", required=True, help="reference CSV path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=1e-3, help="point noise std, m")
    p.add_argument("--points", type=int, default=21)
    p.add_argument("--start", type=int, default=None, help="first frame kept (default: after first contact)")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_PARSE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
