"""Scene files (JSON) and the CSV formats for trajectories and reference measurements.

Floats are written with ``repr``, which round-trips IEEE doubles exactly, so
a trajectory read back from CSV is bit-identical to the one written.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import schedules
from .environment import Scene, SceneError, obstacle_from_dict, obstacle_to_dict
from .fitting import FitProblem, FitResult, ReferenceTrajectory
from .model import (
    PRISMATIC,
    ModelError,
    ModelSpec,
    RobotState,
    VineModel,
    build_model,
    configuration_from_joints,
    initial_state,
    prismatic_gaps,
)
from .stepper import SimConfig, Trajectory


class ParseError(ValueError):
    """Malformed input file; the message names the file and the offending key or line."""


# ------------------------------------------------------------------ scene files

_INPUT_KEYS = {
    "none": (),
    "uniform": ("total_rate",),
    "tip_first": ("total_rate", "max_gap"),
    "table": ("rows",),
}
_INITIAL_KEYS = {"base_heading", "initial_extension", "pin_angles", "gaps"}
_FIT_KEYS = {
    "weights", "per_joint", "initial_stiffness", "initial_damping", "max_outer_iterations",
    "max_inner_iterations", "tolerance", "stall_tolerance", "stall_iterations",
    "constraint_tolerance", "penalty",
}


@dataclass
class SceneSetup:
    """Everything a scene file describes, ready to simulate."""

    model: VineModel
    scene: Scene
    config: SimConfig
    state0: RobotState
    schedule: Any
    steps: int
    fit_options: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict, repr=False)

    def max_gap(self, steps: int | None = None) -> float:
        steps = self.steps if steps is None else steps
        gap0 = float(np.max(prismatic_gaps(self.model, self.state0.q), initial=0.0))
        if self.schedule is None:
            return gap0
        return self.schedule.max_gap(gap0, steps, self.config.dt)

    def fit_problem(self, **overrides) -> FitProblem:
        opts = dict(self.fit_options)
        opts.update(overrides)
        return FitProblem(self.model, self.scene, config=self.config, **opts)


def _check_keys(section: dict, allowed, where: str, required=()):
    if not isinstance(section, dict):
        raise ParseError(f"{where}: expected an object, got {type(section).__name__}")
    extra = sorted(set(section) - set(allowed))
    if extra:
        raise ParseError(f"{where}: unknown key(s) {', '.join(repr(k) for k in extra)}")
    missing = [k for k in required if k not in section]
    if missing:
        raise ParseError(f"{where}: missing key(s) {', '.join(repr(k) for k in missing)}")


def scene_from_dict(data: dict, origin: str = "<scene>") -> SceneSetup:
    """Build a :class:`SceneSetup` from a parsed scene document.

    Sections: ``model`` (ModelSpec fields), ``scene`` (``obstacles``,
    ``gravity``), ``sim`` (SimConfig fields plus ``steps``), ``input``
    (schedule), and the optional ``initial`` and ``fit`` sections.
    """
    _check_keys(data, {"model", "scene", "sim", "input", "initial", "fit", "description"}, origin, ("model",))

    spec_names = {f.name for f in fields(ModelSpec)}
    msec = data["model"]
    _check_keys(msec, spec_names, f"{origin}: model", ("body_count", "total_mass", "nominal_length"))
    kwargs = dict(msec)
    if isinstance(kwargs.get("contact_points"), list):
        kwargs["contact_points"] = tuple(tuple(s) for s in kwargs["contact_points"])
    if "base_position" in kwargs:
        kwargs["base_position"] = tuple(map(float, kwargs["base_position"]))
    try:
        model = build_model(ModelSpec(**kwargs))
    except (ModelError, TypeError, ValueError) as exc:
        raise ParseError(f"{origin}: model: {exc}") from exc

    ssec = data.get("scene", {})
    _check_keys(ssec, {"obstacles", "gravity"}, f"{origin}: scene")
    obstacles = []
    for idx, ob in enumerate(ssec.get("obstacles", [])):
        try:
            obstacles.append(obstacle_from_dict(ob))
        except (SceneError, TypeError, ValueError, AttributeError) as exc:
            raise ParseError(f"{origin}: scene.obstacles[{idx}]: {exc}") from exc
    try:
        scene = Scene(tuple(obstacles), tuple(map(float, ssec.get("gravity", (0.0, -9.81)))))
    except (SceneError, TypeError, ValueError) as exc:
        raise ParseError(f"{origin}: scene.gravity: {exc}") from exc

    cfg_names = {f.name for f in fields(SimConfig)}
    sim = dict(data.get("sim", {}))
    _check_keys(sim, cfg_names | {"steps"}, f"{origin}: sim")
    steps = int(sim.pop("steps", 0))
    if steps < 0:
        raise ParseError(f"{origin}: sim.steps must be non-negative")
    try:
        config = SimConfig(**sim)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{origin}: sim: {exc}") from exc

    init = data.get("initial", {})
    _check_keys(init, _INITIAL_KEYS, f"{origin}: initial")
    try:
        if "pin_angles" in init or "gaps" in init:
            angles = np.asarray(init.get("pin_angles", np.zeros(model.pin_count)), dtype=float)
            gaps = np.asarray(init.get("gaps", np.full(model.prismatic_count, model.nominal_extension)), dtype=float)
            if angles.shape != (model.pin_count,) or gaps.shape != (model.prismatic_count,):
                raise ValueError(f"need {model.pin_count} pin_angles and {model.prismatic_count} gaps")
            q0 = configuration_from_joints(model, angles, gaps)
            state0 = RobotState(q0, np.zeros_like(q0))
        else:
            state0 = initial_state(model, float(init.get("base_heading", 0.0)), init.get("initial_extension"))
    except (ModelError, ValueError, TypeError) as exc:
        raise ParseError(f"{origin}: initial: {exc}") from exc

    isec = data.get("input", {"type": "none"})
    if not isinstance(isec, dict) or isec.get("type") not in _INPUT_KEYS:
        kind = isec.get("type") if isinstance(isec, dict) else isec
        raise ParseError(f"{origin}: input.type: unknown schedule {kind!r} (expected one of {sorted(_INPUT_KEYS)})")
    kind = isec["type"]
    _check_keys(isec, {"type", *_INPUT_KEYS[kind]}, f"{origin}: input", _INPUT_KEYS[kind])
    try:
        if kind == "none":
            schedule = schedules.uniform(model, 0.0)
        elif kind == "uniform":
            schedule = schedules.uniform(model, float(isec["total_rate"]))
        elif kind == "tip_first":
            schedule = schedules.tip_first(model, float(isec["total_rate"]), float(isec["max_gap"]))
        else:
            schedule = schedules.table(model, isec["rows"])
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{origin}: input: {exc}") from exc

    fsec = data.get("fit", {})
    _check_keys(fsec, _FIT_KEYS, f"{origin}: fit")
    return SceneSetup(model, scene, config, state0, schedule, steps, dict(fsec), data)


def load_scene(path) -> SceneSetup:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: cannot read scene file ({exc.strerror})") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return scene_from_dict(data, str(path))


def scene_to_dict(scene: Scene) -> dict:
    return {"obstacles": [obstacle_to_dict(ob) for ob in scene.obstacles], "gravity": list(scene.gravity)}


# ------------------------------------------------------------- trajectory CSV

TRAJECTORY_COLUMNS = ("k", "t", "body", "x", "y", "theta", "vx", "vy", "omega")


def write_trajectory(path, traj: Trajectory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for k, st in enumerate(traj.states):
            q = st.q.reshape(-1, 3)
            v = st.v.reshape(-1, 3)
            t = repr(float(st.time))
            for b in range(len(q)):
                w.writerow([k, t, b, *map(repr, map(float, q[b])), *map(repr, map(float, v[b]))])


def _read_rows(path, columns):
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ParseError(f"{path}: cannot read ({exc.strerror})") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != tuple(columns):
            raise ParseError(f"{path}: line 1: expected header {','.join(columns)}, got {','.join(header or [])}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(columns):
                raise ParseError(f"{path}: line {lineno}: expected {len(columns)} fields, got {len(row)}")
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
    return np.array(rows, dtype=float).reshape(-1, len(columns))


def read_trajectory(path, dt: float | None = None) -> Trajectory:
    data = _read_rows(path, TRAJECTORY_COLUMNS)
    if not len(data):
        raise ParseError(f"{path}: trajectory has no rows")
    k = data[:, 0].astype(int)
    frames = k.max() + 1
    n = int(data[:, 2].max()) + 1
    if len(data) != frames * n or not np.array_equal(k, np.repeat(np.arange(frames), n)) or not np.array_equal(
        data[:, 2].astype(int), np.tile(np.arange(n), frames)
    ):
        raise ParseError(f"{path}: rows must be ordered by k then body with {n} bodies per frame")
    blocks = data.reshape(frames, n, len(TRAJECTORY_COLUMNS))
    times = blocks[:, 0, 1]
    if dt is None:
        dt = float(times[1] - times[0]) if frames > 1 else math.nan
    states = [RobotState(b[:, 3:6].ravel(), b[:, 6:9].ravel(), float(t)) for b, t in zip(blocks, times)]
    return Trajectory(dt, states)


# -------------------------------------------------------------- reference CSV

REFERENCE_COLUMNS = ("frame", "t", "point_index", "x", "y")
CONTACT_COLUMNS = ("frame", "contact_point_id", "obstacle_id")
INPUT_COLUMNS = ("frame", "joint_index", "u")


def sidecar_paths(path) -> tuple[Path, Path]:
    """Contact and input sidecar files that accompany a reference file."""
    path = Path(path)
    stem = path.with_suffix("")
    return Path(f"{stem}.contacts.csv"), Path(f"{stem}.inputs.csv")


def write_reference(path, ref: ReferenceTrajectory, model: VineModel) -> None:
    contacts_path, inputs_path = sidecar_paths(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REFERENCE_COLUMNS)
        for i, frame in enumerate(ref.points):
            t = repr(i * ref.dt)
            for j, (x, y) in enumerate(frame):
                w.writerow([i, t, j, repr(float(x)), repr(float(y))])
    with open(contacts_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CONTACT_COLUMNS)
        for i, pairs in enumerate(ref.active_contacts):
            for site, obstacle in pairs:
                w.writerow([i, site, obstacle])
    joint_ids = [idx for idx, j in enumerate(model.joints) if j.kind == PRISMATIC]
    with open(inputs_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INPUT_COLUMNS)
        for i, u in enumerate(ref.inputs):
            for idx, val in zip(joint_ids, u):
                w.writerow([i, idx, repr(float(val))])


def read_reference(path, model: VineModel, scene: Scene | None = None) -> ReferenceTrajectory:
    """Read a reference file and its sidecars.

    Inputs missing from the input sidecar default to zero; contact and
    input rows must name valid contact sites, obstacles and prismatic joints.
    """
    path = Path(path)
    data = _read_rows(path, REFERENCE_COLUMNS)
    if not len(data):
        raise ParseError(f"{path}: reference has no rows")
    frame = data[:, 0].astype(int)
    frames = frame.max() + 1
    counts = np.bincount(frame, minlength=frames)
    if np.any(counts != counts[0]):
        bad = int(np.nonzero(counts != counts[0])[0][0])
        raise ParseError(f"{path}: frame {bad} has {counts[bad]} points, frame 0 has {counts[0]}")
    order = np.lexsort((data[:, 2], frame))
    data = data[order]
    n_pts = int(counts[0])
    if not np.array_equal(data[:, 2].astype(int), np.tile(np.arange(n_pts), frames)):
        raise ParseError(f"{path}: point_index must run 0..{n_pts - 1} in every frame")
    points = data[:, 3:5].reshape(frames, n_pts, 2)
    times = data[::n_pts, 1]
    if frames < 2:
        raise ParseError(f"{path}: a reference needs at least two frames")
    steps = np.diff(times)
    dt = float(np.mean(steps))
    if not dt > 0 or np.max(np.abs(steps - dt)) > 1e-9 * max(1.0, abs(dt)):
        raise ParseError(f"{path}: frame times must be uniformly spaced")

    contacts_path, inputs_path = sidecar_paths(path)
    active = [[] for _ in range(frames)]
    if contacts_path.exists():
        for lineno, (f, site, ob) in enumerate(_read_rows(contacts_path, CONTACT_COLUMNS).astype(int), start=2):
            if not 0 <= f < frames or not 0 <= site < len(model.contact_sites):
                raise ParseError(f"{contacts_path}: line {lineno}: frame {f} / contact point {site} out of range")
            if scene is not None and not 0 <= ob < len(scene.obstacles):
                raise ParseError(f"{contacts_path}: line {lineno}: obstacle {ob} out of range")
            active[f].append((int(site), int(ob)))

    prism = {idx: k for k, idx in enumerate(i for i, j in enumerate(model.joints) if j.kind == PRISMATIC)}
    inputs = np.zeros((frames, model.prismatic_count))
    if inputs_path.exists():
        for lineno, (f, idx, u) in enumerate(_read_rows(inputs_path, INPUT_COLUMNS), start=2):
            f, idx = int(f), int(idx)
            if not 0 <= f < frames:
                raise ParseError(f"{inputs_path}: line {lineno}: frame {f} out of range")
            if idx not in prism:
                raise ParseError(f"{inputs_path}: line {lineno}: joint {idx} is not a prismatic joint")
            inputs[f, prism[idx]] = u
    return ReferenceTrajectory(points, inputs, active, dt)


# ---------------------------------------------------------------- fit output


def fit_summary(result: FitResult, model: VineModel, tip_mae: float | None = None) -> dict:
    def plain(x):
        return np.asarray(x).tolist()

    out = {
        "stiffness": plain(result.stiffness),
        "damping": plain(result.damping),
        "objective": result.objective,
        "converged": bool(result.converged),
        "iterations": result.iterations,
        "constraint_violation": result.constraint_violation,
        "kkt_residual": result.kkt_residual,
        "solve_time": result.solve_time,
        "measurement_error": plain(result.measurement_error),
        "measurement_rms": float(np.sqrt(np.mean(result.measurement_error**2))),
    }
    if tip_mae is not None:
        out["tip_mae"] = tip_mae
    return out


def fitted_trajectory(result: FitResult, dt: float) -> Trajectory:
    states = [RobotState(q, v, i * dt) for i, (q, v) in enumerate(zip(result.q, result.v))]
    return Trajectory(dt, states)
