"""Per-step runtime versus body count on the circle-buckling scenario."""

from __future__ import annotations

import copy
import gc
from dataclasses import asdict, dataclass, field

import numpy as np

from .io import SceneSetup, scene_from_dict
from .scenes import builtin_scene_data
from .stepper import Stepper, simulate


@dataclass
class BenchRow:
    body_count: int
    steps: int
    repeats: int
    mean_ms: float  # mean step time of the fastest repeat
    median_ms: float
    p95_ms: float
    qp_iterations_mean: float
    real_time: bool  # mean step time within one timestep
    deterministic: bool  # every repeat produced the identical trajectory


@dataclass
class BenchReport:
    dt: float
    rows: list[BenchRow] = field(default_factory=list)
    slope_ms_per_body: float = float("nan")
    intercept_ms: float = float("nan")

    def row(self, body_count: int) -> BenchRow:
        return next(r for r in self.rows if r.body_count == body_count)

    def ratio(self, big: int, small: int) -> float:
        return self.row(big).mean_ms / self.row(small).mean_ms

    def to_dict(self) -> dict:
        return {"dt": self.dt, "rows": [asdict(r) for r in self.rows],
                "slope_ms_per_body": self.slope_ms_per_body, "intercept_ms": self.intercept_ms}

    def table(self) -> str:
        lines = [f"{'bodies':>6} {'steps':>6} {'mean ms':>9} {'median ms':>10} {'p95 ms':>8} {'QP its':>7} {'real-time':>9}"]
        for r in self.rows:
            lines.append(
                f"{r.body_count:>6d} {r.steps:>6d} {r.mean_ms:>9.3f} {r.median_ms:>10.3f} {r.p95_ms:>8.3f} "
                f"{r.qp_iterations_mean:>7.1f} {'yes' if r.real_time else 'no':>9}"
            )
        lines.append(f"slope {self.slope_ms_per_body:.4f} ms/body, intercept {self.intercept_ms:.3f} ms")
        return "\n".join(lines)


def scaled_setup(base: dict, body_count: int, dt: float | None = None) -> SceneSetup:
    """The base scene with a different discretization of the same robot."""
    data = copy.deepcopy(base)
    data["model"]["body_count"] = int(body_count)
    for key in ("stiffness", "damping"):
        if isinstance(data["model"].get(key), list):
            raise ValueError("bench scenes need scalar stiffness and damping")
    if dt is not None:
        data.setdefault("sim", {})["dt"] = float(dt)
    return scene_from_dict(data, f"bench[{body_count}]")


def run_bench(
    body_counts,
    steps: int | None = None,
    repeats: int = 1,
    dt: float | None = None,
    base: dict | None = None,
) -> BenchReport:
    counts = [int(c) for c in body_counts]
    if len(counts) < 2:
        raise ValueError("the slope fit needs at least two body counts")
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise ValueError("body counts must be strictly increasing")
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    base = builtin_scene_data("circle") if base is None else base

    setups = {n: scaled_setup(base, n, dt) for n in counts}
    report_dt = setups[counts[0]].config.dt
    times = {n: [] for n in counts}
    iters = {n: [] for n in counts}
    finals = {n: [] for n in counts}
    # counts are interleaved inside each repeat so transient machine load hits them alike;
    # the collector is paused while timing, as timeit does
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeats):
            for n in counts:
                setup = setups[n]
                nsteps = setup.steps if steps is None else int(steps)
                stepper = Stepper(setup.model, setup.scene, setup.config)
                traj = simulate(setup.model, setup.scene, setup.state0, setup.schedule, nsteps, setup.config, stepper)
                times[n].append([d.step_time * 1e3 for d in traj.diagnostics])
                iters[n] += [d.iterations for d in traj.diagnostics]
                finals[n].append(traj.q)
                del traj
                gc.collect()
    finally:
        if gc_was_enabled:
            gc.enable()

    rows = []
    for n in counts:
        ms = np.array(times[n])
        # mean step time of the fastest repeat; the others carry interference from the rest of the machine
        mean = float(ms.mean(axis=1).min()) if ms.size else 0.0
        rows.append(BenchRow(
            body_count=n,
            steps=ms.shape[1],
            repeats=repeats,
            mean_ms=mean,
            median_ms=float(np.median(ms)) if ms.size else 0.0,
            p95_ms=float(np.percentile(ms, 95)) if ms.size else 0.0,
            qp_iterations_mean=float(np.mean(iters[n])) if iters[n] else 0.0,
            real_time=mean <= report_dt * 1e3,
            deterministic=all(np.array_equal(finals[n][0], q) for q in finals[n][1:]),
        ))
    slope, intercept = np.polyfit([r.body_count for r in rows], [r.mean_ms for r in rows], 1)
    return BenchReport(report_dt, rows, float(slope), float(intercept))
