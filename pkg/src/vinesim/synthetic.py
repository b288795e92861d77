"""Synthetic reference trajectories with known parameters, for testing the fit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fitting import ReferenceTrajectory, synthesize_reference
from .io import SceneSetup, load_scene
from .model import endpoints
from .scenes import builtin_scene_path
from .stepper import Trajectory

# frames dropped from the start of the oscillation run (release transient)
OSCILLATION_SKIP = 25


@dataclass
class SyntheticCase:
    setup: SceneSetup
    reference: ReferenceTrajectory
    truth: Trajectory  # the full simulated run
    start: int  # first simulated frame that appears in the reference

    @property
    def true_q(self) -> np.ndarray:
        return self.truth.q[self.start:]

    def tip_mae(self, q_fit: np.ndarray) -> float:
        """Mean distance between fitted and true tip positions, m."""
        m = self.setup.model
        tip_fit = endpoints(m, q_fit)[1][:, -1]
        tip_true = endpoints(m, self.true_q)[1][:, -1]
        return float(np.mean(np.hypot(*(tip_fit - tip_true).T)))


def first_contact_frame(truth: Trajectory, threshold: float = 1e-9) -> int | None:
    for k, info in enumerate(truth.diagnostics):
        if np.any(info.contact_impulses > threshold):
            return k + 1
    return None


def make_case(
    setup: SceneSetup,
    seed: int | None = 0,
    noise: float = 1e-3,
    n_pts: int = 21,
    start: int | None = None,
    steps: int | None = None,
) -> SyntheticCase:
    """Simulate the scene and sample noisy measurement points.

    With ``start=None`` a scene with obstacles is cropped to begin one frame
    after the first contact, and a scene without obstacles starts at frame 0.
    """
    steps = setup.steps if steps is None else steps
    inputs = setup.schedule
    if start is None:
        _, truth = synthesize_reference(setup.model, setup.scene, setup.state0, inputs, steps, n_pts, config=setup.config)
        first = first_contact_frame(truth) if setup.scene.obstacles else None
        start = 0 if first is None else first + 1
    rng = np.random.default_rng(seed)
    ref, truth = synthesize_reference(
        setup.model, setup.scene, setup.state0, inputs, steps, n_pts,
        noise=noise, rng=rng, config=setup.config, start=start,
    )
    return SyntheticCase(setup, ref, truth, start)


def oscillation_case(seed: int | None = 0, noise: float = 1e-3, n_pts: int = 21, **kw) -> SyntheticCase:
    setup = load_scene(builtin_scene_path("oscillation"))
    return make_case(setup, seed, noise, n_pts, start=kw.pop("start", OSCILLATION_SKIP), **kw)


def wall_case(seed: int | None = 0, noise: float = 1e-3, n_pts: int = 21, **kw) -> SyntheticCase:
    setup = load_scene(builtin_scene_path("wall"))
    return make_case(setup, seed, noise, n_pts, **kw)
