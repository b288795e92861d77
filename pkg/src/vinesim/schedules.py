"""Growth input schedules: map step index (and state) to a per-prismatic-joint rate vector.

A schedule is anything :func:`vinesim.stepper.simulate` accepts: an array of
shape ``(steps, m)`` or a callable ``(k, state) -> u``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import RobotState, VineModel, prismatic_gaps


@dataclass(frozen=True)
class Uniform:
    """Total tip rate split equally over the prismatic joints."""

    count: int
    total_rate: float

    def __call__(self, k: int, state: RobotState | None = None) -> np.ndarray:
        return np.full(self.count, self.total_rate / self.count if self.count else 0.0)

    def max_gap(self, initial_gap: float, steps: int, dt: float) -> float:
        return initial_gap + max(self.total_rate, 0.0) / max(self.count, 1) * steps * dt


@dataclass(frozen=True)
class TipFirst:
    """All growth at the most distal prismatic joint still below ``max_gap``.

    The joint is chosen from the current state, so the schedule is a
    feedback rule; once every gap has reached ``max_gap`` the input is zero.
    """

    model: VineModel
    total_rate: float
    gap_limit: float

    def __call__(self, k: int, state: RobotState) -> np.ndarray:
        u = np.zeros(self.model.prismatic_count)
        gaps = prismatic_gaps(self.model, state.q)
        open_joints = np.nonzero(gaps < self.gap_limit)[0]
        if len(open_joints):
            u[open_joints[-1]] = self.total_rate
        return u

    def max_gap(self, initial_gap: float, steps: int, dt: float) -> float:
        # one step of overshoot past the limit at most
        return max(initial_gap, self.gap_limit + abs(self.total_rate) * dt)


@dataclass(frozen=True)
class Table:
    """Explicit per-step inputs; the last row is held past the end of the table."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        if not np.all(np.isfinite(rows)):
            raise ValueError("input table contains non-finite entries")
        object.__setattr__(self, "rows", rows)

    def __call__(self, k: int, state: RobotState | None = None) -> np.ndarray:
        return self.rows[min(k, len(self.rows) - 1)].copy()

    def max_gap(self, initial_gap: float, steps: int, dt: float) -> float:
        ks = np.minimum(np.arange(steps), len(self.rows) - 1)
        grown = np.cumsum(self.rows[ks], axis=0) * dt if steps else np.zeros((1, self.rows.shape[1]))
        return initial_gap + max(float(grown.max(initial=0.0)), 0.0)


def uniform(model: VineModel, total_rate: float) -> Uniform:
    return Uniform(model.prismatic_count, float(total_rate))


def tip_first(model: VineModel, total_rate: float, max_gap: float) -> TipFirst:
    if not max_gap > 0:
        raise ValueError("tip_first needs a positive max_gap")
    return TipFirst(model, float(total_rate), float(max_gap))


def table(model: VineModel, rows) -> Table:
    tab = Table(rows)
    if tab.rows.shape[1] != model.prismatic_count:
        raise ValueError(f"input table rows need {model.prismatic_count} entries, got {tab.rows.shape[1]}")
    return tab
