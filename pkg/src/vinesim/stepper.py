"""Velocity-level time stepping: one linearized QP per step, then semi-implicit Euler.

Constraint rows are assembled as ``c/dt + J v = 0``, ``gbar + G v = u`` and
``phi/dt + L v >= 0`` so that the QP multipliers are the constraint impulses
themselves: ``M (v+ - v) = J'lam + L'n + G'w + F dt``.

Pin springs and dampers are evaluated at the end of the step by default
(``F = R tau(q+, v+)``, exact because pin angles are linear in ``q``), which
adds ``dt R (C + dt K) R'`` to the QP Hessian. ``spring_treatment="explicit"``
evaluates them at the start of the step instead; that form needs
``dt`` well below ``1 / (C/I)`` of the stiffest chain mode.
"""

from __future__ import annotations

import logging
import time
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
import scipy.sparse as sp

from . import qp
from .constraints import (
    all_pairs,
    contact_eval,
    gravity_force,
    growth_eval,
    joint_terms,
    pin_torques,
)
from .environment import Scene
from .model import RobotState, VineModel, mass_diagonal, pin_angle_jacobian, pin_angles

log = logging.getLogger(__name__)

Schedule = Union[np.ndarray, Sequence, Callable[[int, RobotState], np.ndarray]]


class SimulationError(RuntimeError):
    def __init__(self, message: str, step_index: int | None = None, solution=None, partial=None):
        super().__init__(message)
        self.step_index = step_index
        self.solution = solution
        self.partial = partial


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    qp_eps_abs: float = 1e-8
    qp_eps_rel: float = 1e-8
    max_qp_iterations: int = 20000
    warm_start: bool = True
    broad_phase_margin: float = 0.1
    prismatic_scale: float = 1.0
    soften_growth: bool = False
    growth_penalty: float = 1e4
    penetration_recheck: float = 0.0  # pruned pairs below this distance after a step force a re-solve
    spring_treatment: str = "implicit"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not (self.qp_eps_abs > 0 and self.qp_eps_rel > 0):
            raise ValueError("QP tolerances must be positive")
        if self.max_qp_iterations < 1:
            raise ValueError("max_qp_iterations must be at least 1")
        if self.broad_phase_margin < 0:
            raise ValueError("broad_phase_margin must be non-negative")
        if self.spring_treatment not in ("implicit", "explicit"):
            raise ValueError(f"spring_treatment must be 'implicit' or 'explicit', got {self.spring_treatment!r}")


@dataclass
class QpProblem:
    mass: np.ndarray  # diagonal of M
    v_prev: np.ndarray
    force_const: np.ndarray  # F(v+) = force_const - force_gain @ v+
    force_gain: sp.csr_matrix
    dt: float
    c: np.ndarray
    joint_triplets: tuple  # (rows, cols, vals) of the joint Jacobian
    G: np.ndarray
    gbar: np.ndarray
    u: np.ndarray
    phi: np.ndarray
    L: np.ndarray
    pairs: list[tuple[int, int]]
    program: qp.QuadraticProgram
    soft_growth: bool = False
    growth_penalty: float = 0.0

    def force(self, v_next: np.ndarray) -> np.ndarray:
        """Generalized spring/damper + gravity force acting over the step."""
        return self.force_const - self.force_gain @ v_next

    @property
    def J(self) -> sp.csr_matrix:
        rows, cols, vals = self.joint_triplets
        return sp.csr_matrix((vals, (rows, cols)), shape=(len(self.c), len(self.v_prev)))

    @property
    def joint_rows(self) -> int:
        return len(self.c)

    @property
    def growth_rows(self) -> int:
        return 0 if self.soft_growth else len(self.u)


@dataclass
class QpSolution:
    v_next: np.ndarray
    lam: np.ndarray  # joint impulses
    n: np.ndarray  # contact impulses, one per entry of ``pairs``
    w: np.ndarray  # growth impulses
    status: str
    iterations: int
    solve_time: float
    pairs: list[tuple[int, int]]
    problem: QpProblem | None = field(default=None, repr=False)

    @property
    def solved(self) -> bool:
        return self.status == qp.SOLVED


@dataclass
class StepInfo:
    iterations: int
    solve_time: float
    step_time: float
    pairs: list[tuple[int, int]]
    contact_impulses: np.ndarray
    status: str


@dataclass
class Trajectory:
    dt: float
    states: list[RobotState] = field(default_factory=list)
    inputs: list[np.ndarray] = field(default_factory=list)
    diagnostics: list[StepInfo] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def q(self) -> np.ndarray:
        return np.array([s.q for s in self.states])

    @property
    def v(self) -> np.ndarray:
        return np.array([s.v for s in self.states])

    @property
    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.states])


def _csc_from_triplets(rows, cols, vals, shape) -> sp.csc_matrix:
    """CSC matrix from duplicate-free triplets, skipping scipy's COO conversion."""
    order = np.lexsort((rows, cols))
    indptr = np.zeros(shape[1] + 1, dtype=np.int64)
    np.cumsum(np.bincount(cols, minlength=shape[1]), out=indptr[1:])
    return sp.csc_matrix((vals[order], rows[order], indptr), shape=shape)


@lru_cache(maxsize=32)
def _constant_terms(model: VineModel, dt: float, treatment: str):
    """Mass diagonal, spring gain and QP Hessian; they depend only on the model and dt."""
    n3 = 3 * model.n
    mass = mass_diagonal(model)
    if treatment == "implicit":
        D = sp.csr_matrix(pin_angle_jacobian(model))
        gain = (D.T @ sp.diags(model.damping + dt * model.stiffness) @ D).tocsr()
    else:
        gain = sp.csr_matrix((n3, n3))
    P = (sp.diags(mass) + dt * gain).tocsc()
    return mass, gain, P, sp.triu(P, format="csc")


def assemble_qp(
    model: VineModel,
    scene: Scene,
    state: RobotState,
    u: np.ndarray,
    config: SimConfig = SimConfig(),
    pairs: Sequence[tuple[int, int]] | None = None,
) -> QpProblem:
    """Build the per-step QP at ``state`` for growth command ``u``.

    ``pairs`` fixes the contact rows; by default every (site, obstacle) pair
    within the broad-phase margin gets a row.
    """
    dt = config.dt
    q, v = state.q, state.v
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape != (model.prismatic_count,):
        raise ValueError(f"growth input needs {model.prismatic_count} entries, got {u.shape}")
    n3 = 3 * model.n
    if q.shape != (n3,):
        raise ValueError(f"state has {q.size} coordinates, model expects {n3}")

    mass, gain, P, P_upper = _constant_terms(model, dt, config.spring_treatment)
    if config.spring_treatment == "implicit":
        tau0 = -model.stiffness * pin_angles(model, q)
    else:
        tau0 = pin_torques(model, q, v)
    force_const = tau0 @ pin_angle_jacobian(model) + gravity_force(model, scene)

    c, rows, cols, vals = joint_terms(model, q, config.prismatic_scale)
    ge = growth_eval(model, q, v, dt)
    if pairs is None:
        ce = contact_eval(model, scene, q, margin=config.broad_phase_margin)
    else:
        ce = contact_eval(model, scene, q, pairs=pairs)
    Ldense = ce.L.reshape(len(ce.pairs), n3)

    lin = -(mass * v + force_const * dt)
    lo = [-c / dt]
    hi = [-c / dt]
    trip_r, trip_c, trip_v = [rows], [cols], [vals]
    offset = len(c)
    if config.soften_growth:
        rho = config.growth_penalty
        target = u - ge.gbar
        P = (P + rho * sp.csc_matrix(ge.G.T @ ge.G)).tocsc()
        P_upper = None
        lin = lin - rho * (ge.G.T @ target)
    else:
        gr, gc = np.nonzero(ge.G)
        trip_r.append(gr + offset)
        trip_c.append(gc)
        trip_v.append(ge.G[gr, gc])
        offset += len(u)
        lo.append(u - ge.gbar)
        hi.append(u - ge.gbar)
    lr, lc = np.nonzero(Ldense)
    trip_r.append(lr + offset)
    trip_c.append(lc)
    trip_v.append(Ldense[lr, lc])
    offset += len(ce.pairs)
    lo.append(-ce.phi / dt)
    hi.append(np.full(len(ce.pairs), np.inf))
    A = _csc_from_triplets(np.concatenate(trip_r), np.concatenate(trip_c), np.concatenate(trip_v), (offset, n3))
    program = qp.QuadraticProgram(P, lin, A, np.concatenate(lo), np.concatenate(hi), P_upper)
    return QpProblem(
        mass=mass,
        v_prev=v.copy(),
        force_const=force_const,
        force_gain=gain,
        dt=dt,
        c=c,
        joint_triplets=(rows, cols, vals),
        G=ge.G,
        gbar=ge.gbar,
        u=u,
        phi=ce.phi,
        L=Ldense,
        pairs=list(ce.pairs),
        program=program,
        soft_growth=config.soften_growth,
        growth_penalty=config.growth_penalty if config.soften_growth else 0.0,
    )


def _warm_start_vectors(problem: QpProblem, warm: QpSolution | None):
    if warm is None or warm.v_next.shape != problem.v_prev.shape:
        return None, None
    y = np.zeros(problem.program.shape[0])
    nj, ng = problem.joint_rows, problem.growth_rows
    if warm.lam.shape == (nj,):
        y[:nj] = -warm.lam
    if ng and warm.w.shape == (ng,):
        y[nj:nj + ng] = -warm.w
    previous = dict(zip(warm.pairs, warm.n))
    for r, pair in enumerate(problem.pairs):
        y[nj + ng + r] = -previous.get(pair, 0.0)
    return warm.v_next, y


def solve_qp(
    problem: QpProblem,
    warm_start: QpSolution | None = None,
    config: SimConfig = SimConfig(),
    workspace: qp.OsqpWorkspace | None = None,
) -> QpSolution:
    x0, y0 = _warm_start_vectors(problem, warm_start)
    res = (workspace or qp.OsqpWorkspace()).solve(
        problem.program,
        x0=x0,
        y0=y0,
        eps_abs=config.qp_eps_abs,
        eps_rel=config.qp_eps_rel,
        max_iter=config.max_qp_iterations,
    )
    return _split_duals(problem, res)


def _split_duals(problem: QpProblem, res: qp.QpResult) -> QpSolution:
    nj, ng = problem.joint_rows, problem.growth_rows
    impulses = -res.y
    if problem.soft_growth:
        w = -problem.growth_penalty * (problem.G @ res.x + problem.gbar - problem.u)
    else:
        w = impulses[nj:nj + ng]
    return QpSolution(
        v_next=res.x,
        lam=impulses[:nj],
        n=impulses[nj + ng:],
        w=w,
        status=res.status,
        iterations=res.iterations,
        solve_time=res.solve_time,
        pairs=list(problem.pairs),
        problem=problem,
    )


def impulse_balance_residual(problem: QpProblem, sol: QpSolution) -> np.ndarray:
    """``M (v+ - v) - J'lam - L'n - G'w - F dt``; zero at an exact QP solution."""
    r = problem.mass * (sol.v_next - problem.v_prev) - problem.force(sol.v_next) * problem.dt
    r -= problem.J.T @ sol.lam
    if len(sol.n):
        r -= problem.L.T @ sol.n
    if len(sol.w):
        r -= problem.G.T @ sol.w
    return r


class Stepper:
    """Single-threaded stepping workspace that carries QP warm starts between steps."""

    def __init__(self, model: VineModel, scene: Scene, config: SimConfig = SimConfig()):
        self.model = model
        self.scene = scene
        self.config = config
        self._previous: QpSolution | None = None
        self._all_pairs = all_pairs(model, scene)
        self._workspace = qp.OsqpWorkspace()

    def reset(self) -> None:
        self._previous = None
        self._workspace = qp.OsqpWorkspace()

    def step(self, state: RobotState, u, step_index: int | None = None) -> tuple[RobotState, QpSolution]:
        cfg = self.config
        warm = self._previous if cfg.warm_start else None
        pairs = None
        for _ in range(len(self._all_pairs) + 1):
            problem = assemble_qp(self.model, self.scene, state, u, cfg, pairs)
            sol = solve_qp(problem, warm, cfg, self._workspace)
            if not sol.solved:
                raise SimulationError(
                    f"QP {sol.status} at step {step_index} (t={state.time:.4f} s, "
                    f"{len(problem.pairs)} contact rows, {sol.iterations} iterations)",
                    step_index=step_index,
                    solution=sol,
                )
            q_next = state.q + sol.v_next * cfg.dt
            missed = self._penetrating_pruned(q_next, problem.pairs)
            if not missed:
                break
            log.debug("step %s: re-solving with %d pruned pairs that penetrated", step_index, len(missed))
            pairs = list(problem.pairs) + missed
        self._previous = sol
        return RobotState(q_next, sol.v_next.copy(), state.time + cfg.dt), sol

    def _penetrating_pruned(self, q_next: np.ndarray, used: list[tuple[int, int]]) -> list[tuple[int, int]]:
        rest = [p for p in self._all_pairs if p not in set(used)]
        if not rest:
            return []
        ce = contact_eval(self.model, self.scene, q_next, pairs=rest)
        return [p for p, d in zip(rest, ce.phi) if d < self.config.penetration_recheck]


def step(model: VineModel, scene: Scene, state: RobotState, u, config: SimConfig = SimConfig(), warm_start=None):
    stepper = Stepper(model, scene, config)
    stepper._previous = warm_start
    return stepper.step(state, u)


def _input_at(schedule: Schedule, k: int, state: RobotState) -> np.ndarray:
    if callable(schedule):
        return np.asarray(schedule(k, state), dtype=float)
    return np.asarray(schedule[k], dtype=float)


def simulate(
    model: VineModel,
    scene: Scene,
    state0: RobotState,
    schedule: Schedule,
    steps: int,
    config: SimConfig = SimConfig(),
    stepper: Stepper | None = None,
) -> Trajectory:
    """Run ``steps`` consecutive steps. On a QP failure the raised
    :class:`SimulationError` carries the partial trajectory."""
    if not callable(schedule) and len(schedule) < steps:
        raise ValueError(f"input schedule has {len(schedule)} entries, {steps} steps requested")
    stepper = stepper or Stepper(model, scene, config)
    traj = Trajectory(config.dt, [state0.copy()])
    state = state0
    for k in range(steps):
        u = _input_at(schedule, k, state)
        t0 = time.perf_counter()
        try:
            state, sol = stepper.step(state, u, step_index=k)
        except SimulationError as exc:
            exc.partial = traj
            raise
        elapsed = time.perf_counter() - t0
        traj.states.append(state)
        traj.inputs.append(u)
        traj.diagnostics.append(StepInfo(sol.iterations, sol.solve_time, elapsed, sol.pairs, sol.n.copy(), sol.status))
    return traj
