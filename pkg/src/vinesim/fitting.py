"""Joint state and parameter estimation from measured point trajectories.

The fit solves

    min  sum_i |p(q_i) - p_hat_i|^2 + sum_i r_i' R_w r_i
    s.t. r_i = Z_{i+1} - f(Z_i, K, C)
         c(q_i) = 0,  g(q_i, v_i) = u_i,  phi_active(q_i) = 0

over the state trajectory ``Z_i = (q_i, v_i)`` and the spring/damper
parameters, with an augmented-Lagrangian outer loop around
Levenberg-Marquardt steps on the stacked residual. ``f`` is one simulator
step in which the contact pairs active at frame ``i + 1`` are equality rows.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.linalg

from .constraints import contact_eval, gravity_force, growth_eval, joint_constraint
from .environment import Scene
from .model import (
    PIN,
    RobotState,
    VineModel,
    configuration_from_joints,
    endpoints,
    mass_diagonal,
    pin_angle_jacobian,
    pin_angles,
    pin_rates,
)
from .stepper import SimConfig, Trajectory, simulate

log = logging.getLogger(__name__)

Pair = tuple[int, int]


class FitError(RuntimeError):
    pass


@dataclass
class ReferenceTrajectory:
    """Measured points per frame plus the inputs and contact labels.

    ``points`` has shape ``(N + 1, n_pts, 2)``; ``inputs`` ``(N + 1, m)``;
    ``active_contacts[i]`` lists the (contact site, obstacle) pairs touching
    at frame ``i``.
    """

    points: np.ndarray
    inputs: np.ndarray
    active_contacts: list[list[Pair]]
    dt: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.points.ndim != 3 or self.points.shape[-1] != 2:
            raise FitError(f"points must have shape (frames, n_pts, 2), got {self.points.shape}")
        frames = self.points.shape[0]
        if frames < 2:
            raise FitError("a reference needs at least two frames")
        if self.points.shape[1] < 2:
            raise FitError("each frame needs at least two points")
        if self.inputs.ndim == 1:
            self.inputs = self.inputs[:, None]
        if len(self.inputs) != frames or len(self.active_contacts) != frames:
            raise FitError("inputs and active_contacts need one entry per frame")
        self.active_contacts = [[tuple(map(int, p)) for p in frame] for frame in self.active_contacts]
        if not self.dt > 0:
            raise FitError("dt must be positive")

    @property
    def frames(self) -> int:
        return self.points.shape[0]

    @property
    def n_pts(self) -> int:
        return self.points.shape[1]


@dataclass
class FitProblem:
    model: VineModel
    scene: Scene
    weights: np.ndarray | float = 1e3  # diagonal of R_w, scalar or one entry per state coordinate
    per_joint: bool = False
    initial_stiffness: float | np.ndarray = 0.1
    initial_damping: float | np.ndarray = 0.01
    max_outer_iterations: int = 12
    max_inner_iterations: int = 30
    tolerance: float = 1e-8  # relative decrease of the merit that ends an inner loop
    stall_tolerance: float = 1e-3
    stall_iterations: int = 3  # consecutive iterations below stall_tolerance that also end it
    constraint_tolerance: float = 1e-6
    penalty: float = 1e5
    config: SimConfig = field(default_factory=SimConfig)

    def weight_vector(self) -> np.ndarray:
        w = np.broadcast_to(np.asarray(self.weights, dtype=float), (6 * self.model.n,)).copy()
        if np.any(w <= 0):
            raise FitError("R_w diagonal entries must be positive")
        return w


@dataclass
class FitResult:
    stiffness: np.ndarray | float
    damping: np.ndarray | float
    q: np.ndarray
    v: np.ndarray
    residuals: np.ndarray  # r_i, shape (N, 6n)
    objective: float
    measurement_error: np.ndarray  # RMS point error per frame
    constraint_violation: float
    kkt_residual: float
    converged: bool
    iterations: int
    history: list[float]
    solve_time: float

    def tip_positions(self, model: VineModel) -> np.ndarray:
        return endpoints(model, self.q)[1][:, -1, :]


# ---------------------------------------------------------------- measurements


@lru_cache(maxsize=64)
def _polyline(model: VineModel):
    """Vertex weights over the stacked endpoints ``(prox_0, dist_0, prox_1, ...)``.

    Endpoints meeting at a pin collapse to their midpoint. A prismatic joint
    keeps both endpoints; its segment length is the signed gap, which stays
    smooth where the gap closes.
    """
    n = model.n
    rows = [np.eye(2 * n)[0]]
    gap_body = []  # per segment: proximal body index of a prismatic gap, else -1
    for i in range(n):
        end = np.eye(2 * n)[2 * i + 1]
        if i + 1 < n and model.joints[i + 1].kind == PIN:
            rows.append(0.5 * (end + np.eye(2 * n)[2 * i + 2]))
            gap_body.append(-1)
        elif i + 1 < n:
            rows += [end, np.eye(2 * n)[2 * i + 2]]
            gap_body += [-1, i]
        else:
            rows.append(end)
            gap_body.append(-1)
    return np.array(rows), np.array(gap_body)


def measurement_points(model: VineModel, q: np.ndarray, n_pts: int) -> np.ndarray:
    """``n_pts`` points at equal arc length along the robot from base to tip.

    The polyline runs through the body endpoints; see :func:`_polyline`.
    """
    if n_pts < 2:
        raise ValueError("n_pts must be at least 2")
    q = np.asarray(q, dtype=float)
    W, gap_body = _polyline(model)
    prox, dist = endpoints(model, q)
    ends = np.stack([prox, dist], axis=-2).reshape(prox.shape[:-2] + (-1, 2))
    verts = np.matmul(W, ends)
    seg = np.diff(verts, axis=-2)
    seg_len = np.hypot(seg[..., 0], seg[..., 1])
    gaps = gap_body >= 0
    if np.any(gaps):
        th = q[..., 3 * gap_body[gaps] + 2]
        seg_len[..., gaps] = seg[..., gaps, 0] * np.cos(th) + seg[..., gaps, 1] * np.sin(th)
    cum = np.concatenate([np.zeros(seg_len.shape[:-1] + (1,)), np.cumsum(seg_len, axis=-1)], axis=-1)
    targets = np.linspace(0.0, 1.0, n_pts) * cum[..., -1:]
    idx = np.sum(cum[..., None, :] <= targets[..., :, None], axis=-1) - 1
    idx = np.clip(idx, 0, seg_len.shape[-1] - 1)
    start = np.take_along_axis(cum, idx, axis=-1)
    length = np.take_along_axis(seg_len, idx, axis=-1)
    t = np.where(length != 0, (targets - start) / np.where(length != 0, length, 1.0), 0.0)
    base = np.take_along_axis(verts, idx[..., None], axis=-2)
    step = np.take_along_axis(seg, idx[..., None], axis=-2)
    return base + t[..., None] * step


def _measurement_jacobian(model: VineModel, q: np.ndarray, n_pts: int, h: float = 1e-8) -> np.ndarray:
    n3 = q.shape[-1]
    pert = np.concatenate([np.zeros((1, n3)), np.eye(n3) * h])
    pts = measurement_points(model, q[..., None, :] + pert, n_pts)
    d = (pts[..., 1:, :, :] - pts[..., :1, :, :]) / h  # (..., n3, n_pts, 2)
    return np.moveaxis(d.reshape(d.shape[:-2] + (-1,)), -2, -1)  # (..., 2 n_pts, n3)


# ------------------------------------------------------------ step map f(Z, K, C)


@dataclass
class _StepLayout:
    model: VineModel
    scene: Scene
    config: SimConfig
    pairs: list[Pair]  # contact rows that may be active in some frame

    @property
    def n3(self) -> int:
        return 3 * self.model.n

    @property
    def size(self) -> int:
        m = self.model
        return 3 * m.n + 2 * m.n + m.prismatic_count + len(self.pairs)


def _expand_params(model: VineModel, theta: np.ndarray, per_joint: bool) -> tuple[np.ndarray, np.ndarray]:
    p = model.pin_count
    if per_joint:
        return theta[..., :p], theta[..., p:]
    return np.repeat(theta[..., :1], p, axis=-1), np.repeat(theta[..., 1:2], p, axis=-1)


def _step_pieces(lay: _StepLayout, q, v, u, mask, K, C):
    """Batched blocks of the step's KKT system.

    The Hessian is ``diag(mass) + dt D' diag(spring_gain) D``; ``spring_gain``
    is None for explicit springs.
    """
    model, cfg = lay.model, lay.config
    dt = cfg.dt
    mass = mass_diagonal(model)
    D = pin_angle_jacobian(model)
    grav = gravity_force(model, lay.scene)
    theta = pin_angles(model, q)
    if cfg.spring_treatment == "implicit":
        tau0 = -K * theta
        spring_gain = C + dt * K
    else:
        tau0 = -K * theta - C * pin_rates(model, v)
        spring_gain = None
    force_const = tau0 @ D + grav
    lin = -(mass * v + dt * force_const)

    je = joint_constraint(model, q, cfg.prismatic_scale)
    ge = growth_eval(model, q, v, dt)
    ce = contact_eval(model, lay.scene, q, pairs=lay.pairs)
    maskf = mask.astype(float)
    A = np.concatenate([je.J, ge.G, ce.L * maskf[..., None]], axis=-2)
    b = np.concatenate([-je.c / dt, u - ge.gbar, -ce.phi / dt * maskf], axis=-1)
    nfix = je.c.shape[-1] + ge.g.shape[-1]
    E = np.concatenate([np.zeros(mask.shape[:-1] + (nfix,)), 1.0 - maskf], axis=-1)
    return mass, D, spring_gain, lin, A, b, E


def _kkt_matrix(lay: _StepLayout, q, v, u, mask, K, C):
    mass, D, spring_gain, lin, A, b, E = _step_pieces(lay, q, v, u, mask, K, C)
    n3 = lay.n3
    batch = A.shape[:-2]
    S = n3 + A.shape[-2]
    Kmat = np.zeros(batch + (S, S))
    Kmat[..., np.arange(n3), np.arange(n3)] = mass
    if spring_gain is not None:
        Kmat[..., :n3, :n3] += lay.config.dt * (D.T @ (spring_gain[..., :, None] * D))
    Kmat[..., n3:, :n3] = A
    Kmat[..., :n3, n3:] = np.swapaxes(A, -1, -2)
    Kmat[..., np.arange(n3, S), np.arange(n3, S)] = -E
    return Kmat, np.concatenate([-lin, b], axis=-1)


def _kkt_residual(lay: _StepLayout, q, v, u, mask, K, C, s):
    """``Kmat(z) s - rhs(z)`` without forming ``Kmat``."""
    mass, D, spring_gain, lin, A, b, E = _step_pieces(lay, q, v, u, mask, K, C)
    n3 = lay.n3
    sv, sy = s[..., :n3], s[..., n3:]
    top = mass * sv + (sy[..., None, :] @ A)[..., 0, :] + lin
    if spring_gain is not None:
        top = top + lay.config.dt * ((spring_gain * (sv @ D.T)) @ D)
    bottom = (A @ sv[..., :, None])[..., 0] - E * sy - b
    return np.concatenate([top, bottom], axis=-1)


def _masks(lay: _StepLayout, contacts: Sequence[Sequence[Pair]]) -> np.ndarray:
    index = {p: i for i, p in enumerate(lay.pairs)}
    mask = np.zeros((len(contacts), len(lay.pairs)), dtype=bool)
    for f, frame in enumerate(contacts):
        for p in frame:
            mask[f, index[tuple(p)]] = True
    return mask


def _step_map(lay, q, v, u, mask, K, C, derivatives=False, chunk=8):
    """Predicted next states ``f(Z_i)`` for a stack of frames, optionally with
    ``df/dZ`` ``(N, 6n, 6n)`` and ``df/dtheta`` ``(N, 6n, 2p)`` (K then C per pin)."""
    n3 = lay.n3
    dt = lay.config.dt
    Kmat, rhs = _kkt_matrix(lay, q, v, u, mask, K, C)
    sol = np.linalg.solve(Kmat, rhs[..., None])[..., 0]
    vn = sol[..., :n3]
    pred = np.concatenate([q + dt * vn, vn], axis=-1)
    if not derivatives:
        return pred, sol

    # implicit differentiation: ds/dz = -Kmat^-1 dF/dz with F(z, s) = Kmat(z) s - rhs(z)
    dF = np.concatenate(
        [_kkt_q_derivative(lay, q, v, u, mask, K, C, sol, chunk), _kkt_v_theta_derivative(lay, q, v, K, C, sol)],
        axis=1,
    )  # (N, nz, S)
    ds = -np.linalg.solve(Kmat, np.swapaxes(dF, -1, -2))  # (N, S, nz)
    dv = ds[:, :n3, :]
    dq = dt * dv
    dq[:, :, :n3] += np.eye(n3)
    dpred = np.concatenate([dq, dv], axis=1)
    return pred, sol, dpred[:, :, :2 * n3], dpred[:, :, 2 * n3:]


def _kkt_q_derivative(lay, q, v, u, mask, K, C, sol, chunk):
    """Forward differences of the KKT residual in ``q`` at fixed solution ``sol``."""
    n3 = lay.n3
    out = np.empty(q.shape[:1] + (n3, sol.shape[-1]))
    for lo in range(0, len(q), chunk):
        hi = min(lo + chunk, len(q))
        scale = 1e-7 * np.maximum(1.0, np.abs(q[lo:hi]))
        qq = np.concatenate([q[lo:hi, None, :], q[lo:hi, None, :] + np.eye(n3) * scale[:, None, :]], axis=1)
        res = _kkt_residual(
            lay, qq, v[lo:hi, None, :], u[lo:hi, None, :], mask[lo:hi, None, :],
            K[lo:hi, None, :], C[lo:hi, None, :], sol[lo:hi, None, :],
        )
        out[lo:hi] = (res[:, 1:] - res[:, :1]) / scale[:, :, None]
    return out


def _kkt_v_theta_derivative(lay, q, v, K, C, sol):
    """Exact derivatives of the KKT residual in ``v`` and in the spring parameters.

    ``v`` enters through the momentum term and the growth rows, whose ``q``
    derivative is linear in ``v``; stiffness and damping enter only the spring
    terms of the momentum rows.
    """
    model, dt = lay.model, lay.config.dt
    n3 = lay.n3
    N, S = sol.shape
    njoint = 2 * model.n
    m = model.prismatic_count
    sv = sol[:, :n3]
    sw = sol[:, n3 + njoint:n3 + njoint + m]
    mass = mass_diagonal(model)
    D = pin_angle_jacobian(model)
    npin = D.shape[0]

    dv = np.zeros((N, n3, S))
    dv[:, np.arange(n3), np.arange(n3)] = -mass
    # dG/dv_j = dt * g_q(q, e_j)
    gq_unit = growth_eval(model, q[:, None, :], np.eye(n3), dt).g_q  # (N, n3 directions, m, n3)
    dv[:, :, :n3] += dt * np.einsum("njmk,nm->njk", gq_unit, sw)
    dv[:, :, n3 + njoint:n3 + njoint + m] += dt * np.einsum("njmk,nk->njm", gq_unit, sv)
    Dsv = sv @ D.T  # (N, npin)
    theta = pin_angles(model, q)
    dK = np.zeros((N, npin, S))
    dC = np.zeros((N, npin, S))
    if lay.config.spring_treatment == "implicit":
        dK[:, :, :n3] = (dt**2 * Dsv + dt * theta)[:, :, None] * D
        dC[:, :, :n3] = (dt * Dsv)[:, :, None] * D
    else:
        dv[:, :, :n3] += dt * (D.T * C[:, None, :]) @ D
        dK[:, :, :n3] = (dt * theta)[:, :, None] * D
        dC[:, :, :n3] = (dt * pin_rates(model, v))[:, :, None] * D
    return np.concatenate([dv, dK, dC], axis=1)


def _layout_for(problem: FitProblem, reference: ReferenceTrajectory) -> _StepLayout:
    pairs = sorted({tuple(p) for frame in reference.active_contacts for p in frame})
    for s, o in pairs:
        if not (0 <= s < len(problem.model.contact_sites) and 0 <= o < len(problem.scene.obstacles)):
            raise FitError(f"active contact ({s}, {o}) does not name a contact site and obstacle")
    return _StepLayout(problem.model, problem.scene, _fit_config(problem, reference), pairs)


def _fit_config(problem: FitProblem, reference: ReferenceTrajectory) -> SimConfig:
    from dataclasses import replace

    return replace(problem.config, dt=reference.dt)


def dynamics_residual(
    Z_i: np.ndarray,
    Z_next: np.ndarray,
    stiffness,
    damping,
    u_i,
    model: VineModel,
    scene: Scene,
    dt: float,
    active_pairs: Sequence[Pair] = (),
    config: SimConfig | None = None,
) -> np.ndarray:
    """``r_i = Z_{i+1} - f(Z_i, K, C)`` with ``active_pairs`` as equality contact rows."""
    from dataclasses import replace

    cfg = replace(config or SimConfig(), dt=dt)
    pairs = sorted({tuple(p) for p in active_pairs})
    lay = _StepLayout(model, scene, cfg, pairs)
    n3 = 3 * model.n
    Z_i = np.asarray(Z_i, dtype=float)
    K = np.broadcast_to(np.asarray(stiffness, dtype=float), (model.pin_count,))[None]
    C = np.broadcast_to(np.asarray(damping, dtype=float), (model.pin_count,))[None]
    u = np.asarray(u_i, dtype=float).reshape(1, -1)
    mask = np.ones((1, len(pairs)), dtype=bool)
    pred, _ = _step_map(lay, Z_i[None, :n3], Z_i[None, n3:], u, mask, K, C)
    return np.asarray(Z_next, dtype=float) - pred[0]


# -------------------------------------------------------------- initial guess


def _interpolate_polyline(points: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Points at arc length ``s`` (per frame) along measured polylines ``(N, n_pts, 2)``."""
    seg = np.diff(points, axis=1)
    seg_len = np.hypot(seg[..., 0], seg[..., 1])
    cum = np.concatenate([np.zeros((len(points), 1)), np.cumsum(seg_len, axis=1)], axis=1)
    idx = np.clip(np.sum(cum[:, None, :] <= s[:, :, None], axis=-1) - 1, 0, seg_len.shape[1] - 1)
    start = np.take_along_axis(cum, idx, axis=1)
    length = np.take_along_axis(seg_len, idx, axis=1)
    t = (s - start) / np.where(length > 0, length, 1.0)
    return np.take_along_axis(points, idx[..., None], axis=1) + t[..., None] * np.take_along_axis(seg, idx[..., None], axis=1)


def _joint_guess(model: VineModel, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Joint coordinates read off the measured polylines, with gaps split evenly.

    Returns ``(x, gap_prior)`` where ``x`` stacks pin angles then gaps per frame.
    """
    d, n = model.d, model.n
    seg = np.diff(points, axis=1)
    length = np.sum(np.hypot(seg[..., 0], seg[..., 1]), axis=1)
    nprism = model.prismatic_count
    gap = np.maximum(length - 2 * d * n, 0.0) / max(nprism, 1)
    prism_before = np.cumsum([j.kind != PIN for j in model.joints])  # prismatic joints up to each body
    centers = 2 * d * np.arange(n) + d + gap[:, None] * prism_before[None, :]
    fore = _interpolate_polyline(points, centers + d)
    aft = _interpolate_polyline(points, centers - d)
    chord = fore - aft
    heading = np.unwrap(np.arctan2(chord[..., 1], chord[..., 0]), axis=1)
    # bodies joined by a prismatic joint share a heading
    group = np.cumsum([j.kind == PIN for j in model.joints]) - 1
    group_heading = np.stack([heading[:, group == g].mean(axis=1) for g in range(model.pin_count)], axis=1)
    angles = np.diff(group_heading, axis=1, prepend=0.0)
    gaps = np.repeat(gap[:, None], nprism, axis=1)
    return np.concatenate([angles, gaps], axis=1), gaps


def _batched_least_squares(residual, x, iterations=100, h=1e-7, tol=1e-12, step_tol=1e-10):
    """Independent Levenberg-Marquardt solves, one per row of ``x``, run in lockstep."""
    N, p = x.shape
    r = residual(x)
    cost = np.sum(r**2, axis=1)
    damping = np.full(N, 1e-3)
    done = np.zeros(N, dtype=bool)
    eye = np.eye(p)
    for _ in range(iterations):
        if done.all():
            break
        pert = x[:, None, :] + h * eye
        J = (residual(pert.reshape(-1, p)).reshape(N, p, -1) - r[:, None, :]) / h  # (N, p, R)
        H = J @ np.swapaxes(J, 1, 2)
        g = np.einsum("npr,nr->np", J, r)
        diag = np.diagonal(H, axis1=1, axis2=2)
        step = -np.linalg.solve(H + (damping[:, None] * diag + 1e-15)[:, :, None] * eye, g[..., None])[..., 0]
        x_new = np.where(done[:, None], x, x + step)
        r_new = residual(x_new)
        cost_new = np.sum(r_new**2, axis=1)
        better = (cost_new < cost) & ~done
        small = np.linalg.norm(step, axis=1) <= step_tol * (1.0 + np.linalg.norm(x, axis=1))
        done |= better & ((cost - cost_new <= tol * np.maximum(cost, 1e-30)) | small)
        done |= ~better & (damping > 1e8)
        x = np.where(better[:, None], x_new, x)
        r = np.where(better[:, None], r_new, r)
        cost = np.where(better, cost_new, cost)
        damping = np.where(better, damping / 3.0, damping * 4.0)
    return x, cost, done


def project_reference(
    model: VineModel,
    scene: Scene,
    reference: ReferenceTrajectory,
    gap_prior_weight: float = 1e-2,
    contact_weight: float = 1e3,
    polish: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Feasible initial trajectory ``(q, v)`` plus a per-frame convergence flag.

    Each frame is fitted in joint coordinates, so ``c(q) = 0`` holds by
    construction; active contacts are then driven to zero. A first pass
    weakly pulls gaps toward an even split of the measured length, which
    settles the split that straight stretches leave undetermined. With
    ``polish`` a second pass drops that pull and returns the plain
    least-squares fit; without it the regularized frames are kept, which is
    the steadier start for a fit to noisy points. Velocities are central
    differences projected onto the joint, growth and active-contact velocity
    constraints.
    """
    npin = model.pin_count
    x0, gap_prior = _joint_guess(model, reference.points)
    frames = reference.frames
    pairs = sorted({tuple(p) for frame in reference.active_contacts for p in frame})
    mask = np.zeros((frames, len(pairs)))
    for f, frame in enumerate(reference.active_contacts):
        for p in frame:
            mask[f, pairs.index(tuple(p))] = 1.0

    def residual(z, prior=gap_prior_weight):
        k = len(z) // frames
        q = configuration_from_joints(model, z[:, :npin], z[:, npin:])
        target = np.repeat(reference.points, k, axis=0)
        out = [(measurement_points(model, q, reference.n_pts) - target).reshape(len(z), -1)]
        if prior:
            out.append(np.sqrt(prior) * (z[:, npin:] - np.repeat(gap_prior, k, axis=0)))
        if pairs:
            phi = contact_eval(model, scene, q, pairs=pairs).phi
            out.append(contact_weight * phi * np.repeat(mask, k, axis=0))
        return np.concatenate(out, axis=1)

    x, _, ok = _batched_least_squares(residual, x0)
    if polish and gap_prior_weight:
        # the prior only settles the start; drop it so observable gaps are not biased
        x, _, ok = _batched_least_squares(lambda z: residual(z, 0.0), x)
    for f, frame in enumerate(reference.active_contacts):
        if frame:
            x[f] = _settle_contacts(model, scene, x[f], frame)
    qs = configuration_from_joints(model, x[:, :npin], x[:, npin:])

    vs = np.gradient(qs, reference.dt, axis=0)
    for i in range(frames):
        vs[i] = _project_velocity(model, scene, qs[i], vs[i], reference.inputs[i], reference.active_contacts[i])
    return qs, vs, np.asarray(ok, dtype=bool)


def _settle_contacts(model, scene, x, pairs, iterations=20, h=1e-7):
    """Minimum-norm Newton steps in joint coordinates until the active contacts touch."""
    npin = model.pin_count
    for _ in range(iterations):
        pert = x + np.vstack([np.zeros(len(x)), h * np.eye(len(x))])
        phi = contact_eval(model, scene, configuration_from_joints(model, pert[:, :npin], pert[:, npin:]), pairs=pairs).phi
        if np.max(np.abs(phi[0])) < 1e-13:
            break
        Jx = ((phi[1:] - phi[0]) / h).T
        x = x - np.linalg.lstsq(Jx, phi[0], rcond=None)[0]
    return x


def _project_velocity(model, scene, q, v, u, pairs):
    """Mass-weighted closest ``v`` with ``J v = 0``, ``g_v v = u`` and ``L v = 0`` on active pairs."""
    je = joint_constraint(model, q)
    gv = growth_eval(model, q, v, 1.0).g_v
    rows = [je.J, gv]
    rhs = [np.zeros(len(je.c)), np.asarray(u, dtype=float)]
    if pairs:
        rows.append(contact_eval(model, scene, q, pairs=pairs).L)
        rhs.append(np.zeros(len(pairs)))
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    Minv = 1.0 / mass_diagonal(model)
    S = (A * Minv) @ A.T
    mult = np.linalg.lstsq(S, A @ v - b, rcond=None)[0]
    return v - Minv * (A.T @ mult)


# --------------------------------------------------------------------- fitting


class _FitSolver:
    """Augmented-Lagrangian Levenberg-Marquardt on the stacked fit residual.

    The unknowns are the frame states ``Z_0..Z_N`` followed by the parameters.
    The normal matrix is block tridiagonal in the states (each dynamics
    residual couples two neighbouring frames) with a dense border for the
    parameters, so it is factored frame by frame and the parameters are
    eliminated by a Schur complement.
    """

    def __init__(self, problem: FitProblem, reference: ReferenceTrajectory):
        self.problem = problem
        self.ref = reference
        self.model = problem.model
        self.lay = _layout_for(problem, reference)
        self.n3 = 3 * self.model.n
        self.nz = 2 * self.n3
        self.N = reference.frames - 1
        self.npar = 2 * self.model.pin_count if problem.per_joint else 2
        self.weights = problem.weight_vector()
        self.sqrt_w = np.sqrt(self.weights)
        self.step_masks = _masks(self.lay, reference.active_contacts[1:])
        self.frame_masks = _masks(self.lay, reference.active_contacts)
        m = self.model.prismatic_count
        if reference.inputs.shape[1] != m:
            raise FitError(f"inputs have {reference.inputs.shape[1]} columns, model has {m} prismatic joints")
        # constraint rows per frame: joints, growth, then every candidate contact (masked)
        self.nfixed = 2 * self.model.n + m

    def pack(self, q, v, theta):
        return np.concatenate([np.concatenate([q, v], axis=1).ravel(), theta])

    def unpack(self, x):
        Z = x[: (self.N + 1) * self.nz].reshape(self.N + 1, self.nz)
        return Z[:, : self.n3], Z[:, self.n3:], x[(self.N + 1) * self.nz:]

    # residual pieces -------------------------------------------------------
    def constraints(self, q, v, jac=False):
        """Per-frame constraint values ``(N+1, rows)``; inactive contact rows are zero."""
        model = self.model
        je = joint_constraint(model, q, self.lay.config.prismatic_scale)
        ge = growth_eval(model, q, v, self.lay.config.dt)
        ce = contact_eval(model, self.problem.scene, q, pairs=self.lay.pairs)
        mask = self.frame_masks.astype(float)
        h = np.concatenate([je.c, ge.g - self.ref.inputs, ce.phi * mask], axis=1)
        if not jac:
            return h, None
        Jq = np.concatenate([je.J, ge.g_q, ce.L * mask[..., None]], axis=1)
        Jv = np.concatenate([np.zeros_like(je.J), ge.g_v, np.zeros_like(ce.L)], axis=1)
        return h, np.concatenate([Jq, Jv], axis=2)

    def dynamics(self, q, v, theta, jac=False):
        K, C = _expand_params(self.model, theta, self.problem.per_joint)
        Kb = np.broadcast_to(K, (self.N, K.shape[-1]))
        Cb = np.broadcast_to(C, (self.N, C.shape[-1]))
        out = _step_map(self.lay, q[:-1], v[:-1], self.ref.inputs[:-1], self.step_masks, Kb, Cb, derivatives=jac)
        r = np.concatenate([q[1:], v[1:]], axis=1) - out[0]
        if not jac:
            return r, None, None
        dZ, dtheta = out[2], out[3]
        if not self.problem.per_joint:
            npin = self.model.pin_count
            dtheta = np.stack([dtheta[..., :npin].sum(-1), dtheta[..., npin:].sum(-1)], axis=-1)
        return r, dZ, dtheta

    def evaluate(self, x, lam, mu, jac=False):
        """Residual blocks and, optionally, their derivatives.

        ``lam`` holds the multiplier estimates shaped like the constraint values.
        """
        q, v, theta = self.unpack(x)
        a = (measurement_points(self.model, q, self.ref.n_pts) - self.ref.points).reshape(self.N + 1, -1)
        r, dZ, dth = self.dynamics(q, v, theta, jac)
        h, Jc = self.constraints(q, v, jac)
        rho = np.sqrt(mu / 2.0)
        shifted = rho * (h + lam / mu)
        merit = float(np.sum(a**2) + np.sum(self.weights * r**2) + np.sum(shifted**2))
        ev = dict(a=a, r=r, h=h, shifted=shifted, rho=rho, merit=merit)
        if jac:
            ev.update(Ja=_measurement_jacobian(self.model, q, self.ref.n_pts), dZ=dZ, dth=dth, Jc=Jc)
        return ev

    def objective(self, ev) -> float:
        return float(np.sum(ev["a"] ** 2) + np.sum(self.weights * ev["r"] ** 2))

    # normal equations ------------------------------------------------------
    def normal_equations(self, ev):
        """Blocks of ``J'J`` and ``J'res`` for the stacked residual."""
        n3, W = self.n3, self.weights
        Ja, dZ, dth, Jc, rho = ev["Ja"], ev["dZ"], ev["dth"], ev["Jc"], ev["rho"]
        Wr = W * ev["r"]
        Jct = np.swapaxes(Jc, 1, 2)
        D = rho**2 * (Jct @ Jc)
        D[:, :n3, :n3] += np.swapaxes(Ja, 1, 2) @ Ja
        dZt = np.swapaxes(dZ, 1, 2)
        D[:-1] += (dZt * W) @ dZ
        D[1:] += np.diag(W)
        U = -(dZt * W)  # coupling of frame i with frame i + 1
        T = np.zeros((self.N + 1, self.nz, self.npar))
        T[:-1] += (dZt * W) @ dth
        T[1:] -= W[:, None] * dth
        Ttt = np.einsum("nzp,z,nzs->ps", dth, W, dth)
        gz = rho * (Jct @ ev["shifted"][..., None])[..., 0]
        gz[:, :n3] += (np.swapaxes(Ja, 1, 2) @ ev["a"][..., None])[..., 0]
        gz[:-1] -= (dZt @ Wr[..., None])[..., 0]
        gz[1:] += Wr
        gt = -np.einsum("nzp,nz->p", dth, Wr)
        return D, U, T, Ttt, gz, gt

    def solve_step(self, blocks, nu):
        """Levenberg-Marquardt step ``-(H + nu diag(H))^-1 g``."""
        D, U, T, Ttt, gz, gt = blocks
        diagD = np.diagonal(D, axis1=1, axis2=2)
        scale = 1e-14 * (1.0 + max(diagD.max(), np.max(np.diag(Ttt), initial=0.0)))
        rhs = np.concatenate([gz[..., None], T], axis=2)  # (N+1, nz, 1 + npar)
        factors, z = [], np.empty_like(rhs)
        prev = None
        for i in range(self.N + 1):
            S = D[i] + np.diag(nu * diagD[i] + scale)
            zi = rhs[i].copy()
            if prev is not None:
                coupling = scipy.linalg.cho_solve(prev, U[i - 1])  # S_{i-1}^-1 U_{i-1}
                S -= U[i - 1].T @ coupling
                zi -= coupling.T @ z[i - 1]
            prev = scipy.linalg.cho_factor(S, check_finite=False)
            factors.append(prev)
            z[i] = zi
        sol = np.empty_like(rhs)
        sol[-1] = scipy.linalg.cho_solve(factors[-1], z[-1], check_finite=False)
        for i in range(self.N - 1, -1, -1):
            sol[i] = scipy.linalg.cho_solve(factors[i], z[i] - U[i] @ sol[i + 1], check_finite=False)
        xg, XT = sol[..., 0], sol[..., 1:]
        schur = Ttt + np.diag(nu * np.diag(Ttt) + scale) - np.einsum("nzp,nzs->ps", T, XT)
        dtheta = np.linalg.solve(schur, np.einsum("nzp,nz->p", T, xg) - gt)
        dz = -xg - XT @ dtheta
        return np.concatenate([dz.ravel(), dtheta])

    # solver ---------------------------------------------------------------
    def solve(self, x0):
        prob = self.problem
        x = x0.copy()
        npar = self.npar
        lam = np.zeros((self.N + 1, self.nfixed + len(self.lay.pairs)))
        mu = prob.penalty
        history, iterations, converged = [], 0, False
        ev = self.evaluate(x, lam, mu, jac=True)
        history.append(self.objective(ev))
        viol_prev = np.max(np.abs(ev["h"]), initial=0.0)
        for outer in range(prob.max_outer_iterations):
            nu, stalled = 1e-4, 0
            for inner in range(prob.max_inner_iterations):
                iterations += 1
                blocks = self.normal_equations(ev)
                for _ in range(12):
                    x_new = x + self.solve_step(blocks, nu)
                    x_new[-npar:] = np.maximum(x_new[-npar:], 0.0)
                    ev_new = self.evaluate(x_new, lam, mu)
                    if ev_new["merit"] < ev["merit"]:
                        break
                    nu *= 4.0
                else:
                    break
                decrease = (ev["merit"] - ev_new["merit"]) / max(ev["merit"], 1e-300)
                log.debug("  iteration %d: merit %.6e, relative decrease %.2e, damping %.1e", iterations, ev_new["merit"], decrease, nu)
                x = x_new
                nu = max(nu / 3.0, 1e-12)
                ev = self.evaluate(x, lam, mu, jac=True)
                history.append(self.objective(ev))
                if decrease < prob.tolerance:
                    break
                # equal arc-length sampling is only piecewise smooth; stop once progress is negligible
                stalled = stalled + 1 if decrease < prob.stall_tolerance else 0
                if stalled >= prob.stall_iterations:
                    break
            viol = np.max(np.abs(ev["h"]), initial=0.0)
            log.debug("outer %d: objective %.6e, violation %.3e, penalty %.1e", outer, history[-1], viol, mu)
            if viol <= prob.constraint_tolerance:
                converged = True
                break
            lam = lam + mu * ev["h"]
            if viol > 0.25 * viol_prev:
                mu *= 10.0
            viol_prev = viol
            ev = self.evaluate(x, lam, mu, jac=True)
        _, _, _, _, gz, gt = self.normal_equations(ev)
        # gradient of the Lagrangian of the plain objective (the merit carries the multipliers)
        kkt = 2.0 * max(np.max(np.abs(gz)), np.max(np.abs(gt)))
        return x, dict(history=history, iterations=iterations, converged=converged, kkt=float(kkt),
                       violation=float(np.max(np.abs(ev["h"]), initial=0.0)), ev=ev)


def fit(
    problem: FitProblem,
    reference: ReferenceTrajectory,
    initial: tuple[np.ndarray, np.ndarray] | None = None,
) -> FitResult:
    """Estimate stiffness, damping and a smoothed trajectory.

    ``initial`` is the ``(q, v)`` guess from :func:`project_reference`;
    it is computed when omitted.
    """
    t0 = time.perf_counter()
    model = problem.model
    if initial is None:
        q0, v0, _ = project_reference(model, problem.scene, reference, polish=False)
    else:
        q0, v0 = (np.asarray(a, dtype=float) for a in initial)
    if q0.shape != (reference.frames, 3 * model.n) or v0.shape != q0.shape:
        raise FitError("initial trajectory does not match the reference frame count and model size")
    solver = _FitSolver(problem, reference)
    p = model.pin_count
    theta0 = _initial_theta(problem)
    x, info = solver.solve(solver.pack(q0, v0, theta0))
    q, v, theta = solver.unpack(x)
    ev = info["ev"]
    err = np.sqrt(np.mean(np.sum((measurement_points(model, q, reference.n_pts) - reference.points) ** 2, -1), -1))
    if problem.per_joint:
        K, C = theta[:p].copy(), theta[p:].copy()
    else:
        K, C = float(theta[0]), float(theta[1])
    return FitResult(
        stiffness=K,
        damping=C,
        q=q.copy(),
        v=v.copy(),
        residuals=ev["r"],
        objective=solver.objective(ev),
        measurement_error=err,
        constraint_violation=info["violation"],
        kkt_residual=info["kkt"],
        converged=info["converged"],
        iterations=info["iterations"],
        history=info["history"],
        solve_time=time.perf_counter() - t0,
    )


def _initial_theta(problem: FitProblem) -> np.ndarray:
    if problem.per_joint:
        p = problem.model.pin_count
        return np.concatenate(
            [np.broadcast_to(problem.initial_stiffness, (p,)), np.broadcast_to(problem.initial_damping, (p,))]
        ).astype(float)
    return np.array([float(np.mean(problem.initial_stiffness)), float(np.mean(problem.initial_damping))])


def objective_value(problem: FitProblem, reference: ReferenceTrajectory, q, v, stiffness=None, damping=None) -> float:
    """Fit objective at a trajectory; parameters default to the problem's initial guess."""
    solver = _FitSolver(problem, reference)
    theta = _initial_theta(problem)
    if stiffness is not None:
        theta = np.concatenate([np.ravel(stiffness), np.ravel(damping)]).astype(float)
    ev = solver.evaluate(solver.pack(np.asarray(q, float), np.asarray(v, float), theta), 0.0, problem.penalty)
    return solver.objective(ev)


# ------------------------------------------------------------ synthetic data


def contacts_from_trajectory(traj: Trajectory, threshold: float = 1e-9) -> list[list[Pair]]:
    """Pairs carrying a positive impulse in the step that produced each frame."""
    frames = [[]]
    for info in traj.diagnostics:
        frames.append([tuple(p) for p, n in zip(info.pairs, info.contact_impulses) if n > threshold])
    return frames


def synthesize_reference(
    model: VineModel,
    scene: Scene,
    state0: RobotState,
    inputs,
    steps: int,
    n_pts: int,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
    config: SimConfig = SimConfig(),
    start: int = 0,
) -> tuple[ReferenceTrajectory, Trajectory]:
    """Simulate ``steps`` steps and sample measurement points from frame ``start`` on.

    ``inputs`` is a per-step table or a schedule callable; the reference
    records the commands actually applied and repeats the last one for its
    final frame.
    """
    if not callable(inputs):
        inputs = np.asarray(inputs, dtype=float).reshape(steps, -1)
    truth = simulate(model, scene, state0, inputs, steps, config)
    pts = measurement_points(model, truth.q[start:], n_pts)
    if noise:
        rng = rng or np.random.default_rng()
        pts = pts + rng.normal(0.0, noise, pts.shape)
    applied = np.array(truth.inputs).reshape(steps, model.prismatic_count)
    if steps:
        u = np.vstack([applied, applied[-1:]])[start:]
    else:
        u = np.zeros((1, model.prismatic_count))
    contacts = contacts_from_trajectory(truth)[start:]
    return ReferenceTrajectory(pts, u, contacts, config.dt), truth
