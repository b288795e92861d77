"""Joint, contact and growth constraints with analytic Jacobians, plus pin springs.

Functions take ``q``/``v`` with an optional leading batch shape. Jacobians are
returned dense with shape ``(..., rows, 3n)``; the stepper also uses the
sparse triplet form from :func:`joint_terms`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .environment import Scene
from .model import PIN, PRISMATIC, VineModel, pin_angle_jacobian, pin_angles, pin_rates, unpack


@dataclass
class JointEval:
    c: np.ndarray
    J: np.ndarray


@dataclass
class ContactEval:
    phi: np.ndarray
    L: np.ndarray
    pairs: list[tuple[int, int]]  # (contact site index, obstacle index) per row


@dataclass
class GrowthEval:
    g: np.ndarray
    G: np.ndarray  # linearized matrix acting on v_{k+1}
    gbar: np.ndarray  # offset: gbar + G v_{k+1} - u = 0
    g_q: np.ndarray
    g_v: np.ndarray


@dataclass(frozen=True)
class _Layout:
    pin_prox: np.ndarray
    pin_dist: np.ndarray
    pin_row: np.ndarray
    pri_prox: np.ndarray
    pri_dist: np.ndarray
    pri_row: np.ndarray
    rows: np.ndarray  # sparse pattern of J, fixed per model
    cols: np.ndarray


@lru_cache(maxsize=64)
def _layout(model: VineModel) -> _Layout:
    pins = [(j.proximal, j.distal, 2 * idx) for idx, j in enumerate(model.joints) if j.kind == PIN and j.proximal >= 0]
    pris = [(j.proximal, j.distal, 2 * idx) for idx, j in enumerate(model.joints) if j.kind == PRISMATIC]
    pp, pd, pr = (np.array(a, dtype=int).reshape(-1) for a in zip(*pins)) if pins else (np.zeros(0, int),) * 3
    mp, md, mr = (np.array(a, dtype=int).reshape(-1) for a in zip(*pris)) if pris else (np.zeros(0, int),) * 3

    rows = [np.array([0, 0, 1, 1])]
    cols = [np.array([0, 2, 1, 2])]
    # pin x-rows, then pin y-rows
    rows += [np.repeat(pr, 4), np.repeat(pr + 1, 4)]
    cols += [
        np.column_stack([3 * pp, 3 * pp + 2, 3 * pd, 3 * pd + 2]).ravel(),
        np.column_stack([3 * pp + 1, 3 * pp + 2, 3 * pd + 1, 3 * pd + 2]).ravel(),
    ]
    # prismatic rows: b_prox . a and b_dist . a
    rows += [np.repeat(mr, 5), np.repeat(mr + 1, 5)]
    cols += [
        np.column_stack([3 * mp, 3 * mp + 1, 3 * md, 3 * md + 1, 3 * mp + 2]).ravel(),
        np.column_stack([3 * mp, 3 * mp + 1, 3 * md, 3 * md + 1, 3 * md + 2]).ravel(),
    ]
    return _Layout(pp, pd, pr, mp, md, mr, np.concatenate(rows), np.concatenate(cols))


def joint_terms(model: VineModel, q: np.ndarray, prismatic_scale: float = 1.0):
    """Residual ``c`` and the nonzero values of ``J`` in the order of the model's fixed pattern.

    Returns ``(c, rows, cols, vals)`` with ``vals`` shaped ``(..., nnz)``.
    """
    lay = _layout(model)
    d = model.d
    x, y, th = unpack(q)
    cs, sn = np.cos(th), np.sin(th)
    batch = x.shape[:-1]
    c = np.zeros(batch + (2 * model.n,))

    bx, by = model.base_position
    c[..., 0] = x[..., 0] - d * cs[..., 0] - bx
    c[..., 1] = y[..., 0] - d * sn[..., 0] - by
    ones = np.ones(batch + (1,))
    vals = [np.concatenate([ones, d * sn[..., :1], ones, -d * cs[..., :1]], axis=-1)]

    i, k = lay.pin_prox, lay.pin_dist
    c[..., lay.pin_row] = x[..., i] + d * cs[..., i] - x[..., k] + d * cs[..., k]
    c[..., lay.pin_row + 1] = y[..., i] + d * sn[..., i] - y[..., k] + d * sn[..., k]
    one = np.ones(batch + (len(i),))
    vals.append(np.stack([one, -d * sn[..., i], -one, -d * sn[..., k]], axis=-1).reshape(batch + (-1,)))
    vals.append(np.stack([one, d * cs[..., i], -one, d * cs[..., k]], axis=-1).reshape(batch + (-1,)))

    i, k = lay.pri_prox, lay.pri_dist
    ax = x[..., k] - x[..., i]
    ay = y[..., k] - y[..., i]
    s = prismatic_scale
    c[..., lay.pri_row] = s * (-sn[..., i] * ax + cs[..., i] * ay)
    c[..., lay.pri_row + 1] = s * (-sn[..., k] * ax + cs[..., k] * ay)
    vals.append(
        s * np.stack(
            [sn[..., i], -cs[..., i], -sn[..., i], cs[..., i], -(cs[..., i] * ax + sn[..., i] * ay)], axis=-1
        ).reshape(batch + (-1,))
    )
    vals.append(
        s * np.stack(
            [sn[..., k], -cs[..., k], -sn[..., k], cs[..., k], -(cs[..., k] * ax + sn[..., k] * ay)], axis=-1
        ).reshape(batch + (-1,))
    )
    return c, lay.rows, lay.cols, np.concatenate(vals, axis=-1)


def joint_constraint(model: VineModel, q: np.ndarray, prismatic_scale: float = 1.0) -> JointEval:
    c, rows, cols, vals = joint_terms(model, q, prismatic_scale)
    J = np.zeros(c.shape + (3 * model.n,))
    J[..., rows, cols] = vals
    return JointEval(c, J)


def all_pairs(model: VineModel, scene: Scene) -> list[tuple[int, int]]:
    return [(s, o) for s in range(len(model.contact_sites)) for o in range(len(scene.obstacles))]


def contact_eval(
    model: VineModel,
    scene: Scene,
    q: np.ndarray,
    pairs: Sequence[tuple[int, int]] | None = None,
    margin: float | None = None,
) -> ContactEval:
    """Signed distances and their Jacobian for (contact site, obstacle) pairs.

    With ``pairs=None`` every pair is considered; ``margin`` then keeps only
    rows with ``phi <= margin`` (unbatched ``q`` only).
    """
    q = np.asarray(q, dtype=float)
    pairs = all_pairs(model, scene) if pairs is None else [tuple(p) for p in pairs]
    x, y, th = unpack(q)
    batch = x.shape[:-1]
    n3 = 3 * model.n
    if not pairs:
        return ContactEval(np.zeros(batch + (0,)), np.zeros(batch + (0, n3)), [])

    sites = model.contact_sites
    d = model.d
    site_idx = np.array([p[0] for p in pairs], dtype=int)
    bodies = np.array([sites[s].body for s in site_idx], dtype=int)
    ends = np.array([sites[s].end for s in site_idx], dtype=float)
    t = th[..., bodies]
    cs, sn = np.cos(t), np.sin(t)
    pts = np.stack([x[..., bodies] + ends * d * cs, y[..., bodies] + ends * d * sn], axis=-1)

    phi = np.empty(batch + (len(pairs),))
    nrm = np.empty(batch + (len(pairs), 2))
    obs_idx = np.array([p[1] for p in pairs], dtype=int)
    for o in np.unique(obs_idx):
        sel = np.nonzero(obs_idx == o)[0]
        dist, normal = scene.obstacles[o].query(pts[..., sel, :])
        phi[..., sel] = dist
        nrm[..., sel, :] = normal

    if margin is not None:
        if batch:
            raise ValueError("margin pruning needs a single configuration")
        keep = np.nonzero(phi <= margin)[0]
        pairs = [pairs[r] for r in keep]
        phi, nrm, bodies, ends, cs, sn = phi[keep], nrm[keep], bodies[keep], ends[keep], cs[keep], sn[keep]

    m = len(pairs)
    L = np.zeros(batch + (m, n3))
    r = np.arange(m)
    nx, ny = nrm[..., 0], nrm[..., 1]
    L[..., r, 3 * bodies] = nx
    L[..., r, 3 * bodies + 1] = ny
    L[..., r, 3 * bodies + 2] = ends * d * (-nx * sn + ny * cs)
    return ContactEval(phi, L, pairs)


def growth_eval(model: VineModel, q: np.ndarray, v: np.ndarray, dt: float) -> GrowthEval:
    """Prismatic gap rates ``g = g_v(q) v`` and the one-step linearization.

    For the joint between bodies ``i`` (proximal) and ``k`` with
    ``a = com_k - com_i`` the gap is ``a . e_i - 2d`` and its rate is
    ``(v_k - v_i) . e_i + (a . b_i) w_i``.
    """
    lay = _layout(model)
    x, y, th = unpack(q)
    vx, vy, w = unpack(v)
    batch = np.broadcast_shapes(x.shape[:-1], vx.shape[:-1])
    i, k = lay.pri_prox, lay.pri_dist
    m = len(i)
    n3 = 3 * model.n
    cs, sn = np.cos(th[..., i]), np.sin(th[..., i])
    ax = x[..., k] - x[..., i]
    ay = y[..., k] - y[..., i]
    dvx = vx[..., k] - vx[..., i]
    dvy = vy[..., k] - vy[..., i]
    wi = w[..., i]
    a_dot_b = -sn * ax + cs * ay
    a_dot_e = cs * ax + sn * ay

    g = dvx * cs + dvy * sn + a_dot_b * wi
    r = np.arange(m)
    g_v = np.zeros(batch + (m, n3))
    g_v[..., r, 3 * i] = -cs
    g_v[..., r, 3 * i + 1] = -sn
    g_v[..., r, 3 * k] = cs
    g_v[..., r, 3 * k + 1] = sn
    g_v[..., r, 3 * i + 2] = a_dot_b

    g_q = np.zeros(batch + (m, n3))
    g_q[..., r, 3 * i] = sn * wi
    g_q[..., r, 3 * i + 1] = -cs * wi
    g_q[..., r, 3 * k] = -sn * wi
    g_q[..., r, 3 * k + 1] = cs * wi
    g_q[..., r, 3 * i + 2] = -dvx * sn + dvy * cs - a_dot_e * wi

    G = g_q * dt + g_v
    gbar = g - np.einsum("...ij,...j->...i", g_v, np.broadcast_to(v, batch + (n3,)))
    return GrowthEval(np.broadcast_to(g, batch + (m,)).copy(), G, gbar, g_q, g_v)


def pin_torques(model: VineModel, q, v, stiffness=None, damping=None) -> np.ndarray:
    K = model.stiffness if stiffness is None else stiffness
    C = model.damping if damping is None else damping
    return -np.asarray(K) * pin_angles(model, q) - np.asarray(C) * pin_rates(model, v)


def spring_damper_force(model: VineModel, q, v, stiffness=None, damping=None) -> np.ndarray:
    """Generalized force ``R tau`` of the pin springs and dampers (gravity excluded)."""
    tau = pin_torques(model, q, v, stiffness, damping)
    return tau @ pin_angle_jacobian(model)


def gravity_force(model: VineModel, scene: Scene) -> np.ndarray:
    gx, gy = scene.gravity
    return np.column_stack([model.masses * gx, model.masses * gy, np.zeros(model.n)]).ravel()
