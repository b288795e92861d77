"""Rigid-body chain model of a vine robot and its configuration kinematics.

Every array function here accepts a leading batch shape, so ``q`` may be a
single ``(3n,)`` configuration or a stack ``(..., 3n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

PIN = "pin"
PRISMATIC = "prismatic"

PROXIMAL = -1
DISTAL = 1

ContactPolicy = Union[str, Sequence[tuple]]


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """User-facing description of a vine robot chain.

    ``half_length`` defaults to ``nominal_length / (2 * body_count)``, which
    puts the nominal prismatic extension at zero. ``stiffness`` and ``damping``
    are per pin joint (scalar or one entry per pin, base pin first).
    """

    body_count: int
    total_mass: float
    nominal_length: float
    half_length: float | None = None
    stiffness: float | Sequence[float] = 0.0
    damping: float | Sequence[float] = 0.0
    contact_points: ContactPolicy = "pins_plus_tip"
    base_position: tuple[float, float] = (0.0, 0.0)

    def with_parameters(self, stiffness=None, damping=None) -> "ModelSpec":
        from dataclasses import replace

        return replace(
            self,
            stiffness=self.stiffness if stiffness is None else stiffness,
            damping=self.damping if damping is None else damping,
        )


@dataclass(frozen=True)
class Joint:
    kind: str
    proximal: int  # -1 for the world
    distal: int


@dataclass(frozen=True)
class ContactSite:
    body: int
    end: int  # PROXIMAL or DISTAL

    @property
    def label(self) -> str:
        return f"{self.body}{'p' if self.end == PROXIMAL else 'd'}"


@dataclass(frozen=True, eq=False)
class VineModel:
    spec: ModelSpec
    joints: tuple[Joint, ...]
    masses: np.ndarray
    inertias: np.ndarray
    contact_sites: tuple[ContactSite, ...]
    stiffness: np.ndarray = field(repr=False)
    damping: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.spec.body_count

    @property
    def d(self) -> float:
        return _half_length(self.spec)

    @property
    def base_position(self) -> np.ndarray:
        return np.asarray(self.spec.base_position, dtype=float)

    @property
    def pin_count(self) -> int:
        return (self.n + 1) // 2

    @property
    def prismatic_count(self) -> int:
        return self.n // 2

    @property
    def nominal_extension(self) -> float:
        if self.prismatic_count == 0:
            return 0.0
        slack = self.spec.nominal_length - 2.0 * self.d * self.n
        return max(slack, 0.0) / self.prismatic_count

    def pin_joints(self) -> list[Joint]:
        return [j for j in self.joints if j.kind == PIN]

    def prismatic_joints(self) -> list[Joint]:
        return [j for j in self.joints if j.kind == PRISMATIC]

    def with_parameters(self, stiffness=None, damping=None) -> "VineModel":
        return build_model(self.spec.with_parameters(stiffness, damping))


@dataclass
class RobotState:
    q: np.ndarray
    v: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.q.shape != self.v.shape or self.q.ndim != 1 or self.q.size % 3:
            raise ModelError(f"q and v must be matching 3n-vectors, got {self.q.shape} and {self.v.shape}")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.v))):
            raise ModelError("state contains non-finite entries")

    def copy(self) -> "RobotState":
        return RobotState(self.q.copy(), self.v.copy(), self.time)


def _half_length(spec: ModelSpec) -> float:
    if spec.half_length is None:
        return spec.nominal_length / (2.0 * spec.body_count)
    return float(spec.half_length)


def _per_pin(value, count: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(count, float(arr))
    if arr.shape != (count,):
        raise ModelError(f"{name} must be a scalar or have {count} entries, got shape {arr.shape}")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ModelError(f"{name} entries must be finite and non-negative")
    return arr


def _contact_sites(spec: ModelSpec, joints: Sequence[Joint]) -> tuple[ContactSite, ...]:
    policy = spec.contact_points
    n = spec.body_count
    if isinstance(policy, str):
        if policy not in ("pins_only", "pins_plus_tip"):
            raise ModelError(f"unknown contact point policy {policy!r}")
        # the base pin sits at the fixed base position and carries no site
        sites = [ContactSite(j.distal, PROXIMAL) for j in joints if j.kind == PIN and j.proximal >= 0]
        if policy == "pins_plus_tip":
            sites.append(ContactSite(n - 1, DISTAL))
        return tuple(sites)
    sites = []
    for item in policy:
        body, end = item
        if isinstance(end, str):
            if end not in ("proximal", "distal"):
                raise ModelError(f"contact endpoint must be 'proximal' or 'distal', got {end!r}")
            end = PROXIMAL if end == "proximal" else DISTAL
        if not 0 <= int(body) < n or end not in (PROXIMAL, DISTAL):
            raise ModelError(f"invalid contact site {item!r}")
        sites.append(ContactSite(int(body), int(end)))
    return tuple(sites)


def build_model(spec: ModelSpec) -> VineModel:
    n = int(spec.body_count)
    if n < 2:
        raise ModelError(f"body_count must be at least 2, got {spec.body_count}")
    if not spec.total_mass > 0:
        raise ModelError("total_mass must be positive")
    if not spec.nominal_length > 0:
        raise ModelError("nominal_length must be positive")
    d = _half_length(spec)
    if not d > 0:
        raise ModelError("half_length must be positive")

    joints = [Joint(PIN, -1, 0)]
    for j in range(1, n):
        joints.append(Joint(PRISMATIC if j % 2 else PIN, j - 1, j))

    m = spec.total_mass / n
    masses = np.full(n, m)
    inertias = np.full(n, m * (2.0 * d) ** 2 / 12.0)
    pins = (n + 1) // 2
    return VineModel(
        spec=spec,
        joints=tuple(joints),
        masses=masses,
        inertias=inertias,
        contact_sites=_contact_sites(spec, joints),
        stiffness=_per_pin(spec.stiffness, pins, "stiffness"),
        damping=_per_pin(spec.damping, pins, "damping"),
    )


def mass_matrix(model: VineModel) -> np.ndarray:
    """Block-diagonal mass matrix; returned as the dense ``(3n, 3n)`` array."""
    return np.diag(mass_diagonal(model))


def mass_diagonal(model: VineModel) -> np.ndarray:
    return np.column_stack([model.masses, model.masses, model.inertias]).ravel()


def initial_state(model: VineModel, base_heading: float = 0.0, initial_extension: float | None = None) -> RobotState:
    """Straight chain along ``base_heading`` with every prismatic gap equal."""
    gap = model.nominal_extension if initial_extension is None else float(initial_extension)
    if gap < 0:
        raise ModelError("initial_extension must be non-negative")
    d = model.d
    direction = np.array([math.cos(base_heading), math.sin(base_heading)])
    q = np.zeros(3 * model.n)
    s = 0.0  # arc length of the current body's proximal end
    for i in range(model.n):
        if i > 0 and model.joints[i].kind == PRISMATIC:
            s += gap
        com = model.base_position + (s + d) * direction
        q[3 * i: 3 * i + 3] = (com[0], com[1], base_heading)
        s += 2 * d
    return RobotState(q, np.zeros_like(q), 0.0)


def unpack(q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    q = np.asarray(q, dtype=float)
    return q[..., 0::3], q[..., 1::3], q[..., 2::3]


def endpoints(model: VineModel, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(proximal, distal)`` endpoint arrays of shape ``(..., n, 2)``."""
    x, y, th = unpack(q)
    com = np.stack([x, y], axis=-1)
    axis = np.stack([np.cos(th), np.sin(th)], axis=-1) * model.d
    return com - axis, com + axis


def site_positions(model: VineModel, q: np.ndarray, sites: Sequence[ContactSite] | None = None) -> np.ndarray:
    sites = model.contact_sites if sites is None else sites
    x, y, th = unpack(q)
    bodies = np.array([s.body for s in sites], dtype=int)
    ends = np.array([s.end for s in sites], dtype=float)
    t = th[..., bodies]
    return np.stack(
        [x[..., bodies] + ends * model.d * np.cos(t), y[..., bodies] + ends * model.d * np.sin(t)], axis=-1
    )


def wrap_angle(a):
    """Wrap to ``(-pi, pi]``."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def _pin_pairs(model: VineModel) -> tuple[np.ndarray, np.ndarray]:
    pins = model.pin_joints()
    return np.array([j.proximal for j in pins]), np.array([j.distal for j in pins])


def pin_angle_jacobian(model: VineModel) -> np.ndarray:
    """Constant ``dtheta/dq``; its transpose maps pin torques to generalized forces."""
    prox, dist = _pin_pairs(model)
    D = np.zeros((len(dist), 3 * model.n))
    rows = np.arange(len(dist))
    D[rows, 3 * dist + 2] = 1.0
    inner = prox >= 0
    D[rows[inner], 3 * prox[inner] + 2] = -1.0
    return D


def pin_angles(model: VineModel, q: np.ndarray) -> np.ndarray:
    th = unpack(q)[2]
    prox, dist = _pin_pairs(model)
    ang = th[..., dist].copy()
    inner = prox >= 0
    ang[..., inner] -= th[..., prox[inner]]
    return wrap_angle(ang)


def pin_rates(model: VineModel, v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=float) @ pin_angle_jacobian(model).T


def prismatic_gaps(model: VineModel, q: np.ndarray) -> np.ndarray:
    """Axial gap ``a . e_prox - 2d`` for every prismatic joint."""
    x, y, th = unpack(q)
    pj = model.prismatic_joints()
    i = np.array([j.proximal for j in pj], dtype=int)
    k = np.array([j.distal for j in pj], dtype=int)
    ax = x[..., k] - x[..., i]
    ay = y[..., k] - y[..., i]
    return ax * np.cos(th[..., i]) + ay * np.sin(th[..., i]) - 2.0 * model.d


def robot_length(model: VineModel, q: np.ndarray) -> np.ndarray:
    return 2.0 * model.d * model.n + prismatic_gaps(model, q).sum(axis=-1)


def configuration_from_joints(model: VineModel, angles, gaps) -> np.ndarray:
    """Feasible ``q`` from pin angles (base first) and prismatic gaps.

    Batched over leading dimensions of ``angles``/``gaps``.
    """
    angles = np.asarray(angles, dtype=float)
    gaps = np.asarray(gaps, dtype=float)
    batch = np.broadcast_shapes(angles.shape[:-1], gaps.shape[:-1])
    angles = np.broadcast_to(angles, batch + (model.pin_count,))
    gaps = np.broadcast_to(gaps, batch + (model.prismatic_count,))
    d = model.d
    q = np.zeros(batch + (3 * model.n,))
    heading = np.zeros(batch)
    tip = np.broadcast_to(model.base_position, batch + (2,)).copy()
    pin = prism = 0
    for i, joint in enumerate(model.joints):
        if joint.kind == PIN:
            heading = heading + angles[..., pin]
            pin += 1
        else:
            axis = np.stack([np.cos(heading), np.sin(heading)], axis=-1)
            tip = tip + gaps[..., prism, None] * axis
            prism += 1
        axis = np.stack([np.cos(heading), np.sin(heading)], axis=-1)
        com = tip + d * axis
        q[..., 3 * i] = com[..., 0]
        q[..., 3 * i + 1] = com[..., 1]
        q[..., 3 * i + 2] = heading
        tip = com + d * axis
    return q
