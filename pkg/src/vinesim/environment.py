"""Obstacle geometry and scene checks.

Signed distances are positive outside a solid, zero on its surface and
negative inside. All queries are vectorized over points of shape ``(..., 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .model import VineModel, PRISMATIC


class SingularityError(ValueError):
    """Raised where the surface normal is undefined (e.g. a circle center)."""


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise SceneError(f"circle radius must be positive, got {self.radius}")

    @property
    def feature_radius(self) -> float:
        return float(self.radius)

    def distance(self, points: np.ndarray) -> np.ndarray:
        rel = np.asarray(points, dtype=float) - np.asarray(self.center, dtype=float)
        return np.hypot(rel[..., 0], rel[..., 1]) - self.radius

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rel = np.asarray(points, dtype=float) - np.asarray(self.center, dtype=float)
        dist = np.hypot(rel[..., 0], rel[..., 1])
        if np.any(dist == 0.0):
            raise SingularityError("surface normal undefined at the circle center")
        return dist - self.radius, rel / dist[..., None]


@dataclass(frozen=True)
class HalfPlane:
    """Solid occupying the side of the boundary opposite ``normal``."""

    point: tuple[float, float]
    normal: tuple[float, float]

    def __post_init__(self):
        if abs(math.hypot(*self.normal) - 1.0) > 1e-12:
            raise SceneError(f"half-plane normal must be a unit vector, got {self.normal}")

    @property
    def feature_radius(self) -> float:
        return math.inf

    def distance(self, points: np.ndarray) -> np.ndarray:
        return self.query(points)[0]

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        points = np.asarray(points, dtype=float)
        nrm = np.asarray(self.normal, dtype=float)
        dist = (points - np.asarray(self.point, dtype=float)) @ nrm
        return dist, np.broadcast_to(nrm, points.shape).copy()


@dataclass(frozen=True)
class RoundedPolygon:
    """Convex counter-clockwise polygon dilated by ``corner_radius``."""

    vertices: tuple[tuple[float, float], ...]
    corner_radius: float
    _edges: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
            raise SceneError("rounded polygon needs at least three 2D vertices")
        if not self.corner_radius > 0:
            raise SceneError("rounded polygon corner_radius must be positive")
        edges = np.roll(verts, -1, axis=0) - verts
        cross = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
        if np.any(cross <= 0):
            raise SceneError("rounded polygon vertices must be strictly convex and counter-clockwise")
        lengths = np.hypot(edges[:, 0], edges[:, 1])
        normals = np.column_stack([edges[:, 1], -edges[:, 0]]) / lengths[:, None]
        object.__setattr__(self, "_edges", (verts, edges, lengths, normals))

    @property
    def feature_radius(self) -> float:
        return float(self.corner_radius)

    def distance(self, points: np.ndarray) -> np.ndarray:
        return self.query(points)[0]

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        verts, edges, lengths, normals = self._edges
        p = np.asarray(points, dtype=float)[..., None, :]  # (..., 1, 2)
        rel = p - verts  # (..., m, 2)
        t = np.clip(np.sum(rel * edges, axis=-1) / lengths**2, 0.0, 1.0)
        closest = verts + t[..., None] * edges
        diff = p - closest
        dist = np.hypot(diff[..., 0], diff[..., 1])
        side = np.sum(rel * normals, axis=-1)  # signed distance to each supporting line
        inside = np.all(side <= 0.0, axis=-1)

        k_out = np.argmin(dist, axis=-1)  # argmin/argmax keep the lowest index on ties
        k_in = np.argmax(side, axis=-1)
        d_out = np.take_along_axis(dist, k_out[..., None], -1)[..., 0]
        d_in = np.take_along_axis(side, k_in[..., None], -1)[..., 0]
        diff_out = np.take_along_axis(diff, k_out[..., None, None], -2)[..., 0, :]
        safe = np.where(d_out > 0, d_out, 1.0)[..., None]
        n_out = diff_out / safe
        n_in = normals[k_in]
        sd = np.where(inside, d_in, d_out) - self.corner_radius
        nrm = np.where(inside[..., None], n_in, n_out)
        return sd, nrm


Obstacle = Union[Circle, HalfPlane, RoundedPolygon]


@dataclass(frozen=True)
class Scene:
    obstacles: tuple = ()
    gravity: tuple[float, float] = (0.0, -9.81)

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if len(self.gravity) != 2 or not all(math.isfinite(g) for g in self.gravity):
            raise SceneError(f"gravity must be a finite 2-vector, got {self.gravity}")


def signed_distance(obstacle: Obstacle, point) -> float | np.ndarray:
    """Defined everywhere, including points where the normal is not."""
    dist = obstacle.distance(point)
    return dist[()] if np.ndim(dist) == 0 else dist


def surface_normal(obstacle: Obstacle, point) -> np.ndarray:
    return obstacle.query(point)[1]


@dataclass
class ValidationReport:
    max_spacing: float
    min_feature_radius: float
    warnings: list[str]

    @property
    def ok(self) -> bool:
        return not self.warnings


def contact_spacing(model: VineModel, max_gap: float) -> float:
    """Largest distance between consecutive contact sites with every gap at ``max_gap``."""
    if len(model.contact_sites) < 2:
        return 0.0
    d = model.d
    # arc-length coordinate of each body's proximal end along a straight chain
    start = np.zeros(model.n)
    s = 0.0
    for i in range(model.n):
        if i > 0 and model.joints[i].kind == PRISMATIC:
            s += max_gap
        start[i] = s
        s += 2 * d
    arc = sorted(start[site.body] + (d + site.end * d) for site in model.contact_sites)
    return float(np.max(np.diff(arc)))


def validate_scene(scene: Scene, model: VineModel, max_gap: float | None = None) -> ValidationReport:
    """Check the rule of thumb that contact sites are closer together than any obstacle corner radius.

    ``max_gap`` is the largest prismatic extension the caller expects to reach;
    it defaults to the model's nominal extension.
    """
    gap = model.nominal_extension if max_gap is None else float(max_gap)
    spacing = contact_spacing(model, gap)
    radii = [ob.feature_radius for ob in scene.obstacles]
    min_radius = min(radii, default=math.inf)
    warnings = []
    for idx, (ob, r) in enumerate(zip(scene.obstacles, radii)):
        if not spacing < r:
            warnings.append(
                f"obstacle {idx} ({type(ob).__name__}) feature radius {r:.4g} m does not exceed "
                f"contact point spacing {spacing:.4g} m"
            )
    return ValidationReport(spacing, min_radius, warnings)


_OBSTACLE_KEYS = {
    "circle": ("center", "radius"),
    "half_plane": ("point", "normal"),
    "rounded_polygon": ("vertices", "corner_radius"),
}


def obstacle_from_dict(data: dict) -> Obstacle:
    kind = data.get("type")
    if kind not in _OBSTACLE_KEYS:
        raise SceneError(f"unknown obstacle type {kind!r}")
    expected = _OBSTACLE_KEYS[kind]
    extra = sorted(set(data) - set(expected) - {"type"})
    if extra:
        raise SceneError(f"unknown key(s) for {kind} obstacle: {extra}")
    missing = [k for k in expected if k not in data]
    if missing:
        raise SceneError(f"{kind} obstacle is missing key(s): {missing}")
    if kind == "circle":
        return Circle(tuple(map(float, data["center"])), float(data["radius"]))
    if kind == "half_plane":
        nrm = np.asarray(data["normal"], dtype=float)
        length = float(np.hypot(*nrm))
        if not length > 0:
            raise SceneError("half-plane normal must be non-zero")
        return HalfPlane(tuple(map(float, data["point"])), tuple(float(c) for c in nrm / length))
    verts = tuple(tuple(map(float, v)) for v in data["vertices"])
    return RoundedPolygon(verts, float(data["corner_radius"]))


def obstacle_to_dict(ob: Obstacle) -> dict:
    if isinstance(ob, Circle):
        return {"type": "circle", "center": list(ob.center), "radius": ob.radius}
    if isinstance(ob, HalfPlane):
        return {"type": "half_plane", "point": list(ob.point), "normal": list(ob.normal)}
    return {"type": "rounded_polygon", "vertices": [list(v) for v in ob.vertices], "corner_radius": ob.corner_radius}
