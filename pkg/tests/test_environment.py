import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from conftest import make_model
from vinesim.environment import (
    Circle,
    HalfPlane,
    RoundedPolygon,
    Scene,
    SceneError,
    SingularityError,
    contact_spacing,
    obstacle_from_dict,
    obstacle_to_dict,
    signed_distance,
    surface_normal,
    validate_scene,
)

coords = st.floats(-3.0, 3.0)


def test_circle_examples():
    c = Circle((2.0, 0.0), 0.5)
    assert signed_distance(c, (1.0, 0.0)) == pytest.approx(0.5)
    assert signed_distance(c, (2.0, 0.0)) == pytest.approx(-0.5)
    assert np.allclose(surface_normal(c, (1.0, 0.0)), [-1, 0])
    with pytest.raises(SingularityError):
        surface_normal(c, (2.0, 0.0))


def test_half_plane_examples():
    h = HalfPlane((3.0, 0.0), (-1.0, 0.0))
    assert signed_distance(h, (2.9, 1.0)) == pytest.approx(0.1)
    assert signed_distance(h, (3.5, -4.0)) == pytest.approx(-0.5)
    assert np.allclose(surface_normal(h, (7.0, 2.0)), [-1, 0])


def test_rounded_polygon_corner_arc_normal():
    p = RoundedPolygon(((0, 0), (1, 0), (1, 1), (0, 1)), 0.2)
    pt = np.array([1.3, 1.4])
    assert signed_distance(p, pt) == pytest.approx(0.5 - 0.2)
    assert np.allclose(surface_normal(p, pt), (pt - [1, 1]) / 0.5)
    assert signed_distance(p, (0.5, 0.5)) == pytest.approx(-0.7)
    assert signed_distance(p, (0.5, -0.2)) == pytest.approx(0.0, abs=1e-15)


def test_rounded_polygon_ties_pick_lowest_feature():
    p = RoundedPolygon(((0, 0), (2, 0), (2, 2), (0, 2)), 0.1)
    # the centre is equidistant to all four edges; edge 0 (bottom) wins
    assert np.allclose(surface_normal(p, (1.0, 1.0)), [0, -1])


@pytest.mark.parametrize(
    "make",
    [
        lambda: Circle((0, 0), 0.0),
        lambda: HalfPlane((0, 0), (1.0, 1.0)),
        lambda: RoundedPolygon(((0, 0), (1, 0), (0, 1)), 0.0),
        lambda: RoundedPolygon(((0, 0), (0, 1), (1, 0)), 0.1),  # clockwise
        lambda: RoundedPolygon(((0, 0), (1, 0), (2, 0)), 0.1),  # degenerate
        lambda: Scene((), (0.0, math.nan)),
    ],
)
def test_invalid_obstacles_rejected(make):
    with pytest.raises(SceneError):
        make()


def brute_force_polygon_distance(vertices, radius, point, samples=4000):
    """Signed distance to the dilated polygon from densely sampled core edges."""
    v = np.asarray(vertices, float)
    t = np.linspace(0.0, 1.0, samples)[:, None]
    pts = np.concatenate([v[i] + t * (v[(i + 1) % len(v)] - v[i]) for i in range(len(v))])
    dist = np.min(np.hypot(*(pts - point).T))
    edges = np.roll(v, -1, axis=0) - v
    rel = point - v
    inside = np.all(edges[:, 0] * rel[:, 1] - edges[:, 1] * rel[:, 0] >= 0)
    return (-dist if inside else dist) - radius


@given(x=coords, y=coords, radius=st.floats(0.01, 0.5))
def test_rounded_polygon_matches_brute_force(x, y, radius):
    verts = ((-0.5, -0.4), (0.7, -0.3), (0.9, 0.5), (-0.2, 0.8))
    p = RoundedPolygon(verts, radius)
    point = np.array([x, y])
    # sampling spacing is about 3e-4, so the oracle is accurate to that scale
    assert signed_distance(p, point) == pytest.approx(brute_force_polygon_distance(verts, radius, point), abs=5e-4)


def numeric_gradient(ob, point, h=1e-7):
    g = []
    for e in np.eye(2):
        g.append((signed_distance(ob, point + h * e) - signed_distance(ob, point - h * e)) / (2 * h))
    return np.array(g)


@given(x=coords, y=coords)
def test_eikonal_and_normal_circle(x, y):
    c = Circle((0.3, -0.2), 0.7)
    point = np.array([x, y])
    assume(np.hypot(*(point - c.center)) > 1e-3)
    grad = numeric_gradient(c, point)
    assert np.linalg.norm(grad) == pytest.approx(1.0, abs=1e-6)
    assert np.allclose(surface_normal(c, point), grad, atol=1e-6)


@given(x=coords, y=coords)
def test_eikonal_and_normal_rounded_polygon(x, y):
    verts = ((-0.5, -0.4), (0.7, -0.3), (0.9, 0.5), (-0.2, 0.8))
    p = RoundedPolygon(verts, 0.1)
    point = np.array([x, y])
    d_here = signed_distance(p, point)
    assume(d_here > -0.1 + 1e-6)  # the core interior has a medial axis where the gradient jumps
    grad = numeric_gradient(p, point)
    assume(abs(np.linalg.norm(grad) - 1.0) < 0.5)  # skip the measure-zero set straddling a kink
    assert np.linalg.norm(grad) == pytest.approx(1.0, abs=1e-6)
    assert np.allclose(surface_normal(p, point), grad, atol=1e-6)


@given(x=coords, y=coords, angle=st.floats(-math.pi, math.pi))
def test_eikonal_half_plane(x, y, angle):
    h = HalfPlane((0.1, 0.2), (math.cos(angle), math.sin(angle)))
    grad = numeric_gradient(h, np.array([x, y]))
    assert np.linalg.norm(grad) == pytest.approx(1.0, abs=1e-6)


def test_query_is_vectorized():
    c = Circle((0.0, 0.0), 1.0)
    pts = np.array([[[2.0, 0.0], [0.0, 3.0]]])
    dist, nrm = c.query(pts)
    assert dist.shape == (1, 2) and nrm.shape == (1, 2, 2)
    assert np.allclose(dist, [[1.0, 2.0]])


def test_validate_scene_pass_and_warning():
    # 9 bodies of length 0.08 m: consecutive sites two bodies apart, 0.16 m without gaps
    m = make_model(9, length=0.72, contact_points="pins_only")
    assert contact_spacing(m, 0.0) == pytest.approx(0.16)
    assert validate_scene(Scene((Circle((1, 1), 0.25),)), m, 0.0).ok
    report = validate_scene(Scene((Circle((1, 1), 0.15),)), m, 0.0)
    assert not report.ok and "0.15" in report.warnings[0]
    # a larger reachable gap widens the spacing past the radius
    assert not validate_scene(Scene((Circle((1, 1), 0.25),)), m, 0.1).ok


def test_validate_spacing_example_values():
    m = make_model(2, length=0.08, contact_points=((0, "proximal"), (1, "distal")))
    assert contact_spacing(m, 0.0) == pytest.approx(0.08)
    assert validate_scene(Scene((RoundedPolygon(((0, 0), (1, 0), (0, 1)), 0.25),)), m, 0.0).ok
    m = make_model(2, length=0.3, contact_points=((0, "proximal"), (1, "distal")))
    assert not validate_scene(Scene((Circle((2, 2), 0.25),)), m, 0.0).ok


def test_validate_empty_scene():
    report = validate_scene(Scene(), make_model(5))
    assert report.ok and report.min_feature_radius == math.inf


@pytest.mark.parametrize(
    "ob",
    [
        Circle((0.1, 0.2), 0.3),
        HalfPlane((0.0, 1.0), (0.6, 0.8)),
        RoundedPolygon(((0, 0), (1, 0), (0.5, 1)), 0.05),
    ],
)
def test_obstacle_dict_round_trip(ob):
    assert obstacle_from_dict(obstacle_to_dict(ob)) == ob


def test_obstacle_from_dict_errors():
    with pytest.raises(SceneError, match="unknown obstacle type"):
        obstacle_from_dict({"type": "square"})
    with pytest.raises(SceneError, match="radius"):
        obstacle_from_dict({"type": "circle", "center": [0, 0]})
    with pytest.raises(SceneError, match="colour"):
        obstacle_from_dict({"type": "circle", "center": [0, 0], "radius": 1, "colour": "red"})
    # half-plane normals are normalized on load
    assert obstacle_from_dict({"type": "half_plane", "point": [0, 0], "normal": [0, 2]}).normal == (0.0, 1.0)
