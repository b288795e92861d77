import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_difference, make_model, random_configuration, relative_error
from vinesim.constraints import (
    contact_eval,
    gravity_force,
    growth_eval,
    joint_constraint,
    joint_terms,
    spring_damper_force,
)
from vinesim.environment import Circle, HalfPlane, RoundedPolygon, Scene
from vinesim.model import ModelSpec, build_model, initial_state, pin_angle_jacobian, pin_angles, prismatic_gaps


def unit_model(n=3, **kw):
    """Bodies of length 1 m (half-length 0.5)."""
    return build_model(ModelSpec(n, 0.1 * n, float(n), half_length=0.5, **kw))


# ---------------------------------------------------------------- joints


def test_joint_rows_coincident_pin():
    m = unit_model(3)
    q = np.array([0.5, 0, 0, 1.5, 0, 0, 2.5, 0, 0])
    assert np.allclose(joint_constraint(m, q).c, 0)


def test_joint_rows_displaced_pin():
    m = unit_model(3)
    q = np.array([0.5, 0, 0, 1.5, 0, 0, 2.6, 0.1, 0])  # joint 2 is the pin between bodies 1 and 2
    c = joint_constraint(m, q).c
    assert np.allclose(c[4:6], [-0.1, -0.1])
    assert np.allclose(c[:4], 0)


def test_joint_rows_prismatic_offset():
    m = unit_model(2)
    q = np.array([0.5, 0, 0, 1.5, 0.2, 0])  # joint 1 is prismatic
    c = joint_constraint(m, q).c
    assert np.allclose(c[2:4], [0.2, 0.2])


def test_base_pin_rows_follow_base_position():
    m = build_model(ModelSpec(2, 0.2, 2.0, half_length=0.5, base_position=(0.3, -0.1)))
    q = initial_state(m, 0.4).q
    assert np.allclose(joint_constraint(m, q).c, 0, atol=1e-15)
    assert np.allclose(joint_constraint(m, q + np.tile([0.1, 0, 0], 2)).c[:2], [0.1, 0])


def test_prismatic_rows_scale():
    m = unit_model(2)
    q = np.array([0.5, 0, 0, 1.5, 0.2, 0])
    assert np.allclose(joint_constraint(m, q, prismatic_scale=10.0).c[2:4], [2.0, 2.0])


def test_sparse_terms_match_dense():
    m = make_model(6)
    q = random_configuration(m, np.random.default_rng(0))
    c, rows, cols, vals = joint_terms(m, q)
    J = np.zeros((len(c), 3 * m.n))
    np.add.at(J, (rows, cols), vals)
    assert np.allclose(J, joint_constraint(m, q).J)


@pytest.mark.parametrize("n", [2, 3, 6])
def test_joint_jacobian_matches_finite_differences(n, rng):
    m = make_model(n)
    for _ in range(10):
        q = random_configuration(m, rng) + rng.normal(0, 1e-2, 3 * n)  # off the manifold too
        fd = central_difference(lambda x: joint_constraint(m, x).c, q)
        assert relative_error(joint_constraint(m, q).J, fd) <= 1e-6


@given(seed=st.integers(0, 2**32 - 1), dx=st.floats(-5, 5), dy=st.floats(-5, 5))
def test_interior_joint_rows_translation_invariant(seed, dx, dy):
    m = make_model(5)
    q = random_configuration(m, np.random.default_rng(seed)) + np.random.default_rng(seed + 1).normal(0, 0.01, 15)
    c0 = joint_constraint(m, q).c
    c1 = joint_constraint(m, q + np.tile([dx, dy, 0.0], m.n)).c
    assert np.allclose(c0[2:], c1[2:], atol=1e-9)


# --------------------------------------------------------------- contacts


def tip_site_model():
    # a single site at body 0's distal end, which sits at (1, 0) when straight
    return build_model(ModelSpec(2, 0.2, 2.0, half_length=0.5, contact_points=((0, "distal"),)))


def test_contact_row_circle():
    m = tip_site_model()
    q = initial_state(m, 0.0, 0.0).q
    ce = contact_eval(m, Scene((Circle((2.0, 0.0), 0.5),)), q)
    assert ce.phi == pytest.approx([0.5])
    assert np.allclose(ce.L[0, 0:2], [-1, 0])
    assert ce.pairs == [(0, 0)]


def test_contact_row_on_surface():
    m = tip_site_model()
    q = initial_state(m, 0.0, 0.0).q
    ce = contact_eval(m, Scene((Circle((1.5, 0.0), 0.5),)), q)
    assert ce.phi[0] == pytest.approx(0.0, abs=1e-15)


def test_contact_row_half_plane():
    m = tip_site_model()
    q = initial_state(m, 0.0, 0.0).q + np.tile([1.9, 1.0, 0.0], 2)  # site at (2.9, 1)
    ce = contact_eval(m, Scene((HalfPlane((3.0, 0.0), (-1.0, 0.0)),)), q)
    assert ce.phi == pytest.approx([0.1])


def test_contact_margin_prunes_far_pairs():
    m = make_model(5)
    q = initial_state(m, 0.0).q
    scene = Scene((Circle((0.6, 0.0), 0.05), Circle((5.0, 5.0), 0.1)))
    ce = contact_eval(m, scene, q, margin=0.1)
    assert ce.pairs == [(2, 0)]
    assert len(contact_eval(m, scene, q).pairs) == 6


def far_scene():
    # obstacles kept away from the sampled configurations so every distance is smooth
    return Scene(
        (
            Circle((0.2, 0.9), 0.1),
            HalfPlane((0.0, -1.0), (0.6, 0.8)),
            RoundedPolygon(((0.8, 0.7), (1.1, 0.7), (1.0, 1.0)), 0.05),
        )
    )


@pytest.mark.parametrize("n", [2, 5])
def test_contact_jacobian_matches_finite_differences(n, rng):
    m = make_model(n)
    scene = far_scene()
    for _ in range(10):
        q = random_configuration(m, rng)
        fd = central_difference(lambda x: contact_eval(m, scene, x).phi, q)
        assert relative_error(contact_eval(m, scene, q).L, fd) <= 1e-6


def test_contact_eval_batched_matches_single(rng):
    m = make_model(5)
    scene = far_scene()
    qs = np.stack([random_configuration(m, rng) for _ in range(4)])
    batch = contact_eval(m, scene, qs)
    for i, q in enumerate(qs):
        single = contact_eval(m, scene, q)
        assert np.allclose(batch.phi[i], single.phi) and np.allclose(batch.L[i], single.L)


# ----------------------------------------------------------------- growth


def test_growth_rate_axial_speed():
    m = unit_model(2)
    q = np.array([0.5, 0, 0, 1.5, 0, 0])
    v = np.array([0, 0, 0, 0.1, 0, 0])
    assert growth_eval(m, q, v, 0.01).g == pytest.approx([0.1])
    assert growth_eval(m, q, np.zeros(6), 0.01).g == pytest.approx([0.0])
    assert growth_eval(m, q, np.tile([0.3, -0.2, 0.0], 2), 0.01).g == pytest.approx([0.0], abs=1e-15)


def test_growth_linearization_terms(rng):
    m = make_model(6)
    q = random_configuration(m, rng)
    v = rng.normal(0, 0.1, 3 * m.n)
    dt = 0.01
    ge = growth_eval(m, q, v, dt)
    g_of = lambda qq, vv: growth_eval(m, qq, vv, dt).g  # noqa: E731
    assert relative_error(ge.g_q, central_difference(lambda x: g_of(x, v), q)) <= 1e-6
    assert relative_error(ge.g_v, central_difference(lambda x: g_of(q, x), v)) <= 1e-6
    assert np.allclose(ge.G, ge.g_q * dt + ge.g_v)
    assert np.allclose(ge.gbar, ge.g - ge.g_v @ v)
    # g is linear in v, so the offset vanishes
    assert np.allclose(ge.gbar, 0, atol=1e-14)


def test_growth_rate_is_gap_derivative(rng):
    m = make_model(6)
    q = random_configuration(m, rng)
    v = rng.normal(0, 0.1, 3 * m.n)
    h = 1e-6
    fd = (prismatic_gaps(m, q + h * v) - prismatic_gaps(m, q - h * v)) / (2 * h)
    assert np.allclose(growth_eval(m, q, v, 0.01).g, fd, atol=1e-8)


@given(seed=st.integers(0, 2**32 - 1), angle=st.floats(-math.pi, math.pi), dx=st.floats(-3, 3), dy=st.floats(-3, 3))
def test_growth_rate_rigid_motion_invariant(seed, angle, dx, dy):
    rng = np.random.default_rng(seed)
    m = make_model(5)
    q = random_configuration(m, rng)
    v = rng.normal(0, 0.2, 15)
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    qb, vb = q.reshape(-1, 3).copy(), v.reshape(-1, 3).copy()
    qb[:, :2] = qb[:, :2] @ rot.T + [dx, dy]
    qb[:, 2] += angle
    vb[:, :2] = vb[:, :2] @ rot.T
    g0 = growth_eval(m, q, v, 0.01).g
    g1 = growth_eval(m, qb.ravel(), vb.ravel(), 0.01).g
    assert np.allclose(g0, g1, atol=1e-10)


# ------------------------------------------------------------ spring force


def test_spring_force_straight_at_rest():
    m = make_model(5, stiffness=2.0, damping=1.0)
    q = initial_state(m).q
    assert np.allclose(spring_damper_force(m, q, np.zeros(15)), 0)


def test_spring_force_sign():
    m = make_model(3, stiffness=2.0, damping=0.0)
    q = initial_state(m).q
    q[3 * 2 + 2] = 0.1  # interior pin between bodies 1 and 2 bent by 0.1 rad
    F = spring_damper_force(m, q, np.zeros(9))
    assert F[3 * 2 + 2] == pytest.approx(-0.2)
    assert F[3 * 1 + 2] == pytest.approx(0.2)
    assert np.allclose(np.delete(F, [5, 8]), 0)


def test_damper_force_sign():
    m = make_model(3, stiffness=0.0, damping=1.0)
    v = np.zeros(9)
    v[3 * 2 + 2] = 0.5
    F = spring_damper_force(m, initial_state(m).q, v)
    assert F[3 * 2 + 2] == pytest.approx(-0.5)
    assert F[3 * 1 + 2] == pytest.approx(0.5)


def test_base_pin_torque_acts_on_first_body_only():
    m = make_model(3, stiffness=1.0)
    F = spring_damper_force(m, initial_state(m, 0.3).q, np.zeros(9))
    assert F[2] == pytest.approx(-0.3)
    assert np.allclose(np.delete(F, 2), 0)


def test_pin_angle_jacobian_matches_finite_differences(rng):
    m = make_model(7)
    for _ in range(10):
        q = random_configuration(m, rng)
        fd = central_difference(lambda x: pin_angles(m, x), q)
        assert relative_error(pin_angle_jacobian(m), fd) <= 1e-6


@given(seed=st.integers(0, 2**32 - 1), omega=st.floats(-3, 3))
def test_interior_springs_do_no_work_on_rigid_rotation(seed, omega):
    rng = np.random.default_rng(seed)
    m = make_model(6, stiffness=[0.0, 0.3, 0.5], damping=[0.0, 0.1, 0.2])
    q = random_configuration(m, rng)
    rel = q.reshape(-1, 3)[:, :2] - m.base_position
    v = np.column_stack([-omega * rel[:, 1], omega * rel[:, 0], np.full(m.n, omega)]).ravel()
    F = spring_damper_force(m, q, v)
    assert abs(F @ v) <= 1e-12


def test_gravity_force_per_body():
    m = make_model(4, total_mass=0.4)
    F = gravity_force(m, Scene(gravity=(0.0, -9.81)))
    assert np.allclose(F.reshape(-1, 3), [[0, -0.981, 0]] * 4)
