from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_model, random_configuration
from vinesim.constraints import contact_eval, joint_constraint
from vinesim.environment import Circle, HalfPlane, Scene
from vinesim.io import load_scene
from vinesim.model import RobotState, initial_state, prismatic_gaps
from vinesim.scenes import builtin_scene_path
from vinesim.stepper import (
    SimConfig,
    SimulationError,
    Stepper,
    assemble_qp,
    impulse_balance_residual,
    simulate,
    solve_qp,
    step,
)

FLAT = Scene(gravity=(0.0, 0.0))


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(qp_eps_abs=0.0)
    with pytest.raises(ValueError):
        SimConfig(spring_treatment="magic")


def test_cost_without_joint_rows_is_free_body_update():
    m = make_model(3, total_mass=0.3)
    state = initial_state(m)
    prob = assemble_qp(m, Scene(gravity=(0.0, -9.81)), state, np.zeros(1), SimConfig(dt=0.01))
    # minimizer of the quadratic cost alone
    v_free = np.linalg.solve(prob.program.P.toarray(), -prob.program.q)
    assert np.allclose(v_free.reshape(-1, 3), [[0, -0.0981, 0]] * 3)


def test_assemble_dimensions_and_rows():
    m = make_model(5)
    prob = assemble_qp(m, FLAT, initial_state(m), np.full(2, 0.01))
    assert prob.program.shape == (2 * 5 + 2, 15)
    assert prob.joint_rows == 10 and prob.growth_rows == 2
    with pytest.raises(ValueError):
        assemble_qp(m, FLAT, initial_state(m), np.zeros(3))


def test_touching_contact_row_present():
    m = make_model(4, length=0.4)
    state = initial_state(m, 0.0, 0.0)
    tip = 0.4
    scene = Scene((Circle((tip + 0.05, 0.0), 0.05),), (0.0, 0.0))
    prob = assemble_qp(m, scene, state, np.full(2, 0.05))
    tip_site = len(m.contact_sites) - 1
    row = prob.pairs.index((tip_site, 0))
    assert prob.phi[row] == pytest.approx(0.0, abs=1e-12)


def test_equality_only_step_matches_dense_kkt():
    m = make_model(4, stiffness=0.1, damping=0.01)
    rng = np.random.default_rng(3)
    q = random_configuration(m, rng)
    state = RobotState(q, rng.normal(0, 0.05, 12))
    prob = assemble_qp(m, FLAT, state, np.full(2, 0.02))
    sol = solve_qp(prob)
    P = prob.program.P.toarray()
    A = prob.program.A.toarray()
    k = len(A)
    K = np.block([[P, A.T], [A, np.zeros((k, k))]])
    ref = np.linalg.solve(K, np.concatenate([-prob.program.q, prob.program.l]))
    assert np.allclose(sol.v_next, ref[:12], atol=1e-8)
    assert np.allclose(np.concatenate([sol.lam, sol.w]), -ref[12:], atol=1e-8)


def test_rest_state_is_equilibrium():
    m = make_model(6, stiffness=0.2, damping=0.05)
    s0 = initial_state(m, 0.0, 0.01)
    s1, sol = step(m, FLAT, s0, np.zeros(3))
    assert np.allclose(s1.q, s0.q, atol=1e-12) and np.allclose(s1.v, 0, atol=1e-12)
    assert s1.time == pytest.approx(0.01)


def test_single_joint_growth_step():
    m = make_model(4)
    s0 = initial_state(m, 0.0, 0.0)
    u = np.array([0.0, 0.1])
    s1, _ = step(m, FLAT, s0, u, SimConfig(dt=0.01))
    gaps = prismatic_gaps(m, s1.q)
    assert gaps[1] == pytest.approx(0.001, abs=1e-6)
    assert gaps[0] == pytest.approx(0.0, abs=1e-6)


def test_impulse_balance_with_contact():
    setup = load_scene(builtin_scene_path("wall"))
    stepper = Stepper(setup.model, setup.scene, setup.config)
    state = setup.state0
    worst, contact_steps = 0.0, 0
    for k in range(60):
        state, sol = stepper.step(state, setup.schedule(k, state), k)
        worst = max(worst, np.max(np.abs(impulse_balance_residual(sol.problem, sol))))
        contact_steps += bool(np.any(sol.n > 1e-9))
    assert contact_steps > 0
    assert worst <= 1e-7


def test_explicit_spring_treatment_runs():
    m = make_model(6, stiffness=0.01, damping=0.001)
    cfg = SimConfig(dt=0.005, spring_treatment="explicit")
    s0 = initial_state(m, 0.2)
    traj = simulate(m, FLAT, s0, np.zeros((20, 3)), 20, cfg)
    assert np.max(np.abs(joint_constraint(m, traj.q).c)) < 1e-6


def test_simulate_zero_steps():
    m = make_model(4)
    s0 = initial_state(m)
    traj = simulate(m, FLAT, s0, np.zeros((0, 2)), 0)
    assert len(traj) == 1 and np.array_equal(traj.q[0], s0.q)
    assert traj.diagnostics == [] and traj.inputs == []


def test_schedule_too_short():
    m = make_model(4)
    with pytest.raises(ValueError):
        simulate(m, FLAT, initial_state(m), np.zeros((3, 2)), 5)


def test_trajectory_spacing_and_diagnostics():
    setup = load_scene(builtin_scene_path("circle"))
    traj = simulate(setup.model, setup.scene, setup.state0, setup.schedule, 30, setup.config)
    assert len(traj) == 31 and len(traj.inputs) == 30 and len(traj.diagnostics) == 30
    assert np.allclose(np.diff(traj.times), setup.config.dt)
    assert all(d.status == "solved" and d.iterations > 0 for d in traj.diagnostics)


def test_determinism_bit_identical():
    setup = load_scene(builtin_scene_path("wall"))
    runs = [simulate(setup.model, setup.scene, setup.state0, setup.schedule, 50, setup.config) for _ in range(2)]
    assert np.array_equal(runs[0].q, runs[1].q) and np.array_equal(runs[0].v, runs[1].v)


def test_warm_start_does_not_change_result():
    setup = load_scene(builtin_scene_path("wall"))
    warm = simulate(setup.model, setup.scene, setup.state0, setup.schedule, 50, setup.config)
    cold_cfg = replace(setup.config, warm_start=False)
    cold = simulate(setup.model, setup.scene, setup.state0, setup.schedule, 50, cold_cfg)
    assert np.allclose(warm.q, cold.q, atol=1e-7)


def trapped_setup():
    # two bodies growing straight into a wall that faces them squarely
    m = make_model(2, length=0.2)
    scene = Scene((HalfPlane((0.2, 0.0), (-1.0, 0.0)),), (0.0, 0.0))
    return m, scene, initial_state(m, 0.0, 0.0)


def test_growth_into_wall_is_infeasible():
    m, scene, s0 = trapped_setup()
    with pytest.raises(SimulationError) as info:
        simulate(m, scene, s0, np.full((5, 1), 0.1), 5)
    assert info.value.step_index == 0
    assert len(info.value.partial) == 1
    assert "infeasible" in str(info.value)


def test_soften_growth_resolves_trapped_growth():
    m, scene, s0 = trapped_setup()
    traj = simulate(m, scene, s0, np.full((5, 1), 0.1), 5, SimConfig(soften_growth=True))
    phi = contact_eval(m, scene, traj.q).phi
    assert phi.min() >= -1e-6


def test_pruned_pairs_rechecked():
    # with no broad-phase margin every contact row comes from the post-step re-check
    setup = load_scene(builtin_scene_path("circle"))
    cfg = replace(setup.config, broad_phase_margin=0.0)
    traj = simulate(setup.model, setup.scene, setup.state0, setup.schedule, 200, cfg)
    assert contact_eval(setup.model, setup.scene, traj.q).phi.min() >= -1e-4
    assert any(len(d.pairs) for d in traj.diagnostics)


@settings(max_examples=25)
@given(seed=st.integers(0, 2**32 - 1), rate=st.floats(0.0, 0.1))
def test_random_steps_keep_constraints(seed, rate):
    rng = np.random.default_rng(seed)
    m = make_model(5, stiffness=0.05, damping=0.01)
    q = random_configuration(m, rng)
    state = RobotState(q, np.zeros_like(q))
    stepper = Stepper(m, FLAT, SimConfig())
    for k in range(5):
        state, sol = stepper.step(state, np.full(2, rate), k)
        assert np.max(np.abs(impulse_balance_residual(sol.problem, sol))) <= 1e-7
    # first-order constraint linearization: drift is O(dt^2) per step
    assert np.max(np.abs(joint_constraint(m, state.q).c)) <= 1e-4
