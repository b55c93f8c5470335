import numpy as np
import pytest
from dataclasses import replace

from orbitarm import dynamics as dyn, geometry as geo
from orbitarm.errors import NonFiniteState

from .conftest import random_state
from .fk_oracle import ee_transform


def _zero_cmd(batch=()):
    return dyn.CommandInput(np.zeros(batch + (6,)), np.zeros(batch + (3,)))


def test_model_file_matches_table_values(model):
    assert model.base.mass == 100.0
    np.testing.assert_array_equal(np.diag(model.base.inertia), [41.6, 52.9, 52.9])
    np.testing.assert_array_equal(model.mount.translation, [0, -0.4, 0.6])
    np.testing.assert_allclose(model.q_limits, [2 * np.pi] * 3 + [np.pi] * 3)
    np.testing.assert_array_equal(model.qdot_limits, [2.0] * 6)
    assert model.torque_limit == 0.1
    assert len(model.checksum) == 64


def test_missing_model_file_is_config_error(tmp_path):
    from orbitarm.errors import ConfigError
    with pytest.raises(ConfigError):
        dyn.load_model(tmp_path / "nope.yaml")


def test_fk_matches_oracle_at_zero(model):
    s = dyn.rest_state(model, q=np.zeros(6))
    T = ee_transform(np.zeros(6))
    ee = dyn.forward_kinematics(model, s).ee
    assert np.max(np.abs(ee.translation - T[:3, 3])) < 1e-9
    assert geo.geodesic_angle(ee.rotation, T[:3, :3]) < 1e-7


def test_fk_matches_oracle_random(model, rng):
    for _ in range(50):
        s = random_state(model, rng)
        T = ee_transform(s.q, s.base_attitude, s.base_position)
        ee = dyn.forward_kinematics(model, s).ee
        assert np.max(np.abs(ee.translation - T[:3, 3])) < 1e-9
        assert np.max(np.abs(ee.rotation - T[:3, :3])) < 1e-9


def test_fk_rigid_base_rotation(model, rng):
    s = random_state(model, rng)
    Q = geo.random_rotation(rng)
    att = geo.matrix_to_quat(Q @ s.rotation)
    s2 = replace(s, base_attitude=att)
    p = dyn.forward_kinematics(model, s).ee.translation
    p2 = dyn.forward_kinematics(model, s2).ee.translation
    expected = Q @ (p - s.base_position) + s.base_position
    np.testing.assert_allclose(p2, expected, atol=1e-12)


def test_batched_fk_equals_unbatched(model, rng):
    s = random_state(model, rng, batch=5)
    batch = dyn.forward_kinematics(model, s)
    for i in range(5):
        single = dyn.forward_kinematics(model, s.take(i))
        np.testing.assert_allclose(batch.ee.translation[i], single.ee.translation, atol=1e-15)
        np.testing.assert_allclose(batch.com[i], single.com, atol=1e-15)


def _ee_twist_fd(model, state, d_omega, d_qdot, h=1e-6):
    def pose(s):
        att = geo.integrate_quat(state.base_attitude, d_omega, s)
        return dyn.ee_pose(model, replace(state, base_attitude=att, q=state.q + s * d_qdot))
    plus, minus = pose(h), pose(-h)
    v = (plus.translation - minus.translation) / (2 * h)
    dR = (plus.rotation - minus.rotation) / (2 * h)
    W = dR @ dyn.ee_pose(model, state).rotation.T
    w = np.array([W[2, 1] - W[1, 2], W[0, 2] - W[2, 0], W[1, 0] - W[0, 1]]) / 2
    return np.concatenate([v, w])


def test_jacobians_match_finite_differences(model, rng):
    worst = 0.0
    for _ in range(100):
        s = random_state(model, rng)
        J_b, J_m = dyn.jacobians(model, s)
        J = np.hstack([J_b, J_m])
        J_fd = np.zeros((6, 9))
        for k in range(9):
            e = np.zeros(9)
            e[k] = 1.0
            J_fd[:, k] = _ee_twist_fd(model, s, e[:3], e[3:])
        worst = max(worst, np.max(np.abs(J - J_fd)) / max(1.0, np.max(np.abs(J_fd))))
    assert worst < 1e-5


def test_jacobian_rigid_rotation_case(model, rng):
    s = replace(random_state(model, rng), qdot=np.zeros(6))
    J_b, J_m = dyn.jacobians(model, s)
    w = np.array([0, 0, 1.0])
    twist = J_b @ w
    p_ee = dyn.ee_pose(model, s).translation
    np.testing.assert_allclose(twist[3:], w)
    np.testing.assert_allclose(twist[:3], np.cross(w, p_ee - s.base_position), atol=1e-14)
    np.testing.assert_array_equal(J_b @ np.zeros(3) + J_m @ np.zeros(6), np.zeros(6))


def test_momentum_decomposition_agrees_with_direct_sum(model, rng):
    s = random_state(model, rng, batch=200)
    H_ab = dyn.angular_momentum(model, s)
    H_direct = dyn.angular_momentum_direct(model, s)
    rel = np.linalg.norm(H_ab - H_direct, axis=-1) / np.linalg.norm(H_direct, axis=-1)
    assert rel.max() < 1e-10


def test_A_is_spd_and_locked_case(model, rng):
    s = replace(random_state(model, rng), qdot=np.zeros(6))
    terms = dyn.momentum_decomposition(model, s)
    np.testing.assert_allclose(terms.A, terms.A.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(terms.A) > 0)
    np.testing.assert_allclose(dyn.angular_momentum(model, s), terms.A @ s.base_omega, atol=1e-14)
    at_rest = replace(s, base_omega=np.zeros(3))
    np.testing.assert_array_equal(dyn.angular_momentum(model, at_rest), np.zeros(3))


def test_linear_momentum_map(model, rng):
    s = random_state(model, rng)
    terms = dyn.momentum_decomposition(model, s)
    v_b = rng.standard_normal(3)
    P = model.total_mass * v_b + terms.lin_omega @ s.base_omega + terms.lin_qdot @ s.qdot
    np.testing.assert_allclose(P, dyn.linear_momentum_direct(model, s, v_b), atol=1e-12)


def test_free_float_conserves_momentum(model, rng):
    s = replace(random_state(model, rng, batch=10, omega_scale=0.01),
                q=np.broadcast_to(model.home_q, (10, 6)).copy())
    H0 = dyn.angular_momentum_direct(model, s)
    c0 = dyn.forward_kinematics(model, s).com
    for _ in range(50):
        cmd = dyn.CommandInput(rng.uniform(-2, 2, (10, 6)), np.zeros((10, 3)))
        s = dyn.step(model, s, cmd, dt=0.1, substeps=100)
    assert np.max(np.abs(dyn.angular_momentum_direct(model, s) - H0)) <= 1e-8
    assert np.max(np.abs(dyn.forward_kinematics(model, s).com - c0)) <= 1e-12


def test_equilibrium_state_is_constant(model):
    s = dyn.rest_state(model)
    out = s
    for _ in range(20):
        out = dyn.step(model, out, _zero_cmd(), dt=0.1, substeps=10)
    np.testing.assert_array_equal(out.q, s.q)
    np.testing.assert_array_equal(out.base_omega, np.zeros(3))
    np.testing.assert_array_equal(out.base_attitude, s.base_attitude)
    np.testing.assert_allclose(out.base_position, s.base_position, atol=1e-15)
    assert out.t == 20


def test_constant_torque_spin_up(model):
    s = dyn.rest_state(model, q=np.zeros(6))
    A0 = dyn.momentum_decomposition(model, s).A
    tau = np.array([0.1, 0.0, 0.0])
    for k in range(1, 11):
        s = dyn.step(model, s, dyn.CommandInput(np.zeros(6), tau), dt=0.1, substeps=10)
        expected = np.linalg.solve(A0, tau) * (0.1 * k)
        assert np.max(np.abs(s.base_omega - expected)) < 1e-6


def test_command_clipping(model):
    s = dyn.rest_state(model)
    out = dyn.step(model, s, dyn.CommandInput(np.full(6, 5.0), np.zeros(3)), dt=0.1, substeps=10)
    np.testing.assert_allclose(out.qdot, 2.0)
    # linear ramp 0 -> 2 over 0.1 s moves each joint 0.1 rad
    np.testing.assert_allclose(out.q - s.q, 0.1, atol=1e-12)


def test_joint_limit_clamps_and_zeroes_rate(model):
    q = model.home_q.copy()
    q[3] = np.pi - 0.01
    s = dyn.rest_state(model, q=q)
    out = dyn.step(model, s, dyn.CommandInput(np.array([0, 0, 0, 2.0, 0, 0]), np.zeros(3)))
    assert out.q[3] == pytest.approx(np.pi)
    assert out.qdot[3] == 0.0


def test_step_is_deterministic(model, rng):
    s = random_state(model, rng, batch=4)
    cmd = dyn.CommandInput(rng.uniform(-2, 2, (4, 6)), rng.uniform(-0.1, 0.1, (4, 3)))
    a = dyn.step(model, s, cmd)
    b = dyn.step(model, s, cmd)
    for f in ("base_attitude", "base_omega", "base_position", "q", "qdot"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_non_finite_state_raises(model):
    s = replace(dyn.rest_state(model), base_omega=np.array([np.nan, 0, 0]))
    with pytest.raises(NonFiniteState):
        dyn.step(model, s, _zero_cmd())


def test_attitude_convergence_order(model, rng):
    s0 = replace(dyn.rest_state(model), base_omega=np.array([0.02, -0.01, 0.03]))
    cmds = [dyn.CommandInput(rng.uniform(-2, 2, 6), rng.uniform(-0.1, 0.1, 3)) for _ in range(10)]

    def run(n):
        s = s0
        for c in cmds:
            s = dyn.step(model, s, c, dt=0.1, substeps=n)
        return s.rotation

    ref = run(1600)
    errs = [geo.geodesic_angle(run(n), ref) for n in (2, 4, 8)]
    assert errs[0] / errs[1] >= 1.9
    assert errs[1] / errs[2] >= 1.9


def test_reaction_probe_static_and_single_joint(model, rng):
    s = dyn.rest_state(model)
    np.testing.assert_allclose(dyn.reaction_torque_probe(model, s, np.zeros(6)), 0, atol=1e-12)
    qdd = np.zeros(6)
    qdd[1] = 3.0
    B = dyn.momentum_decomposition(model, s).B
    np.testing.assert_allclose(dyn.reaction_torque_probe(model, s, qdd), -B[:, 1] * 3.0, atol=1e-4)


def test_reaction_probe_matches_base_acceleration(model, rng):
    # free float: A dw/dt equals the probe; dw/dt by differencing two short steps
    s = replace(dyn.rest_state(model), qdot=rng.uniform(-1, 1, 6))
    qdd = rng.uniform(-3, 3, 6)
    h = 1e-5
    cmd = dyn.CommandInput(s.qdot + qdd * h, np.zeros(3))
    nxt = dyn.step(model, s, cmd, dt=h, substeps=4)
    w_dot = (nxt.base_omega - s.base_omega) / h
    A = dyn.momentum_decomposition(model, s).A
    np.testing.assert_allclose(dyn.reaction_torque_probe(model, s, qdd), A @ w_dot, atol=1e-4)


def test_reaction_probe_integrates_to_arm_momentum_change(model, rng):
    # with the base started at rest and tau = 0, the integral of A dw/dt over
    # a motion equals the momentum handed from the arm to the base
    s = dyn.rest_state(model)
    h = 0.002
    total = np.zeros(3)
    qdd = rng.uniform(-2, 2, 6)
    for _ in range(100):
        total += h * dyn.reaction_torque_probe(model, s, qdd)
        s = dyn.step(model, s, dyn.CommandInput(s.qdot + qdd * h, np.zeros(3)), dt=h, substeps=2)
    terms = dyn.momentum_decomposition(model, s)
    base_part = terms.A @ s.base_omega
    np.testing.assert_allclose(total, base_part, atol=2e-3 * np.abs(base_part).max())
