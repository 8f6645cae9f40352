import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egoloco.envs import ACTION_SCALE
from egoloco.gait import ScriptedGait
from egoloco.sim import (ALIVE, COLLIDED, CONTROL_HZ, DR_RANGES, FELL, GRAVITY, PHYSICS_HZ,
                         SUBSTEPS, PushSchedule, SimulationFault, TerrainView, WalkerGeometry,
                         WalkerParams, WalkerState, apply_push, check_termination, kinematics,
                         pd_torque, randomize_params, settle, step_control, step_physics)
from egoloco.terrain import Heightfield, generate_terrain

GEOM = WalkerGeometry()
POSE = np.asarray(GEOM.default_pose)


def flat_view(n=1, length=20.0):
    return TerrainView.single(Heightfield(np.zeros(int(length / 0.01)), 0.01), n)


def slope_view(grade, n=1):
    return TerrainView.single(Heightfield(grade * 0.01 * np.arange(1000) - 2.0, 0.01), n)


# -- PD ------------------------------------------------------------------------

def test_pd_zero_error_zero_rate_gives_zero_torque():
    p = WalkerParams.nominal(3)
    q = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(pd_torque(q, q, np.zeros((3, 4)), p), 0.0)


def test_pd_gain_is_forty_per_unit_error_below_clamp():
    p = WalkerParams.nominal(1)
    err = np.array([[0.1, -0.25, 0.5, 0.8]])          # all below the 33.5 clamp
    tau = pd_torque(err, np.zeros((1, 4)), np.zeros((1, 4)), p)
    np.testing.assert_allclose(tau / err, 40.0)


def test_pd_strength_scales_output():
    p = WalkerParams.nominal(1)
    q_des, q, qd = np.array([[0.3, 0.1, -0.2, 0.0]]), np.zeros((1, 4)), np.full((1, 4), 0.4)
    base = pd_torque(q_des, q, qd, p)
    p.motor_strength[:] = 0.9
    np.testing.assert_allclose(pd_torque(q_des, q, qd, p), 0.9 * base)


def test_pd_clamps_before_strength():
    p = WalkerParams.nominal(1)
    p.motor_strength[:] = 1.1
    tau = pd_torque(np.full((1, 4), 10.0), np.zeros((1, 4)), np.zeros((1, 4)), p)
    np.testing.assert_allclose(tau, 1.1 * GEOM.torque_limit)


# -- physics -------------------------------------------------------------------

def test_ballistic_flight():
    view = flat_view()
    s = WalkerState.standing(1, GEOM, x=5.0, ground=3.0)   # far above the ground
    p = WalkerParams.nominal(1)
    v0 = s.vel[0, 1]
    for _ in range(int(0.1 * PHYSICS_HZ)):
        step_physics(s, np.zeros((1, 4)), view, p, GEOM)
    assert s.vel[0, 1] - v0 == pytest.approx(-GRAVITY * 0.1, rel=1e-9)
    assert not s.contact.any()


def test_static_normal_force_matches_weight():
    view = flat_view()
    p = WalkerParams.nominal(1)
    s = settle(WalkerState.standing(1, GEOM, x=3.0), view, p, GEOM, seconds=5.0)
    support = s.foot_force[0, :, 1].sum()
    weight = p.mass(GEOM)[0] * GRAVITY
    assert abs(support - weight) <= 0.02 * weight


def _stand_on_slope(mu, grade=0.4, seconds=3.0):
    """Body level, legs vertical and lengths chosen to reach the slope; returns
    the tangential foot speed of contacting feet per control step."""
    q = (0.0, 0.2, 0.0, 0.36)
    view = slope_view(grade)
    p = WalkerParams.nominal(1)
    p.friction[:] = mu
    s = WalkerState.standing(1, GEOM, x=5.0, ground=0.0, q=q)
    hip, _, d, _, _, ext, _ = kinematics(s, p, GEOM)
    foot = hip + ext[..., None] * d
    s.pos[:, 1] += (view.height(foot[..., 0]) - foot[..., 1]).max() + 1e-3
    t_hat = np.array([1.0, grade]) / np.hypot(1.0, grade)
    speeds = []
    for _ in range(int(seconds * CONTROL_HZ)):
        step_control(s, np.array([q]), view, p, GEOM)
        vt = np.abs(s.foot_vel[0] @ t_hat)
        speeds.append(np.where(s.contact[0], vt, np.nan))
    return np.array(speeds)


def test_low_friction_slips_on_slope_high_friction_holds():
    settled = slice(2 * CONTROL_HZ, None)
    low = _stand_on_slope(0.3)[settled]
    high = _stand_on_slope(1.25)[settled]
    assert np.nanmin(low) > 0.01
    assert np.nanmax(high) <= 0.01


def test_substep_count_is_eight():
    assert PHYSICS_HZ // CONTROL_HZ == SUBSTEPS == 8
    s = WalkerState.standing(2, GEOM)
    step_control(s, np.tile(POSE, (2, 1)), flat_view(2), WalkerParams.nominal(2), GEOM)
    np.testing.assert_allclose(s.t, 8 / PHYSICS_HZ)


def test_equilibrium_is_a_fixed_point():
    view = flat_view()
    p = WalkerParams.nominal(1)
    s = settle(WalkerState.standing(1, GEOM, x=3.0), view, p, GEOM, seconds=10.0)
    before = s.copy()
    step_control(s, np.tile(POSE, (1, 1)), view, p, GEOM)
    for name in ("pos", "pitch", "vel", "omega", "q", "qd"):
        np.testing.assert_allclose(getattr(s, name), getattr(before, name), atol=1e-6)


def test_scripted_gait_moves_forward():
    view = flat_view()
    p = WalkerParams.nominal(1)
    s = settle(WalkerState.standing(1, GEOM, x=2.0), view, p, GEOM, seconds=0.5)
    gait = ScriptedGait()
    h = gait.initial_state(1)
    xs = []
    for _ in range(2 * CONTROL_HZ):
        a, h = gait.act(None, h)
        step_control(s, POSE + ACTION_SCALE * a, view, p, GEOM)
        xs.append(s.pos[0, 0])
    # sampled once per gait cycle the body advances every time
    per_cycle = np.array(xs)[:: int(CONTROL_HZ / gait.freq)]
    assert np.all(np.diff(per_cycle) > 0)
    assert xs[-1] > xs[0] + 0.3


@given(st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_contact_forces_respect_cone_and_sign(seed):
    rng = np.random.default_rng(seed)
    n = 8
    view = flat_view(n)
    p = randomize_params(rng=rng, n=n)
    s = WalkerState.standing(n, GEOM, x=3.0)
    for _ in range(30):
        q_des = POSE + ACTION_SCALE * rng.normal(0, 0.5, size=(n, 4))
        q_des = np.clip(q_des, GEOM.joint_low, GEOM.joint_high)
        for _ in range(SUBSTEPS):
            tau = pd_torque(q_des, s.q, s.qd, p)
            step_physics(s, tau, view, p, GEOM, check=False)
            fz = s.foot_force[..., 1]
            fx = s.foot_force[..., 0]
            assert np.all(fz >= 0.0)
            assert np.all(np.abs(fx) <= p.friction[:, None] * fz + 1e-9)
            assert np.all(s.segment_force >= 0.0)


def test_trajectories_are_deterministic():
    def run():
        rng = np.random.default_rng(42)
        view = TerrainView.single(generate_terrain("stairs_up", 0.3, 1), 4)
        p = randomize_params(seed=3, n=4)
        s = WalkerState.standing(4, GEOM)
        for _ in range(50):
            step_control(s, POSE + ACTION_SCALE * rng.normal(size=(4, 4)), view, p, GEOM,
                         check=False)
        return s
    a, b = run(), run()
    for f in dataclasses.fields(a):
        np.testing.assert_array_equal(getattr(a, f.name), getattr(b, f.name))


def test_nonfinite_state_raises():
    s = WalkerState.standing(1, GEOM)
    s.vel[:] = np.nan
    with pytest.raises(SimulationFault):
        step_physics(s, np.zeros((1, 4)), flat_view(), WalkerParams.nominal(1), GEOM)


def test_nonpositive_timestep_rejected():
    with pytest.raises(ValueError):
        step_physics(WalkerState.standing(1, GEOM), np.zeros((1, 4)), flat_view(),
                     WalkerParams.nominal(1), GEOM, dt=0.0)


# -- termination ------------------------------------------------------------------

def test_pitch_beyond_ninety_degrees_is_a_fall():
    s = WalkerState.standing(1, GEOM, x=3.0, ground=-2.0)
    s.pitch[:] = np.deg2rad(91)
    assert check_termination(s, flat_view(), WalkerParams.nominal(1), GEOM)[0] == FELL


def test_level_body_clear_of_ground_is_alive():
    s = WalkerState.standing(1, GEOM, x=3.0)
    assert check_termination(s, flat_view(), WalkerParams.nominal(1), GEOM)[0] == ALIVE


def test_body_inside_obstacle_face_collides():
    hf = generate_terrain("stairs_up", 1.0, 0)
    view = TerrainView.single(hf, 1)
    riser = hf.xs[np.flatnonzero(np.diff(hf.samples) > 0)[0] + 1]
    s = WalkerState.standing(1, GEOM, x=riser - 0.05, ground=0.0)
    s.pos[:, 1] = 0.2            # body centre below the 0.25 m tread ahead of it
    assert view.height(s.pos[:, 0] + 0.1)[0] > s.pos[0, 1]
    assert check_termination(s, view, WalkerParams.nominal(1), GEOM)[0] == COLLIDED


# -- pushes ----------------------------------------------------------------------

def test_push_at_fifteen_seconds_changes_speed_by_point_three():
    s = WalkerState.standing(1, GEOM)
    sched = PushSchedule()
    sched.reset(1)
    s.t[:] = 14.99
    v0 = s.vel.copy()
    _, due = apply_push(s, sched, np.random.default_rng(0))
    assert not due.any()
    np.testing.assert_array_equal(s.vel, v0)
    s.t[:] = 15.0
    _, due = apply_push(s, sched, np.random.default_rng(0))
    assert due.all()
    assert abs(s.vel[0, 0] - v0[0, 0]) == pytest.approx(0.3)
    assert s.vel[0, 1] == v0[0, 1]


def test_two_pushes_in_thirty_seconds():
    s = WalkerState.standing(3, GEOM)
    sched = PushSchedule()
    sched.reset(3)
    rng = np.random.default_rng(1)
    for k in range(1, 30 * CONTROL_HZ + 1):
        s.t[:] = k / CONTROL_HZ
        apply_push(s, sched, rng)
    np.testing.assert_array_equal(sched.count, 2)


def test_push_interval_must_be_positive():
    with pytest.raises(ValueError):
        PushSchedule(interval=0.0)


# -- randomization --------------------------------------------------------------

def test_randomized_params_stay_in_ranges():
    p = randomize_params(seed=0, n=10_000)
    for name, (lo, hi) in DR_RANGES.items():
        v = getattr(p, name)
        assert lo <= v.min() and v.max() <= hi


def test_randomization_is_seeded():
    a, b = randomize_params(seed=9, n=50), randomize_params(seed=9, n=50)
    for f in dataclasses.fields(a):
        np.testing.assert_array_equal(getattr(a, f.name), getattr(b, f.name))


def test_kp_mean_is_forty():
    kp = randomize_params(seed=1, n=10_000).kp
    assert kp.mean() == pytest.approx(40.0, rel=0.01)


def test_param_validation():
    p = WalkerParams.nominal(2)
    p.friction[0] = 0.0
    with pytest.raises(ValueError):
        p.validate()
