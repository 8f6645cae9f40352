import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egoloco.observe import (HOLE, N_CROP, N_DEPTH, N_RAYS, N_SCANDOTS, PROPRIO_DIM,
                             SCANDOT_OFFSETS, Camera, ElevationCorruptor, ElevationNoise,
                             LatencyBuffer, LatencyModel, NoiseEntry, ObservationError,
                             ScanLog, apply_noise, apply_obs_noise, cast_rays,
                             corrupt_elevation, default_noise_table, fill_holes,
                             preprocess_depth, proprio, scandots, split_proprio,
                             without_noise)
from egoloco.sim import (CONTROL_HZ, SUBSTEPS, TerrainView, WalkerGeometry, WalkerParams,
                         WalkerState, pd_torque, step_physics)
from egoloco.terrain import PIT_DEPTH, Heightfield

GEOM = WalkerGeometry()
DX = 0.01


def view(samples, n=1, x0=0.0):
    return TerrainView.single(Heightfield(np.asarray(samples, dtype=float), DX, x0=x0), n)


def flat(n=1, length=20.0, height=0.0):
    return view(np.full(int(length / DX), height), n)


def at(x, z, n=1):
    s = WalkerState.standing(n, x=x)
    s.pos[:, 1] = z
    return s


# -- proprioception --------------------------------------------------------------

def test_proprio_at_rest_reports_pose_and_zero_rates():
    s = WalkerState.standing(2)
    x = proprio(s, np.zeros((2, 4)))
    assert x.shape == (2, PROPRIO_DIM)
    parts = split_proprio(x)
    np.testing.assert_array_equal(parts["q"], np.tile(GEOM.default_pose, (2, 1)))
    np.testing.assert_array_equal(parts["qd"], 0.0)
    assert np.all(parts["omega"] == 0.0) and np.all(parts["pitch"] == 0.0)


def test_joint_rates_match_finite_difference_of_angles():
    s = WalkerState.standing(1)
    tv, p = flat(), WalkerParams.nominal(1)
    q_des = np.asarray(GEOM.default_pose) + np.array([0.2, -0.02, -0.15, 0.02])
    dt = 1.0 / (CONTROL_HZ * SUBSTEPS)
    for _ in range(5):
        q0 = s.q.copy()
        step_physics(s, pd_torque(q_des, s.q, s.qd, p, GEOM.torque_limit), tv, p, GEOM, dt=dt)
        fd = (s.q - q0) / dt
        np.testing.assert_allclose(fd, s.qd, atol=1e-9)


def test_split_proprio_round_trip_and_width_check():
    x = np.arange(3 * PROPRIO_DIM, dtype=float).reshape(3, PROPRIO_DIM)
    parts = split_proprio(x)
    back = np.concatenate([parts["q"], parts["qd"], parts["omega"][:, None],
                           parts["pitch"][:, None], parts["last_action"]], axis=1)
    np.testing.assert_array_equal(back, x)
    with pytest.raises(ObservationError):
        split_proprio(np.zeros((1, PROPRIO_DIM + 1)))


# -- scandots --------------------------------------------------------------------

def test_scandots_flat_ground_below_body():
    m, oob = scandots(at(5.0, 0.3), flat())
    assert m.shape == (1, N_SCANDOTS)
    np.testing.assert_allclose(m, -0.3, atol=1e-12)
    assert not oob.any()


def test_scandots_straddling_a_step():
    samples = np.where(np.arange(2000) * DX >= 5.0, 0.2, 0.0)
    m, _ = scandots(at(5.0, 0.3), view(samples))
    front, rear = m[0, SCANDOT_OFFSETS > 0.05], m[0, SCANDOT_OFFSETS < -0.05]
    np.testing.assert_allclose(front.min() - rear.max(), 0.2, atol=1e-12)
    np.testing.assert_allclose(front.max() - rear.min(), 0.2, atol=1e-12)


@given(shift=st.integers(0, 200), lift=st.floats(-1.0, 1.0))
@settings(max_examples=30, deadline=None)
def test_scandots_translation_invariant(shift, lift):
    rng = np.random.default_rng(3)
    samples = np.cumsum(rng.normal(0, 0.01, 1500))
    base = scandots(at(6.0, 0.4), view(samples))[0]
    dx = shift * DX
    moved = scandots(at(6.0 + dx, 0.4 + lift), view(samples + lift, x0=dx))[0]
    np.testing.assert_allclose(moved, base, atol=1e-9)


def test_scandots_flags_queries_off_the_field():
    _, oob = scandots(at(0.1, 0.3), flat(length=5.0))
    assert oob[0, SCANDOT_OFFSETS < -0.1].all()
    assert not oob[0, SCANDOT_OFFSETS > 0].any()


# -- raycasting ------------------------------------------------------------------

CAM = Camera()


def test_ray_straight_down():
    d = cast_rays(np.array([[5.0, 0.3]]), np.array([[-np.pi / 2]]), flat(), CAM)
    assert abs(d[0, 0] - 0.3) <= CAM.tolerance


@pytest.mark.parametrize("phi", [0.2, 0.45, 0.9, 1.3])
def test_angled_ray_hits_at_h_over_sin(phi):
    h = 0.3
    d = cast_rays(np.array([[5.0, h]]), np.array([[-phi]]), flat(), CAM)
    expect = h / np.sin(phi)
    if expect > CAM.max_range:
        assert d[0, 0] == HOLE
    else:
        assert abs(d[0, 0] - expect) <= CAM.tolerance


def test_ray_over_pit_reaches_the_floor():
    samples = np.zeros(1000)
    samples[450:560] = PIT_DEPTH
    d = cast_rays(np.array([[5.0, 0.3]]), np.array([[-np.pi / 2]]), view(samples), CAM)
    assert abs(d[0, 0] - (0.3 - PIT_DEPTH)) <= CAM.tolerance


def test_ray_parallel_to_ground_is_a_hole():
    d = cast_rays(np.array([[5.0, 0.3]]), np.array([[0.0, 0.3]]), flat(), CAM)
    np.testing.assert_array_equal(d, HOLE)


# -- depth preprocessing ---------------------------------------------------------

def test_constant_scan_preprocesses_to_constant():
    out, flags = preprocess_depth(np.full((2, N_RAYS), 1.7))
    assert out.shape == (2, N_DEPTH)
    np.testing.assert_allclose(out, 1.7)
    assert not flags.any()


def test_single_hole_between_equal_neighbours():
    raw = np.ones((1, 10))
    raw[0, 4] = HOLE
    np.testing.assert_array_equal(fill_holes(raw)[0], 1.0)


def test_hole_run_split_between_neighbours():
    filled, _ = fill_holes(np.array([[2.0, HOLE, HOLE, 4.0]]))
    np.testing.assert_array_equal(filled, [[2.0, 2.0, 4.0, 4.0]])


def test_crop_drops_the_leading_rays():
    raw = np.full((1, N_RAYS), 1.0)
    raw[0, :N_CROP] = 9.0
    np.testing.assert_allclose(preprocess_depth(raw)[0], 1.0)


def test_all_hole_scan_reuses_previous():
    prev = np.linspace(1, 2, N_DEPTH)[None]
    out, flags = preprocess_depth(np.full((1, N_RAYS), HOLE), previous=prev)
    assert flags[0]
    np.testing.assert_array_equal(out, prev)


def test_preprocess_rejects_wrong_width():
    with pytest.raises(ObservationError):
        preprocess_depth(np.ones((1, N_RAYS - 1)))


scan_values = st.lists(st.one_of(st.just(HOLE), st.floats(0.05, 3.0)), min_size=2, max_size=60)


@given(scan_values)
@settings(max_examples=200, deadline=None)
def test_hole_filling_idempotent_and_complete(vals):
    raw = np.array([vals])
    filled, all_hole = fill_holes(raw)
    if all_hole[0]:
        return
    assert not np.any(filled == HOLE)
    np.testing.assert_array_equal(fill_holes(filled)[0], filled)
    # every filled value comes from the scan
    assert set(filled[0]) <= set(raw[0][raw[0] != HOLE])


# -- latency ---------------------------------------------------------------------

class Counter:
    def __init__(self):
        self.k = 0

    def __call__(self, mask):
        self.k += 1
        return np.full((int(mask.sum()), 1), float(self.k))


def run_ticks(buf, n_ticks):
    cap = Counter()
    seen, stamps = [], []
    for t in range(n_ticks):
        d, s = buf.tick(t / CONTROL_HZ, cap)
        seen.append(d[0, 0])
        stamps.append(s[0])
    return np.array(seen), np.array(stamps)


def test_each_scan_is_held_for_five_ticks_at_100ms():
    buf = LatencyBuffer(LatencyModel((0.1, 0.1), (0.0, 0.0)), 1, 1)
    seen, _ = run_ticks(buf, 50)
    _, counts = np.unique(seen, return_counts=True)
    assert np.all(counts == 5) and len(counts) == 10


def test_zero_latency_delivers_on_the_capture_tick():
    buf = LatencyBuffer(LatencyModel((0.1, 0.1), (0.0, 0.0)), 1, 1)
    _, stamps = run_ticks(buf, 12)
    ticks = np.arange(12) / CONTROL_HZ
    np.testing.assert_allclose(stamps[::5], ticks[::5])


def test_thirty_ms_latency_first_visible_at_forty_ms():
    buf = LatencyBuffer(LatencyModel((0.1, 0.1), (0.03, 0.03)), 1, 1)
    seen, _ = run_ticks(buf, 4)
    # tick 0 (0 ms) captures scan 1; 20 ms still shows nothing; 40 ms shows it
    assert seen[0] == 0.0 and seen[1] == 0.0 and seen[2] == 1.0


@given(seed=st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_delivered_stamps_never_go_backwards(seed):
    rng = np.random.default_rng(seed)
    buf = LatencyBuffer(LatencyModel((0.02, 0.12), (0.0, 0.1)), 3, 1, rng=rng)
    last = np.full(3, -np.inf)
    for t in range(150):
        _, stamps = buf.tick(t / CONTROL_HZ, lambda m: np.zeros((int(m.sum()), 1)))
        assert np.all(stamps >= last)
        assert np.all(stamps <= t / CONTROL_HZ + 1e-12)
        last = stamps.copy()


def test_reset_delivers_fresh_scan():
    buf = LatencyBuffer(LatencyModel(), 2, 1)
    run_ticks(buf, 10)
    buf.reset([1], 0.5, np.array([[42.0]]))
    assert buf.delivered[1, 0] == 42.0 and buf.delivered_stamp[1] == 0.5


# -- additive noise --------------------------------------------------------------

def identity_table():
    return {k: NoiseEntry(1.0, 0.0, 0.0) for k in default_noise_table()}


def test_identity_table_leaves_every_group_unchanged():
    rng = np.random.default_rng(0)
    obs = {"proprio": rng.normal(size=(4, PROPRIO_DIM)),
           "scandots": rng.normal(size=(4, N_SCANDOTS))}
    out = apply_obs_noise(obs, identity_table())
    for k in obs:
        np.testing.assert_array_equal(out[k], obs[k])


def test_scandot_scale_five():
    out = apply_obs_noise({"proprio": np.zeros((1, PROPRIO_DIM)),
                           "scandots": np.full((1, N_SCANDOTS), 0.1)},
                          without_noise(default_noise_table()))
    np.testing.assert_allclose(out["scandots"], 0.5)


def test_noise_std_matches_within_two_percent():
    rng = np.random.default_rng(11)
    e = NoiseEntry(1.0, 0.0, 0.05)
    draws = apply_noise(np.zeros(100_000), e, rng)
    assert abs(draws.std() / 0.05 - 1.0) < 0.02


def test_nonzero_noise_needs_generator():
    with pytest.raises(ValueError):
        apply_noise(np.zeros(3), NoiseEntry(1.0, 0.0, 0.1))


def test_missing_group_raises():
    t = identity_table()
    del t["orientation"]
    with pytest.raises(KeyError):
        apply_obs_noise({"proprio": np.zeros((1, PROPRIO_DIM))}, t)


# -- elevation corruption --------------------------------------------------------

def test_zero_corruption_is_identity():
    h = np.random.default_rng(0).normal(size=(5, N_SCANDOTS))
    out = corrupt_elevation(h, ElevationNoise.zero(), np.random.default_rng(1))
    np.testing.assert_array_equal(out, h)


def test_outlier_fraction():
    noise = ElevationNoise(0.0, 0.0, 0.0, 0.02, 0.3, 0.0, 0.0)
    h = np.full(100_000, 7.0)   # outliers are drawn in [-0.3, 0.3], never 7
    out = corrupt_elevation(h, noise, np.random.default_rng(5))
    assert abs(np.mean(out != h) - 0.02) <= 0.002


def test_offset_only_is_constant_within_an_episode():
    noise = ElevationNoise(0.05, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    c = ElevationCorruptor(noise, 3, np.random.default_rng(2))
    h = np.random.default_rng(3).normal(size=(3, N_SCANDOTS))
    diffs = []
    for _ in range(20):
        c.step()
        diffs.append(c.corrupt(h) - h)
    diffs = np.array(diffs)
    np.testing.assert_allclose(diffs, np.broadcast_to(diffs[0], diffs.shape), atol=1e-15)
    np.testing.assert_allclose(diffs[0], diffs[0][:, :1] * np.ones((1, N_SCANDOTS)))
    c.reset([0])
    assert not np.allclose(c.corrupt(h)[0] - h[0], diffs[0][0])


def test_drift_stays_within_limit():
    c = ElevationCorruptor(ElevationNoise(), 8, np.random.default_rng(0))
    for _ in range(500):
        c.step()
        assert np.all(np.abs(c.shift) <= ElevationNoise().drift_limit + 1e-12)


def test_scan_log_csv(tmp_path):
    log = ScanLog()
    log.record(0, np.full(N_RAYS, 1.0), np.full(N_DEPTH, 1.0), 0.0)
    log.record(1, np.full(N_RAYS, 2.0), np.full(N_DEPTH, 2.0), 0.02)
    log.write(tmp_path / "scan.csv")
    lines = (tmp_path / "scan.csv").read_text().splitlines()
    assert len(lines) == 3
    assert len(lines[0].split(",")) == 1 + N_RAYS + N_DEPTH + 1
