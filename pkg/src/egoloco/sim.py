"""Planar two-legged walker over a heightfield, batched across environments.

The body is a rigid slab with pitch.  Each leg is a hinged, telescoping
strut (hip angle, extension) whose joint coordinates carry their own
reflected inertia; leg mass is ignored in the body dynamics, so the body is
driven only by gravity, pushes and contact forces transmitted through the
feet and leg segments.  Contact is a penalty spring-damper along the local
terrain normal with a stick/slip tangential anchor capped by Coulomb's cone.

Joint vector order: ``[hip_front, ext_front, hip_rear, ext_rear]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .terrain import Heightfield, TerrainBank

GRAVITY = 9.81
PHYSICS_HZ = 400
CONTROL_HZ = 50
SUBSTEPS = PHYSICS_HZ // CONTROL_HZ

HIP, EXT = 0, 1
FRONT, REAR = 0, 1

# uniform domain-randomization ranges per parameter
DR_RANGES = {
    "added_mass": (-2.0, 6.0),
    "com_offset": (-0.15, 0.15),
    "friction": (0.3, 1.25),
    "motor_strength": (0.9, 1.1),
    "kp": (35.0, 45.0),
    "kd": (0.4, 0.6),
}


class SimulationFault(RuntimeError):
    """Raised when the integrator produces non-finite state."""


@dataclass(frozen=True)
class WalkerGeometry:
    base_mass: float = 12.0
    body_length: float = 0.5
    body_thickness: float = 0.1
    body_radius: float = 0.05
    hip_x: float = 0.2
    hip_z: float = -0.05
    head_x: float = 0.3
    head_z: float = 0.03
    head_radius: float = 0.05
    hip_limits: tuple = (-1.0, 1.0)
    ext_limits: tuple = (0.12, 0.35)
    default_pose: tuple = (0.0, 0.28, 0.0, 0.28)
    # each planar leg stands in for a left/right pair of real legs
    motors_per_leg: int = 2
    hip_inertia: float = 0.01
    ext_inertia: float = 0.5
    joint_damping: float = 0.05
    # extension effort (N*m-equivalent) to axial force (N)
    ext_lever: float = 0.01
    torque_limit: float = 33.5
    contact_k: float = 5000.0
    contact_c: float = 50.0
    tangent_k: float = 5000.0
    tangent_c: float = 20.0
    segment_fractions: tuple = (0.35, 0.7)

    @property
    def joint_low(self):
        return np.array([self.hip_limits[0], self.ext_limits[0]] * 2)

    @property
    def joint_high(self):
        return np.array([self.hip_limits[1], self.ext_limits[1]] * 2)

    @property
    def joint_inertia(self):
        return np.array([self.hip_inertia, self.ext_inertia] * 2)

    @property
    def effort_to_force(self):
        return self.motors_per_leg * np.array([1.0, 1.0 / self.ext_lever] * 2)


@dataclass
class WalkerParams:
    """Physical parameters per environment; every field is an array of shape (N,)."""

    added_mass: np.ndarray
    com_offset: np.ndarray
    friction: np.ndarray
    motor_strength: np.ndarray
    kp: np.ndarray
    kd: np.ndarray

    @classmethod
    def nominal(cls, n=1):
        return cls(
            added_mass=np.zeros(n),
            com_offset=np.zeros(n),
            friction=np.full(n, 1.0),
            motor_strength=np.ones(n),
            kp=np.full(n, 40.0),
            kd=np.full(n, 0.5),
        )

    def __len__(self):
        return len(self.friction)

    def subset(self, idx):
        return WalkerParams(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def assign(self, idx, other):
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)

    def mass(self, geom):
        return geom.base_mass + self.added_mass

    def validate(self):
        if np.any(self.mass(WalkerGeometry()) <= 0) or np.any(self.friction <= 0):
            raise ValueError("mass and friction must be positive")
        if np.any(self.kp <= 0) or np.any(self.kd <= 0):
            raise ValueError("PD gains must be positive")


def randomize_params(seed=None, n=1, rng=None, ranges=None):
    """Draw ``n`` parameter sets uniformly from the randomization ranges."""
    rng = np.random.default_rng(seed) if rng is None else rng
    ranges = DR_RANGES if ranges is None else ranges
    return WalkerParams(**{k: rng.uniform(lo, hi, size=n) for k, (lo, hi) in ranges.items()})


@dataclass
class WalkerState:
    """Batched walker state; leading axis indexes environments."""

    pos: np.ndarray          # (N, 2) COM x, z
    pitch: np.ndarray        # (N,)
    vel: np.ndarray          # (N, 2)
    omega: np.ndarray        # (N,)
    q: np.ndarray            # (N, 4)
    qd: np.ndarray           # (N, 4)
    t: np.ndarray            # (N,)
    anchor: np.ndarray       # (N, 2) stick point x per foot
    sticking: np.ndarray     # (N, 2) bool, anchor valid
    contact: np.ndarray      # (N, 2) bool
    foot_force: np.ndarray   # (N, 2, 2) world contact force per foot
    foot_vel: np.ndarray     # (N, 2, 2) world foot velocity
    segment_force: np.ndarray  # (N, 2) leg-segment contact force magnitude
    effort: np.ndarray       # (N, 4) generalized joint effort of the last substep

    @classmethod
    def standing(cls, n, geom=None, x=1.0, ground=0.0, q=None):
        geom = WalkerGeometry() if geom is None else geom
        q = np.tile(np.asarray(geom.default_pose if q is None else q, dtype=float), (n, 1))
        x = np.broadcast_to(np.asarray(x, dtype=float), (n,)).copy()
        ground = np.broadcast_to(np.asarray(ground, dtype=float), (n,))
        z = ground + q[:, 1] - geom.hip_z + 0.005
        return cls(
            pos=np.stack([x, z], axis=1),
            pitch=np.zeros(n), vel=np.zeros((n, 2)), omega=np.zeros(n),
            q=q, qd=np.zeros((n, 4)), t=np.zeros(n),
            anchor=np.zeros((n, 2)), sticking=np.zeros((n, 2), dtype=bool),
            contact=np.zeros((n, 2), dtype=bool),
            foot_force=np.zeros((n, 2, 2)), foot_vel=np.zeros((n, 2, 2)),
            segment_force=np.zeros((n, 2)), effort=np.zeros((n, 4)),
        )

    def copy(self):
        return WalkerState(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def subset(self, idx):
        return WalkerState(**{f.name: getattr(self, f.name)[idx].copy() for f in fields(self)})

    def assign(self, idx, other):
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)

    def __len__(self):
        return len(self.pitch)

    def is_finite(self):
        return (np.isfinite(self.pos).all(axis=1) & np.isfinite(self.vel).all(axis=1)
                & np.isfinite(self.pitch) & np.isfinite(self.omega)
                & np.isfinite(self.q).all(axis=1) & np.isfinite(self.qd).all(axis=1))


class TerrainView:
    """Per-environment window onto a :class:`TerrainBank`."""

    def __init__(self, bank, idx):
        if isinstance(bank, Heightfield):
            bank = TerrainBank([bank])
        self.bank = bank
        self.idx = np.asarray(idx)

    @classmethod
    def single(cls, hf, n):
        return cls(TerrainBank([hf]), np.zeros(n, dtype=int))

    def _i(self, shape):
        idx = self.idx
        while idx.ndim < len(shape):
            idx = idx[..., None]
        return np.broadcast_to(idx, shape)

    def height(self, x):
        x = np.asarray(x, dtype=float)
        return self.bank.height(self._i(x.shape), x)

    def height_and_slope(self, x):
        x = np.asarray(x, dtype=float)
        return self.bank.height_and_slope(self._i(x.shape), x)

    def max_height(self, x_lo, x_hi):
        x_lo = np.asarray(x_lo, dtype=float)
        return self.bank.max_height(self._i(x_lo.shape), x_lo, x_hi)

    def subset(self, sel):
        return TerrainView(self.bank, self.idx[sel])


def pd_torque(q_des, q, qd, params, torque_limit=WalkerGeometry.torque_limit):
    """Scaled, clamped PD law: strength * clamp(Kp (q_des - q) - Kd qd, +-limit)."""
    kp = np.asarray(params.kp, dtype=float)[..., None]
    kd = np.asarray(params.kd, dtype=float)[..., None]
    strength = np.asarray(params.motor_strength, dtype=float)[..., None]
    raw = kp * (np.asarray(q_des) - np.asarray(q)) - kd * np.asarray(qd)
    tau = strength * np.clip(raw, -torque_limit, torque_limit)
    return tau.reshape(np.broadcast(np.asarray(q_des), np.asarray(q)).shape)


def _frame(pitch):
    c, s = np.cos(pitch), np.sin(pitch)
    e1 = np.stack([c, s], axis=-1)
    e2 = np.stack([-s, c], axis=-1)
    return e1, e2


def _cross(r, f):
    return r[..., 0] * f[..., 1] - r[..., 1] * f[..., 0]


def _omega_cross(omega, r):
    return np.stack([-omega[..., None] * r[..., 1], omega[..., None] * r[..., 0]], axis=-1) \
        if r.ndim == 3 else np.stack([-omega * r[..., 1], omega * r[..., 0]], axis=-1)


def kinematics(state, params, geom):
    """Hip, foot, leg direction and foot velocity in world frame, each (N, 2, 2)."""
    e1, e2 = _frame(state.pitch)
    c = params.com_offset
    hx = np.stack([geom.hip_x - c, -geom.hip_x - c], axis=1)            # (N, 2)
    hz = np.full_like(hx, geom.hip_z)
    hip_rel = hx[..., None] * e1[:, None, :] + hz[..., None] * e2[:, None, :]
    hip = state.pos[:, None, :] + hip_rel
    q = state.q.reshape(-1, 2, 2)
    qd = state.qd.reshape(-1, 2, 2)
    phi, ext = q[..., HIP], q[..., EXT]
    sp, cp = np.sin(phi)[..., None], np.cos(phi)[..., None]
    d = sp * e1[:, None, :] - cp * e2[:, None, :]
    dd = cp * e1[:, None, :] + sp * e2[:, None, :]
    return hip, hip_rel, d, dd, phi, ext, qd


def body_points(state, params, geom, n=7):
    """World positions of body-axis sample points and the head center."""
    e1, e2 = _frame(state.pitch)
    bx = np.linspace(-geom.body_length / 2, geom.body_length / 2, n)
    rel = bx[None, :, None] - params.com_offset[:, None, None]
    body = state.pos[:, None, :] + rel * e1[:, None, :]
    head_rel = (geom.head_x - params.com_offset)[:, None] * e1 + geom.head_z * e2
    head = state.pos + head_rel
    return body, head


def _contact(points, vel, terrain, k, c, sticking=None, anchor=None, mu=None, kt=None, ct=None):
    """Penalty contact at world ``points`` (..., 2).  Returns force, normal magnitude,
    tangential magnitude, in-contact mask and the updated (sticking, anchor)."""
    h, slope = terrain.height_and_slope(points[..., 0])
    inv = 1.0 / np.sqrt(1.0 + slope * slope)
    n_vec = np.stack([-slope * inv, inv], axis=-1)
    t_vec = np.stack([inv, slope * inv], axis=-1)
    pen = (h - points[..., 1]) * inv
    vn = np.sum(vel * n_vec, axis=-1)
    vt = np.sum(vel * t_vec, axis=-1)
    touching = pen > 0
    fn = np.where(touching, np.maximum(k * pen - c * vn, 0.0), 0.0)
    ft = np.zeros_like(fn)
    if mu is not None:
        new_stick = touching & sticking
        anchor = np.where(new_stick, anchor, points[..., 0])
        stretch = (points[..., 0] - anchor) / inv
        trial = -kt * stretch - ct * vt
        cap = mu * fn
        slipping = np.abs(trial) > cap
        ft = np.clip(trial, -cap, cap)
        # slide the anchor so the spring alone sits on the cone boundary
        slip_anchor = points[..., 0] + np.sign(trial) * (cap / kt) * inv
        anchor = np.where(slipping & touching, slip_anchor, anchor)
        ft = np.where(touching, ft, 0.0)
        sticking = touching
    force = fn[..., None] * n_vec + ft[..., None] * t_vec
    return force, fn, ft, touching, sticking, anchor


def step_physics(state, tau, terrain, params, geom=None, dt=1.0 / PHYSICS_HZ, check=True):
    """Advance one semi-implicit Euler substep under joint torques ``tau`` (N, 4).

    Mutates and returns ``state``.
    """
    geom = WalkerGeometry() if geom is None else geom
    if dt <= 0:
        raise ValueError("time step must be positive")
    n = len(state)
    hip, hip_rel, d, dd, phi, ext, qd = kinematics(state, params, geom)
    foot = hip + ext[..., None] * d
    foot_rel = foot - state.pos[:, None, :]
    v_body = state.vel[:, None, :] + _omega_cross(state.omega, foot_rel)
    foot_vel = v_body + (qd[..., HIP] * ext)[..., None] * dd + qd[..., EXT][..., None] * d

    mu = params.friction[:, None]
    f_foot, fn, ft, touching, sticking, anchor = _contact(
        foot, foot_vel, terrain, geom.contact_k, geom.contact_c,
        state.sticking, state.anchor, mu, geom.tangent_k, geom.tangent_c)

    gen = np.zeros((n, 2, 2))
    gen[..., HIP] = ext * np.sum(f_foot * dd, axis=-1)
    gen[..., EXT] = np.sum(f_foot * d, axis=-1)
    force_total = f_foot.sum(axis=1)
    torque_total = _cross(foot_rel, f_foot).sum(axis=1)

    seg_mag = np.zeros((n, 2))
    for lam in geom.segment_fractions:
        p = hip + (lam * ext)[..., None] * d
        rel = p - state.pos[:, None, :]
        pv = state.vel[:, None, :] + _omega_cross(state.omega, rel) \
            + (lam * qd[..., HIP] * ext)[..., None] * dd + (lam * qd[..., EXT])[..., None] * d
        f_seg, fn_seg, _, _, _, _ = _contact(p, pv, terrain, geom.contact_k, geom.contact_c)
        seg_mag += fn_seg
        gen[..., HIP] += lam * ext * np.sum(f_seg * dd, axis=-1)
        gen[..., EXT] += lam * np.sum(f_seg * d, axis=-1)
        force_total += f_seg.sum(axis=1)
        torque_total += _cross(rel, f_seg).sum(axis=1)

    effort = tau * geom.effort_to_force
    mass = params.mass(geom)
    inertia = mass * (geom.body_length ** 2 + geom.body_thickness ** 2) / 12.0
    acc = force_total / mass[:, None]
    acc[:, 1] -= GRAVITY
    alpha = torque_total / inertia
    qdd = (effort + gen.reshape(n, 4) - geom.joint_damping * state.qd) / geom.joint_inertia

    state.vel = state.vel + acc * dt
    state.omega = state.omega + alpha * dt
    state.pos = state.pos + state.vel * dt
    state.pitch = state.pitch + state.omega * dt
    state.qd = state.qd + qdd * dt
    state.q = state.q + state.qd * dt
    lo, hi = geom.joint_low, geom.joint_high
    below, above = state.q < lo, state.q > hi
    state.qd = np.where((below & (state.qd < 0)) | (above & (state.qd > 0)), 0.0, state.qd)
    state.q = np.clip(state.q, lo, hi)
    state.t = state.t + dt

    state.anchor, state.sticking, state.contact = anchor, sticking, touching
    state.foot_force = f_foot
    state.foot_vel = foot_vel
    state.segment_force = seg_mag
    state.effort = effort
    if check and not np.all(state.is_finite()):
        raise SimulationFault("non-finite walker state")
    return state


def step_control(state, q_des, terrain, params, geom=None, substeps=SUBSTEPS, check=True):
    """Hold joint targets ``q_des`` for one policy period (``substeps`` PD/physics ticks)."""
    geom = WalkerGeometry() if geom is None else geom
    q_des = np.clip(q_des, geom.joint_low, geom.joint_high)
    for _ in range(substeps):
        tau = pd_torque(q_des, state.q, state.qd, params, geom.torque_limit)
        step_physics(state, tau, terrain, params, geom, dt=1.0 / (CONTROL_HZ * substeps),
                     check=check)
    return state


ALIVE, FELL, COLLIDED = 0, 1, 2


def check_termination(state, terrain, params, geom=None):
    """Per-env status: ALIVE, FELL (|pitch| > 90 deg) or COLLIDED (body/head touches terrain)."""
    geom = WalkerGeometry() if geom is None else geom
    body, head = body_points(state, params, geom)
    r = geom.body_radius
    ground = terrain.max_height(body[..., 0] - r, body[..., 0] + r)
    hit_body = np.any(body[..., 1] - r < ground, axis=1)
    rh = geom.head_radius
    ground_h = terrain.max_height(head[:, 0] - rh, head[:, 0] + rh)
    hit_head = head[:, 1] - rh < ground_h
    status = np.full(len(state), ALIVE)
    status[hit_body | hit_head] = COLLIDED
    status[np.abs(state.pitch) > np.pi / 2] = FELL
    return status


@dataclass
class PushSchedule:
    interval: float = 15.0
    speed: float = 0.3
    next_push: np.ndarray = None
    count: np.ndarray = None

    def __post_init__(self):
        if self.interval <= 0:
            raise ValueError("push interval must be positive")

    def reset(self, n, idx=None):
        if self.next_push is None or idx is None:
            self.next_push = np.full(n, self.interval)
            self.count = np.zeros(n, dtype=int)
        else:
            self.next_push[idx] = self.interval
            self.count[idx] = 0


def apply_push(state, schedule, rng):
    """Kick every env whose clock has crossed its next push instant by +-speed along x."""
    if schedule.next_push is None:
        schedule.reset(len(state))
    due = state.t >= schedule.next_push - 1e-9
    if np.any(due):
        sign = np.where(rng.random(int(due.sum())) < 0.5, -1.0, 1.0)
        state.vel[due, 0] += sign * schedule.speed
        schedule.next_push[due] += schedule.interval
        schedule.count[due] += 1
    return state, due


def settle(state, terrain, params, geom=None, seconds=2.0, q_des=None):
    """Let the walker come to rest holding ``q_des`` (defaults to the nominal pose)."""
    geom = WalkerGeometry() if geom is None else geom
    q_des = np.tile(geom.default_pose, (len(state), 1)) if q_des is None else q_des
    for _ in range(int(round(seconds * CONTROL_HZ))):
        step_control(state, q_des, terrain, params, geom)
    return state
