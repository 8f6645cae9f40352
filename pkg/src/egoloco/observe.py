"""Observation pipelines: proprioception, scandots, the head camera's 1-D depth
scan, delivery latency, the additive noise model and elevation corruption."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .sim import WalkerGeometry

PROPRIO_DIM = 14
N_SCANDOTS = 16
SCANDOT_SPAN = (-0.4, 0.8)
SCANDOT_OFFSETS = np.linspace(SCANDOT_SPAN[0], SCANDOT_SPAN[1], N_SCANDOTS)

N_RAYS = 64
N_CROP = 8
N_DEPTH = 16
HOLE = -1.0

# slicing of the proprioceptive vector
Q_SLICE = slice(0, 4)
QD_SLICE = slice(4, 8)
OMEGA_SLICE = slice(8, 9)
PITCH_SLICE = slice(9, 10)
ACTION_SLICE = slice(10, 14)


class ObservationError(ValueError):
    pass


def proprio(state, last_action):
    """Proprioceptive vector ``[q(4), qd(4), omega, pitch, a_prev(4)]`` per env."""
    last_action = np.asarray(last_action, dtype=float).reshape(len(state), 4)
    return np.concatenate([state.q, state.qd, state.omega[:, None], state.pitch[:, None],
                           last_action], axis=1)


def split_proprio(x):
    x = np.asarray(x)
    if x.shape[-1] != PROPRIO_DIM:
        raise ObservationError(f"proprioception has width {PROPRIO_DIM}, got {x.shape[-1]}")
    return {"q": x[..., Q_SLICE], "qd": x[..., QD_SLICE], "omega": x[..., 8],
            "pitch": x[..., 9], "last_action": x[..., ACTION_SLICE]}


def scandots(state, terrain, offsets=SCANDOT_OFFSETS, jitter=None):
    """Terrain heights at fixed horizontal offsets from the body, relative to body height.

    ``jitter`` (N, n_dots) perturbs the query locations only.  Returns
    ``(m, out_of_bounds)``.
    """
    xq = state.pos[:, 0:1] + np.asarray(offsets)[None, :]
    if jitter is not None:
        xq = xq + jitter
    h = terrain.height(xq)
    lo = terrain.bank.x0[terrain.idx][:, None]
    hi = lo + terrain.bank.n * terrain.bank.dx
    oob = (xq < lo) | (xq > hi)
    return h - state.pos[:, 1:2], oob


# -- depth camera --------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    """Head camera: a vertical fan of rays, centre pitched down from the body axis."""

    n_rays: int = N_RAYS
    fov: float = np.deg2rad(60.0)
    mount_pitch: float = np.deg2rad(30.0)
    max_range: float = 3.0
    march_step: float = 0.005
    tolerance: float = 0.0005

    def depression(self):
        """Angle of every ray below the body axis; ray 0 is the shallowest."""
        half = self.fov / 2
        return self.mount_pitch + np.linspace(-half, half, self.n_rays)


def camera_pose(state, params, geom=None):
    """World position of the camera (head centre) and the body pitch."""
    geom = WalkerGeometry() if geom is None else geom
    c, s = np.cos(state.pitch), np.sin(state.pitch)
    hx = geom.head_x - params.com_offset
    hz = geom.head_z
    origin = state.pos + np.stack([hx * c - hz * s, hx * s + hz * c], axis=1)
    return origin, state.pitch


def cast_rays(origin, angles, terrain, camera=Camera()):
    """Distance along each ray to the first terrain crossing.

    ``origin`` is (N, 2), ``angles`` (N, R) world elevation angles (negative
    looks down).  Marching in ``march_step`` increments brackets the crossing,
    which bisection then narrows below ``tolerance``.  Rays that find nothing
    within ``max_range`` return ``HOLE``.
    """
    origin = np.asarray(origin, dtype=float)
    angles = np.asarray(angles, dtype=float)
    dirx, dirz = np.cos(angles), np.sin(angles)
    ox, oz = origin[:, 0:1], origin[:, 1:2]
    n_steps = int(np.ceil(camera.max_range / camera.march_step))
    ts = camera.march_step * np.arange(1, n_steps + 1)
    ts[-1] = camera.max_range
    idx = terrain.idx
    # march: heights along every ray at every step, (N, R, S)
    px = ox[..., None] + dirx[..., None] * ts
    pz = oz[..., None] + dirz[..., None] * ts
    bank = terrain.bank
    below = pz <= bank.height(idx[:, None, None], px)
    hit = below.any(axis=-1)
    first = np.argmax(below, axis=-1)
    hi = ts[first]
    lo = np.where(first > 0, ts[np.maximum(first - 1, 0)], 0.0)
    # the origin itself below ground counts as a zero-distance hit
    start_below = oz[:, 0] <= terrain.height(ox[:, 0])
    n_bisect = int(np.ceil(np.log2(camera.march_step / (camera.tolerance / 4)))) + 1
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        mz = oz + dirz * mid
        mx = ox + dirx * mid
        under = mz <= bank.height(idx[:, None], mx)
        hi = np.where(under, mid, hi)
        lo = np.where(under, lo, mid)
    dist = 0.5 * (lo + hi)
    dist = np.where(hit, dist, HOLE)
    dist[start_below] = 0.0
    return dist


def raycast_depth(state, terrain, params, camera=Camera(), geom=None):
    """Raw scan of ``camera.n_rays`` distances from the head camera."""
    origin, pitch = camera_pose(state, params, geom)
    angles = pitch[:, None] - camera.depression()[None, :]
    return cast_rays(origin, angles, terrain, camera)


def fill_holes(raw):
    """Replace every hole by its nearest valid neighbour, ties going to the left.

    Returns ``(filled, all_hole)`` where ``all_hole`` flags rows with no valid ray.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    valid = raw != HOLE
    n = raw.shape[1]
    pos = np.arange(n)
    big = 10 * n
    # index of nearest valid sample to the left / right of each position
    left = np.where(valid, pos, -big)
    left = np.maximum.accumulate(left, axis=1)
    right = np.where(valid, pos, 2 * big)
    right = np.minimum.accumulate(right[:, ::-1], axis=1)[:, ::-1]
    use_left = (pos - left) <= (right - pos)
    src = np.where(use_left, left, right)
    all_hole = ~valid.any(axis=1)
    src = np.clip(src, 0, n - 1)
    filled = np.take_along_axis(raw, src, axis=1)
    filled[all_hole] = HOLE
    return filled, all_hole


def preprocess_depth(raw, previous=None, n_crop=N_CROP, n_out=N_DEPTH):
    """Crop the leading rays, fill holes, then block-average down to ``n_out`` values.

    Rows that are entirely holes reuse ``previous`` (if given) and are
    flagged.  Returns ``(processed, flags)``.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    if raw.shape[1] != N_RAYS:
        raise ObservationError(f"raw scan must hold {N_RAYS} rays, got {raw.shape[1]}")
    filled, flags = fill_holes(raw[:, n_crop:])
    groups = np.array_split(np.arange(filled.shape[1]), n_out)
    out = np.stack([filled[:, g].mean(axis=1) for g in groups], axis=1)
    if np.any(flags):
        if previous is None:
            out[flags] = HOLE
        else:
            out[flags] = np.atleast_2d(previous)[flags] if np.ndim(previous) > 1 \
                else previous
    return out, flags


# -- delivery latency -------------------------------------------------------------

@dataclass
class LatencyModel:
    """Periodic captures delivered after a random delay.

    Capture intervals and delays are resampled for every capture.  Times are
    seconds.  Both ranges may collapse to a point for deterministic tests.
    """

    interval: tuple = (0.08, 0.12)
    latency: tuple = (0.01, 0.03)


@dataclass
class LatencyBuffer:
    """Per-environment delivery queue.  At most one capture is in flight
    whenever the shortest interval exceeds the longest latency; the queue is
    kept general anyway."""

    model: LatencyModel
    n: int
    width: int
    rng: np.random.Generator = None
    next_capture: np.ndarray = None
    delivered: np.ndarray = None
    delivered_stamp: np.ndarray = None
    pending: list = field(default_factory=list)

    def __post_init__(self):
        self.rng = np.random.default_rng(0) if self.rng is None else self.rng
        self.next_capture = np.zeros(self.n)
        self.delivered = np.zeros((self.n, self.width))
        self.delivered_stamp = np.full(self.n, -np.inf)
        self.pending = [[] for _ in range(self.n)]

    def _draw(self, rng_range, k):
        lo, hi = rng_range
        return np.full(k, lo) if hi == lo else self.rng.uniform(lo, hi, size=k)

    def reset(self, idx, now, scan=None):
        """Restart the schedule for ``idx``.  With ``scan`` given, that scan is
        delivered immediately so a fresh episode never sees a stale one."""
        idx = np.atleast_1d(np.asarray(idx))
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        now = np.broadcast_to(np.asarray(now, dtype=float), (len(idx),)) if np.ndim(now) \
            else np.full(len(idx), float(now))
        self.next_capture[idx] = now
        for i in idx:
            self.pending[i] = []
        if scan is not None:
            self.delivered[idx] = scan
            self.delivered_stamp[idx] = now
        else:
            self.delivered[idx] = 0.0
            self.delivered_stamp[idx] = -np.inf

    def due(self, now):
        """Mask of environments whose next capture is due at control tick ``now``."""
        return np.asarray(now) >= self.next_capture - 1e-9

    def tick(self, now, capture_fn):
        """Advance to time ``now`` (scalar or per-env array).

        ``capture_fn(mask)`` returns scans for the environments in ``mask``; it is
        only called when at least one capture is due.  Returns the delivered
        scans (N, width) and their capture stamps.
        """
        now = np.broadcast_to(np.asarray(now, dtype=float), (self.n,))
        due = self.due(now)
        if np.any(due):
            scans = np.asarray(capture_fn(due))
            ids = np.flatnonzero(due)
            lat = self._draw(self.model.latency, len(ids))
            gap = self._draw(self.model.interval, len(ids))
            for j, i in enumerate(ids):
                self.pending[i].append((now[i] + lat[j], now[i], scans[j]))
            self.next_capture[ids] += gap
            # a capture schedule that fell far behind (e.g. after a reset) catches up
            behind = self.next_capture[ids] <= now[ids]
            self.next_capture[ids[behind]] = now[ids[behind]] + gap[behind]
        for i in range(self.n):
            q = self.pending[i]
            if not q:
                continue
            keep = []
            for item in q:
                if item[0] <= now[i] + 1e-9:
                    if item[1] >= self.delivered_stamp[i]:
                        self.delivered[i] = item[2]
                        self.delivered_stamp[i] = item[1]
                else:
                    keep.append(item)
            self.pending[i] = keep
        return self.delivered, self.delivered_stamp


# -- additive noise ------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseEntry:
    a: float
    b: object  # scalar or per-component vector
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("noise std must be non-negative")


def default_noise_table(geom=None):
    """Shift/scale/noise per observation group.  Joint-angle shifts sit at the
    standing pose of the planar joints (hip 0 rad, extension 0.28 m)."""
    geom = WalkerGeometry() if geom is None else geom
    return {
        "joint_angles": NoiseEntry(1.0, np.asarray(geom.default_pose, dtype=float), 0.01),
        "joint_velocities": NoiseEntry(0.05, 0.0, 0.05),
        "angular_velocity": NoiseEntry(0.25, 0.0, 0.05),
        "orientation": NoiseEntry(1.0, 0.0, 0.02),
        "last_action": NoiseEntry(1.0, 0.0, 0.0),
        "scandots": NoiseEntry(5.0, 0.0, 0.07),
    }


SCANDOT_LOCATION_SIGMA = 0.01

_GROUP_SLICES = {
    "joint_angles": Q_SLICE,
    "joint_velocities": QD_SLICE,
    "angular_velocity": OMEGA_SLICE,
    "orientation": PITCH_SLICE,
    "last_action": ACTION_SLICE,
}


def without_noise(table):
    """Same shift and scale, zero noise."""
    return {k: NoiseEntry(v.a, v.b, 0.0) for k, v in table.items()}


def apply_noise(values, entry, rng=None):
    out = entry.a * (np.asarray(values, dtype=float) - entry.b)
    if entry.sigma > 0:
        if rng is None:
            raise ValueError("a generator is required for non-zero noise")
        out = out + rng.normal(0.0, entry.sigma, size=out.shape)
    return out


def apply_obs_noise(obs, table, rng=None):
    """Shift, scale and noise an observation dict with keys ``proprio`` and
    optionally ``scandots``: ``o' = a (o - b) + N(0, sigma)`` per group."""
    out = dict(obs)
    x = np.array(obs["proprio"], dtype=float, copy=True)
    for group, sl in _GROUP_SLICES.items():
        if group not in table:
            raise KeyError(f"noise table lacks group {group!r}")
        x[..., sl] = apply_noise(x[..., sl], table[group], rng)
    out["proprio"] = x
    if "scandots" in obs and obs["scandots"] is not None:
        if "scandots" not in table:
            raise KeyError("noise table lacks group 'scandots'")
        out["scandots"] = apply_noise(obs["scandots"], table["scandots"], rng)
    return out


# -- elevation corruption for the noisy baseline ----------------------------------

@dataclass(frozen=True)
class ElevationNoise:
    offset_std: float = 0.05
    drift_step: float = 0.01
    drift_limit: float = 0.10
    outlier_prob: float = 0.02
    outlier_range: float = 0.3
    jitter_std: float = 0.02
    latency: float = 0.04

    @classmethod
    def zero(cls):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class ElevationCorruptor:
    """Stateful corruption of scandot heights.

    Each episode draws a vertical offset; a horizontal shift random-walks
    between control steps and is clamped; individual points are replaced by
    outliers or jittered.
    """

    noise: ElevationNoise
    n: int
    rng: np.random.Generator
    offset: np.ndarray = None
    shift: np.ndarray = None

    def __post_init__(self):
        self.offset = np.zeros(self.n)
        self.shift = np.zeros(self.n)
        self.reset(np.arange(self.n))

    def reset(self, idx):
        idx = np.atleast_1d(np.asarray(idx))
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        if self.noise.offset_std > 0:
            self.offset[idx] = self.rng.normal(0.0, self.noise.offset_std, size=len(idx))
        else:
            self.offset[idx] = 0.0
        self.shift[idx] = 0.0

    def step(self):
        if self.noise.drift_step > 0:
            sign = np.where(self.rng.random(self.n) < 0.5, -1.0, 1.0)
            self.shift = np.clip(self.shift + sign * self.noise.drift_step,
                                 -self.noise.drift_limit, self.noise.drift_limit)

    def query_offsets(self, offsets=SCANDOT_OFFSETS):
        """Scandot query locations seen through the drifting pose estimate."""
        return np.asarray(offsets)[None, :] + self.shift[:, None]

    def corrupt(self, heights):
        return corrupt_elevation(heights, self.noise, self.rng, offset=self.offset)


def corrupt_elevation(heights, noise, rng, offset=None):
    """Per-point corruption: add the per-episode ``offset``, replace a fraction
    ``outlier_prob`` of points by uniform outliers and jitter the rest."""
    heights = np.asarray(heights, dtype=float)
    out = heights.copy()
    if offset is not None:
        out = out + np.asarray(offset)[..., None]
    if noise.outlier_prob > 0:
        mask = rng.random(out.shape) < noise.outlier_prob
        vals = rng.uniform(-noise.outlier_range, noise.outlier_range, size=out.shape)
        out = np.where(mask, vals, out)
    else:
        mask = np.zeros(out.shape, dtype=bool)
    if noise.jitter_std > 0:
        out = out + np.where(mask, 0.0, rng.normal(0.0, noise.jitter_std, size=out.shape))
    return out


# -- scan dump -----------------------------------------------------------------------

class ScanLog:
    """Accumulates per-tick depth records for one environment and writes CSV."""

    def __init__(self):
        self.rows = []

    def record(self, tick, raw, processed, stamp):
        self.rows.append((int(tick), np.asarray(raw, dtype=float).copy(),
                          np.asarray(processed, dtype=float).copy(), float(stamp)))

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tick"] + [f"raw{i}" for i in range(N_RAYS)]
                       + [f"proc{i}" for i in range(N_DEPTH)] + ["delivered_stamp"])
            for tick, raw, proc, stamp in self.rows:
                w.writerow([tick] + [repr(float(v)) for v in raw]
                           + [repr(float(v)) for v in proc] + [repr(stamp)])
