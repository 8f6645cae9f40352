"""Vectorized walker environments: curriculum cells, resets, randomization,
pushes, observation noise, delayed perception and reward bookkeeping."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import observe
from .observe import (Camera, ElevationCorruptor, ElevationNoise, LatencyBuffer, LatencyModel,
                      N_DEPTH, N_SCANDOTS, SCANDOT_LOCATION_SIGMA, SCANDOT_OFFSETS)
from .rewards import TERMS, RewardScales, reward_step, sample_command
from .sim import (ALIVE, CONTROL_HZ, DR_RANGES, PushSchedule, SimulationFault, TerrainView,
                  WalkerGeometry, WalkerParams, WalkerState, apply_push, check_termination,
                  randomize_params, step_control)
from .terrain import (LEAD_IN, SUBTERRAIN_LENGTH, TerrainBank, TerrainKind, build_course,
                      build_grid)

ACTION_SCALE = np.array([0.5, 0.2, 0.5, 0.2])
SPAWN_X = 1.0
PRIV_DIM = 4


def privileged_vector(params):
    """Extrinsics ``[com, friction, strength, added mass]`` mapped affinely so
    each randomization range lands on [-1, 1]."""
    out = []
    for name in ("com_offset", "friction", "motor_strength", "added_mass"):
        lo, hi = DR_RANGES[name]
        v = np.asarray(getattr(params, name), dtype=float)
        out.append(2.0 * (v - lo) / (hi - lo) - 1.0)
    return np.stack(out, axis=-1)


def curriculum_update(col, distance, v_cmd, episode_s, n_cols, length=SUBTERRAIN_LENGTH):
    """New difficulty columns after episodes ending with ``distance`` travelled.

    Promote when the walker got further than half the sub-terrain; demote when it
    covered less than half the commanded distance ``v_cmd * episode_s``.
    Columns saturate at both ends.
    """
    col = np.asarray(col, dtype=int)
    distance = np.asarray(distance, dtype=float)
    v_cmd = np.asarray(v_cmd, dtype=float)
    up = distance > 0.5 * length
    down = ~up & (distance < 0.5 * v_cmd * episode_s)
    return np.clip(col + up.astype(int) - down.astype(int), 0, n_cols - 1)


@dataclass
class EnvConfig:
    n_envs: int = 64
    kinds: tuple = ("flat", "stairs_up")
    cols: int = 10
    terrain_seed: int = 0
    fractal: bool = True
    episode_s: float = 20.0
    init_max_col: int = 0
    curriculum: bool = True
    randomize: bool = True
    pushes: bool = True
    obs_noise: bool = True
    scandot_latency: bool = True
    depth: bool = False
    blind: bool = False
    noisy_elevation: bool = False
    work_form: str = "power"
    scales: RewardScales = field(default_factory=RewardScales)
    end_margin: float = 0.5
    # evaluation courses replace the curriculum grid when set
    course_length: float = 0.0
    course_difficulty: tuple = ()
    # optional overrides: {name: (lo, hi)} and {group: sigma}
    dr_ranges: dict = None
    noise_sigma: dict = None

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass
class StepResult:
    obs: dict
    reward: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    info: dict


class LocoEnv:
    """Batch of walkers sharing one terrain bank.  ``reset`` then ``step``."""

    def __init__(self, cfg: EnvConfig, seed=0):
        self.cfg = cfg
        self.geom = WalkerGeometry()
        self.rng = np.random.default_rng(seed)
        self.n = cfg.n_envs
        self.kinds = [TerrainKind.parse(k) for k in cfg.kinds]
        if cfg.course_length > 0:
            self._init_courses()
        else:
            self.grid = build_grid(len(self.kinds), cfg.cols, cfg.terrain_seed, kinds=self.kinds,
                                   fractal=cfg.fractal)
            self.bank = TerrainBank.from_grid(self.grid)
            self.n_cols = cfg.cols
            self.row = np.arange(self.n) % len(self.kinds)
            self.col = self.rng.integers(0, cfg.init_max_col + 1, size=self.n)
        self.max_steps = int(round(cfg.episode_s * CONTROL_HZ))
        self.camera = Camera()
        self.noise_table = observe.default_noise_table(self.geom)
        for group, sigma in (cfg.noise_sigma or {}).items():
            if group not in self.noise_table:
                raise KeyError(f"unknown noise group {group!r}")
            e = self.noise_table[group]
            self.noise_table[group] = observe.NoiseEntry(e.a, e.b, float(sigma))
        if not cfg.obs_noise:
            self.noise_table = observe.without_noise(self.noise_table)
        self.dr_ranges = dict(DR_RANGES)
        for name, rng_ in (cfg.dr_ranges or {}).items():
            if name not in DR_RANGES:
                raise KeyError(f"unknown randomization parameter {name!r}")
            lo, hi = (float(v) for v in rng_)
            if lo > hi:
                raise ValueError(f"empty randomization range for {name}")
            self.dr_ranges[name] = (lo, hi)
        self.push = PushSchedule()
        self.state = None
        self.params = None
        self.trajectory = None

    def _init_courses(self):
        cfg = self.cfg
        diffs = list(cfg.course_difficulty) or [0.0]
        fields, rows, cols = [], [], []
        for r, kind in enumerate(self.kinds):
            for c, d in enumerate(diffs):
                fields.append(build_course(kind, float(d), cfg.course_length,
                                           seed=cfg.terrain_seed + 1000 * r + c,
                                           fractal=cfg.fractal))
                rows.append(r)
                cols.append(c)
        self.bank = TerrainBank(fields)
        self.n_cols = len(diffs)
        n_cells = len(fields)
        cell = np.arange(self.n) % n_cells
        self.row = np.asarray(rows)[cell]
        self.col = np.asarray(cols)[cell]
        self.course_cells = True

    # -- bookkeeping -----------------------------------------------------------

    @property
    def terrain_index(self):
        return self.row * self.n_cols + self.col

    def on_terrain(self, idx=slice(None)):
        kinds = np.array([k is not TerrainKind.FLAT for k in self.kinds])
        return kinds[self.row[idx]]

    def _spawn(self, ids):
        ids = np.asarray(ids)
        k = len(ids)
        cfg = self.cfg
        tv = TerrainView(self.bank, self.terrain_index[ids])
        x = np.full(k, SPAWN_X)
        ground = tv.max_height(x - 0.3, x + 0.3)
        if cfg.randomize:
            params = randomize_params(rng=self.rng, n=k, ranges=self.dr_ranges)
        else:
            params = WalkerParams.nominal(k)
        st = WalkerState.standing(k, self.geom, x=x, ground=ground)
        cmd = sample_command(self.on_terrain(ids), self.rng, n=k)
        return st, params, cmd

    def reset(self):
        n = self.n
        self.state, self.params, cmd = self._spawn(np.arange(n))
        self.v_cmd = cmd.v_x
        self.cmd_mode = cmd.mode
        self.steps = np.zeros(n, dtype=int)
        self.spawn_x = self.state.pos[:, 0].copy()
        self.last_action = np.zeros((n, 4))
        self.prev_foot_force = np.zeros((n, 2, 2))
        self.episode_return = np.zeros(n)
        self.push.reset(n)
        self.scan_buf = LatencyBuffer(LatencyModel(), n, N_SCANDOTS, rng=self.rng)
        if self.cfg.noisy_elevation:
            noise = ElevationNoise()
            self.scan_buf.model = LatencyModel((0.02, 0.02), (noise.latency, noise.latency))
            self.corruptor = ElevationCorruptor(noise, n, self.rng)
            self.clean_buf = LatencyBuffer(LatencyModel((0.02, 0.02), (noise.latency,
                                                                       noise.latency)),
                                           n, N_SCANDOTS, rng=self.rng)
        if self.cfg.depth:
            self.depth_buf = LatencyBuffer(LatencyModel(), n, N_DEPTH, rng=self.rng)
            self.last_depth = np.zeros((n, N_DEPTH))
        self._reset_buffers(np.arange(n))
        return self.observe()

    def _terrain(self, ids=None):
        idx = self.terrain_index if ids is None else self.terrain_index[ids]
        return TerrainView(self.bank, idx)

    def _reset_buffers(self, ids):
        ids = np.asarray(ids)
        now = np.zeros(len(ids))
        sub = self.state.subset(ids)
        tv = self._terrain(ids)
        if self.cfg.noisy_elevation:
            self.corruptor.reset(ids)
            self.clean_buf.reset(ids, now, observe.scandots(sub, tv)[0])
            self.scan_buf.reset(ids, now, self._noisy_scan(ids, sub, tv))
        else:
            self.scan_buf.reset(ids, now, self._scan(sub, tv))
        if self.cfg.depth:
            raw = observe.raycast_depth(sub, tv, self.params.subset(ids), self.camera, self.geom)
            proc, _ = observe.preprocess_depth(raw)
            self.depth_buf.reset(ids, now, proc)

    def _scan(self, st, tv):
        jitter = None
        if self.cfg.obs_noise:
            jitter = self.rng.normal(0.0, SCANDOT_LOCATION_SIGMA, size=(len(st), N_SCANDOTS))
        return observe.scandots(st, tv, SCANDOT_OFFSETS, jitter)[0]

    def _noisy_scan(self, ids, st, tv):
        offsets = self.corruptor.query_offsets()[ids]
        h = tv.height(st.pos[:, 0:1] + offsets) - st.pos[:, 1:2]
        return observe.corrupt_elevation(h, self.corruptor.noise, self.rng,
                                         offset=self.corruptor.offset[ids])

    def observe(self):
        """Observation dict for the current state (after delivery latency)."""
        st = self.state
        tv = self._terrain()
        now = self.steps / CONTROL_HZ
        x = observe.proprio(st, self.last_action)
        obs = {"proprio": x}
        if self.cfg.noisy_elevation:
            self.corruptor.step()
            clean, _ = self.clean_buf.tick(now, lambda m: observe.scandots(
                st.subset(m), tv.subset(m))[0])
            noisy, _ = self.scan_buf.tick(now, lambda m: self._noisy_scan(
                np.flatnonzero(m), st.subset(m), tv.subset(m)))
            obs["scandots"] = clean.copy()
            obs["noisy_scandots"] = noisy.copy()
        elif self.cfg.scandot_latency:
            m, _ = self.scan_buf.tick(now, lambda mask: self._scan(st.subset(mask),
                                                                   tv.subset(mask)))
            obs["scandots"] = m.copy()
        else:
            obs["scandots"] = self._scan(st, tv)
        obs = observe.apply_obs_noise(obs, self.noise_table,
                                      self.rng if self.cfg.obs_noise else None)
        if self.cfg.blind:
            # zeroed after noise so the blind channel carries no signal at all
            obs["scandots"] = np.zeros_like(obs["scandots"])
        if "noisy_scandots" in obs:
            obs["noisy_scandots"] = observe.apply_noise(obs["noisy_scandots"],
                                                        self.noise_table["scandots"],
                                                        self.rng if self.cfg.obs_noise
                                                        else None)
        if self.cfg.depth:
            def capture(mask):
                raw = observe.raycast_depth(st.subset(mask), tv.subset(mask),
                                            self.params.subset(mask), self.camera, self.geom)
                proc, _ = observe.preprocess_depth(raw, self.depth_buf.delivered[mask])
                return proc
            d, _ = self.depth_buf.tick(now, capture)
            obs["depth"] = np.zeros_like(d) if self.cfg.blind else d.copy()
        obs["command"] = self.v_cmd[:, None].copy()
        obs["privileged"] = privileged_vector(self.params)
        return obs

    # -- stepping -----------------------------------------------------------------

    def action_to_target(self, action):
        return np.asarray(self.geom.default_pose) + ACTION_SCALE * action

    def step(self, action):
        cfg = self.cfg
        action = np.asarray(action, dtype=float)
        if action.shape != (self.n, 4):
            raise ValueError(f"expected actions of shape {(self.n, 4)}, got {action.shape}")
        st = self.state
        tv = self._terrain()
        pushed = np.zeros(self.n, dtype=bool)
        if cfg.pushes:
            st, pushed = apply_push(st, self.push, self.rng)
        q_des = self.action_to_target(action)
        fault = np.zeros(self.n, dtype=bool)
        try:
            step_control(st, q_des, tv, self.params, self.geom)
        except SimulationFault:
            fault = ~st.is_finite()
        reward, terms = reward_step(st, self.prev_foot_force, self.v_cmd, cfg.scales, cfg.work_form)
        status = check_termination(st, tv, self.params, self.geom)
        status[fault] = 3
        self.steps += 1
        self.last_action = action.copy()
        self.prev_foot_force = st.foot_force.copy()
        end_x = self.bank.end_x(self.terrain_index) - cfg.end_margin
        reached_end = st.pos[:, 0] >= end_x
        terminated = status != ALIVE
        truncated = ~terminated & ((self.steps >= self.max_steps) | reached_end)
        reward = np.where(fault, 0.0, reward)
        for k in terms:
            terms[k] = np.where(fault, 0.0, terms[k])
        self.episode_return += reward
        if self.trajectory is not None:
            self.trajectory.record(self, terms)
        done = terminated | truncated
        info = {"terms": terms, "status": status, "pushed": pushed, "fault": fault,
                "reached_end": reached_end}
        if np.any(done):
            ids = np.flatnonzero(done)
            distance = st.pos[ids, 0] - self.spawn_x[ids]
            info["episodes"] = {
                "ids": ids, "distance": distance, "length": self.steps[ids].copy(),
                "return": self.episode_return[ids].copy(), "row": self.row[ids].copy(),
                "col": self.col[ids].copy(), "terminated": terminated[ids].copy(),
                "v_cmd": self.v_cmd[ids].copy(),
            }
            # observation of the truncated state, for value bootstrapping
            info["final_obs"] = self.observe_subset_final(ids)
            if cfg.curriculum and not getattr(self, "course_cells", False):
                self.col[ids] = curriculum_update(self.col[ids], distance, self.v_cmd[ids],
                                                  cfg.episode_s, self.n_cols)
            self._reset_envs(ids)
        obs = self.observe()
        return StepResult(obs, reward, terminated, truncated, info)

    def observe_subset_final(self, ids):
        """Noise-free-of-latency observation of ``ids`` before their reset; used
        only to bootstrap values of truncated episodes."""
        st = self.state.subset(ids)
        tv = self._terrain(ids)
        obs = {"proprio": observe.proprio(st, self.last_action[ids]),
               "scandots": self.scan_buf.delivered[ids].copy()
               if not self.cfg.blind else np.zeros((len(ids), N_SCANDOTS))}
        if self.cfg.noisy_elevation:
            obs["scandots"] = self.clean_buf.delivered[ids].copy()
        obs = observe.apply_obs_noise(obs, observe.without_noise(self.noise_table))
        obs["command"] = self.v_cmd[ids, None].copy()
        obs["privileged"] = privileged_vector(self.params.subset(ids))
        return obs

    def _reset_envs(self, ids):
        st, params, cmd = self._spawn(ids)
        self.state.assign(ids, st)
        self.params.assign(ids, params)
        self.v_cmd[ids] = cmd.v_x
        self.cmd_mode[ids] = cmd.mode
        self.steps[ids] = 0
        self.spawn_x[ids] = st.pos[:, 0]
        self.last_action[ids] = 0.0
        self.prev_foot_force[ids] = 0.0
        self.episode_return[ids] = 0.0
        self.push.reset(self.n, ids)
        self._reset_buffers(ids)


class TrajectoryLog:
    """Per-step CSV record of one environment: pose, joints, foot forces, rewards."""

    def __init__(self, env_index=0):
        self.env_index = env_index
        self.rows = []

    def record(self, env, terms):
        i = self.env_index
        st = env.state
        self.rows.append([env.steps[i] / CONTROL_HZ, st.pos[i, 0], st.pos[i, 1], st.pitch[i],
                          *st.q[i], st.foot_force[i, 0, 1], st.foot_force[i, 1, 1],
                          *(terms[k][i] for k in TERMS)])

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "z", "pitch", "q0", "q1", "q2", "q3", "f_front", "f_rear",
                        *TERMS])
            for r in self.rows:
                w.writerow([repr(float(v)) for v in r])
