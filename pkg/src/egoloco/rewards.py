"""Energy-style reward terms, command sampling and the per-step bookkeeping they need."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np

TERRAIN_SPEED = 0.35
CURVE_SPEED = (0.2, 0.75)
DRAG_FORCE = 1.0        # N, contact force above which a moving foot counts as dragging
COLLISION_FORCE = 0.1   # N, leg-segment force that counts as a collision

TERMS = ("work", "tracking", "foot_jerk", "feet_drag", "collision", "survival")


class CommandMode(enum.IntEnum):
    TERRAIN = 0
    CURVE = 1
    TURN_IN_PLACE = 2
    STOP = 3


@dataclass
class Command:
    v_x: np.ndarray
    mode: np.ndarray

    def __post_init__(self):
        self.v_x = np.asarray(self.v_x, dtype=float)
        self.mode = np.asarray(self.mode, dtype=int)
        if np.any(self.v_x < 0) or np.any(self.v_x > CURVE_SPEED[1]):
            raise ValueError("commanded speed must lie in [0, 0.75] m/s")


def sample_command(on_terrain, rng, n=None):
    """Commands for ``n`` environments (``on_terrain`` may be per-env).

    On terrain the speed is fixed at 0.35 m/s.  On flat ground one of three
    modes is chosen uniformly: curve following with speed U[0.2, 0.75], turning
    in place or stopping (both speed 0).
    """
    on_terrain = np.asarray(on_terrain, dtype=bool)
    if n is None:
        n = on_terrain.size if on_terrain.ndim else 1
    on_terrain = np.broadcast_to(on_terrain, (n,))
    flat_mode = rng.integers(1, 4, size=n)
    speed = rng.uniform(*CURVE_SPEED, size=n)
    mode = np.where(on_terrain, CommandMode.TERRAIN, flat_mode)
    v = np.where(mode == CommandMode.TERRAIN, TERRAIN_SPEED,
                 np.where(mode == CommandMode.CURVE, speed, 0.0))
    return Command(v, mode)


@dataclass(frozen=True)
class RewardScales:
    work: float = -1e-4
    tracking: float = 7.0
    foot_jerk: float = -1e-4
    feet_drag: float = -1e-4
    collision: float = -1.0
    survival: float = 1.0

    def as_dict(self):
        return asdict(self)


def reward_terms(prev_foot_force, foot_force, foot_vel, segment_force, effort, qd, q, v_x,
                 v_cmd, work_form="power"):
    """Raw (unscaled) terms for a batch of environments.

    ``work_form`` picks ``|tau . qdot|`` ("power") or the literal ``|tau . q|``
    ("literal").  Forces are per foot (N, 2, 2) in world axes; ``segment_force``
    is the leg-segment contact magnitude per leg.
    """
    if work_form == "power":
        work = np.abs(np.sum(effort * qd, axis=-1))
    elif work_form == "literal":
        work = np.abs(np.sum(effort * q, axis=-1))
    else:
        raise ValueError(f"unknown work form {work_form!r}")
    tracking = v_cmd - np.abs(v_cmd - v_x)
    jerk = np.linalg.norm(foot_force - prev_foot_force, axis=-1).sum(axis=-1)
    dragging = foot_force[..., 1] >= DRAG_FORCE
    drag = np.sum(dragging * np.abs(foot_vel[..., 0]), axis=-1)
    collision = np.sum(segment_force >= COLLISION_FORCE, axis=-1).astype(float)
    survival = np.ones_like(tracking, dtype=float)
    return {"work": work, "tracking": tracking, "foot_jerk": jerk, "feet_drag": drag,
            "collision": collision, "survival": survival}


def reward_step(state, prev_foot_force, v_cmd, scales=RewardScales(), work_form="power"):
    """Total reward and the scaled per-term breakdown after one control step.

    ``state`` carries the quantities of the final physics substep; the jerk
    term compares its foot forces with ``prev_foot_force`` from the previous
    control step.
    """
    raw = reward_terms(prev_foot_force, state.foot_force, state.foot_vel, state.segment_force,
                       state.effort, state.qd, state.q, state.vel[:, 0], v_cmd, work_form)
    s = scales.as_dict()
    scaled = {k: s[k] * raw[k] for k in TERMS}
    total = sum(scaled[k] for k in TERMS)
    return total, scaled
