"""Open-loop trot-like gait used as a hand-written reference controller."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import ACTION_SCALE
from .sim import CONTROL_HZ, WalkerGeometry


@dataclass
class ScriptedGait:
    """Sinusoidal hip swing with a lift pulse on each leg, legs in antiphase.

    Behaves like a policy (``initial_state`` / ``act``); the recurrent state is
    simply the elapsed number of control steps per environment.
    """

    freq: float = 4.0
    swing: float = 0.1
    lift: float = 0.06
    lag: float = 1.25 * np.pi
    encoder_key: str = "scandots"

    def initial_state(self, n):
        return np.zeros((n, 1))

    def targets(self, t):
        """Joint targets at time(s) ``t`` in seconds, shape (..., 4)."""
        t = np.asarray(t, dtype=float)
        ph = 2 * np.pi * self.freq * t
        ext0 = WalkerGeometry().default_pose[1]
        hip_f = self.swing * np.sin(ph)
        hip_r = self.swing * np.sin(ph + np.pi)
        ext_f = ext0 - self.lift * np.maximum(0.0, np.cos(ph + self.lag))
        ext_r = ext0 - self.lift * np.maximum(0.0, np.cos(ph + np.pi + self.lag))
        return np.stack([hip_f, ext_f, hip_r, ext_r], axis=-1)

    def act(self, obs, h):
        t = h[:, 0] / CONTROL_HZ
        q = self.targets(t)
        a = (q - np.asarray(WalkerGeometry().default_pose)) / ACTION_SCALE
        return a, h + 1.0
