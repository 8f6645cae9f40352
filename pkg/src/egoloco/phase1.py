"""Phase 1: PPO with truncated backpropagation through time over curriculum terrain."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .envs import LocoEnv
from .nn import AdamState, adam_update, clip_grad_norm, TRUNCATION
from .policies import (flat_params, gaussian_entropy, gaussian_logp, set_flat_params,
                       zero_grads)

OBS_KEYS = ("proprio", "scandots", "command", "privileged")


@dataclass
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.0
    value_coef: float = 1.0
    epochs: int = 4
    minibatches: int = 4
    lr: float = 1e-3
    max_grad_norm: float = 1.0
    kl_guard: float = 0.03
    segment: int = TRUNCATION
    min_log_std: float = np.log(0.05)


@dataclass
class RolloutBuffer:
    """One segment of ``T`` steps for ``B`` environments."""

    obs: dict
    actions: np.ndarray      # (T, B, 4)
    logp: np.ndarray         # (T, B)
    values: np.ndarray       # (T, B)
    rewards: np.ndarray      # (T, B)
    dones: np.ndarray        # (T, B) episode ended after step t
    keep: np.ndarray         # (T, B) 0 where the hidden state was reset before step t
    h0: np.ndarray           # (B, H) hidden state at the segment start
    last_value: np.ndarray   # (B,)
    episodes: list = field(default_factory=list)

    def __len__(self):
        return self.actions.shape[0] * self.actions.shape[1]


class ValueNormalizer:
    """Running mean/variance of return targets; the critic works in normalized units."""

    def __init__(self, eps=1e-4):
        self.mean = 0.0
        self.var = 1.0
        self.count = eps

    def update(self, x):
        x = np.asarray(x, dtype=float).ravel()
        b_mean, b_var, b_n = x.mean(), x.var(), x.size
        delta = b_mean - self.mean
        tot = self.count + b_n
        self.mean = self.mean + delta * b_n / tot
        m2 = self.var * self.count + b_var * b_n + delta * delta * self.count * b_n / tot
        self.var = m2 / tot
        self.count = tot

    @property
    def std(self):
        return float(np.sqrt(self.var) + 1e-8)

    def normalize(self, v):
        return (v - self.mean) / self.std

    def denormalize(self, v):
        return v * self.std + self.mean

    def state_dict(self):
        return {"mean": float(self.mean), "var": float(self.var), "count": float(self.count)}


def _stack_obs(seq):
    return {k: np.stack([o[k] for o in seq]) for k in OBS_KEYS if k in seq[0]}


def _policy_obs(obs, policy):
    """Subset of an env observation consumed by a phase-1 policy."""
    return {k: obs[k] for k in OBS_KEYS if k in obs}


class Collector:
    """Steps an env with a stochastic policy, carrying hidden states across segments."""

    def __init__(self, env: LocoEnv, policy, rng, normalizer=None, gamma=0.99):
        self.env = env
        self.policy = policy
        self.rng = rng
        self.gamma = gamma
        self.normalizer = normalizer or ValueNormalizer()
        self.obs = env.reset()
        self.h = policy.initial_state(env.n)
        self.keep_next = np.zeros(env.n)
        self.steps = 0

    def values(self, obs):
        return self.normalizer.denormalize(self.policy.value(obs))

    def collect(self, T, deterministic=False):
        env, pol = self.env, self.policy
        B = env.n
        obs_seq, acts, logps, vals, rews, dones, keeps = [], [], [], [], [], [], []
        h0 = self.h.copy()
        episodes = []
        std = np.exp(pol.extras["log_std"])
        for t in range(T):
            keep = self.keep_next.copy()
            h_in = self.h * keep[:, None]
            if t == 0:
                h0 = h_in.copy()
                keep = np.ones(B)
            po = _policy_obs(self.obs, pol)
            mean, self.h = pol.act(po, h_in)
            if deterministic:
                a = mean
            else:
                a = mean + std * self.rng.standard_normal(mean.shape)
            v = self.values(po)
            res = env.step(a)
            r = res.reward.copy()
            done = res.terminated | res.truncated
            if "episodes" in res.info:
                ep = res.info["episodes"]
                episodes.append(ep)
                trunc = res.truncated[ep["ids"]]
                if np.any(trunc):
                    fin = {k: v_[trunc] for k, v_ in res.info["final_obs"].items()}
                    r[ep["ids"][trunc]] += self.gamma * self.values(fin)
            obs_seq.append(po)
            acts.append(a)
            logps.append(gaussian_logp(a, mean, pol.extras["log_std"]))
            vals.append(v)
            rews.append(r)
            dones.append(done)
            keeps.append(keep)
            self.keep_next = (~done).astype(float)
            self.obs = res.obs
            self.steps += B
        last_value = self.values(_policy_obs(self.obs, pol))
        return RolloutBuffer(_stack_obs(obs_seq), np.stack(acts), np.stack(logps),
                             np.stack(vals), np.stack(rews), np.stack(dones).astype(bool),
                             np.stack(keeps), h0, last_value, episodes)


def gae_advantages(rewards, values, dones, last_value, gamma=0.99, lam=0.95, normalize=True):
    """Generalized advantage estimates and returns for (T, B) arrays.

    ``dones[t]`` cuts the recursion after step ``t``; ``last_value`` bootstraps
    the segment end.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    T = len(rewards)
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    next_v = np.asarray(last_value, dtype=float)
    for t in reversed(range(T)):
        nonterm = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * nonterm - values[t]
        running = delta + gamma * lam * nonterm * running
        adv[t] = running
        next_v = values[t]
    returns = adv + values
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


def clipped_surrogate(ratio, adv, clip):
    """Per-sample PPO objective min(r A, clip(r) A) (to be maximized)."""
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)


def _slice_obs(obs, cols):
    return {k: v[:, cols] for k, v in obs.items()}


def ppo_update(policy, buf, adam, cfg: PPOConfig, normalizer, rng):
    """Clipped-surrogate epochs over minibatches of whole environment segments.

    Returns a stats dict.  An epoch stops early once the approximate KL of a
    minibatch exceeds ``cfg.kl_guard``; a non-finite loss skips the update.
    """
    adv, returns = gae_advantages(buf.rewards, buf.values, buf.dones, buf.last_value,
                                  cfg.gamma, cfg.lam)
    normalizer.update(returns)
    ret_n = normalizer.normalize(returns)
    T, B = buf.rewards.shape
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "kl": [], "clip_frac": [],
             "skipped": 0, "kl_stop": False}
    names = tuple(policy.actor_names) + ("critic",)
    for _ in range(cfg.epochs):
        perm = rng.permutation(B)
        stop = False
        for cols in np.array_split(perm, cfg.minibatches):
            if len(cols) == 0:
                continue
            obs = _slice_obs(buf.obs, cols)
            mean, cache = policy.forward_sequence(obs, buf.h0[cols], buf.keep[:, cols])
            log_std = policy.extras["log_std"]
            std = np.exp(log_std)
            a = buf.actions[:, cols]
            logp = gaussian_logp(a, mean, log_std)
            log_ratio = logp - buf.logp[:, cols]
            ratio = np.exp(log_ratio)
            A = adv[:, cols]
            n = ratio.size
            surr = clipped_surrogate(ratio, A, cfg.clip)
            ent = gaussian_entropy(log_std)
            v_n, v_cache = policy.value_forward(_critic_flat(obs))
            v_n = v_n.reshape(T, len(cols))
            v_err = v_n - ret_n[:, cols]
            p_loss = -surr.mean()
            v_loss = 0.5 * np.mean(v_err ** 2)
            kl = float(np.mean((ratio - 1.0) - log_ratio))
            if not np.isfinite(p_loss + v_loss):
                stats["skipped"] += 1
                continue
            # d(-surr)/d logp: active only where the unclipped branch is the minimum
            unclipped = ratio * A <= np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip) * A
            dlogp = np.where(unclipped, -A * ratio, 0.0) / n
            z = (a - mean) / std
            dmean = dlogp[..., None] * z / std
            dlog_std = np.sum(dlogp[..., None] * (z * z - 1.0), axis=(0, 1))
            dlog_std -= cfg.entropy_coef * np.ones_like(log_std)
            grads = zero_grads(policy, names)
            policy.backward_sequence(cache, dmean, grads)
            grads["log_std"] += dlog_std
            crit = {k[len("critic."):]: v for k, v in grads.items() if k.startswith("critic.")}
            dv = (cfg.value_coef * v_err / n).reshape(-1, 1)
            policy.nets["critic"].backward(v_cache, dv, crit)
            clip_grad_norm(grads, cfg.max_grad_norm)
            params = flat_params(policy, names)
            new, _ = adam_update(params, grads, adam)
            new["log_std"] = np.maximum(new["log_std"], cfg.min_log_std)
            set_flat_params(policy, new)
            stats["policy_loss"].append(p_loss)
            stats["value_loss"].append(v_loss)
            stats["entropy"].append(ent)
            stats["kl"].append(kl)
            stats["clip_frac"].append(float(np.mean(np.abs(ratio - 1.0) > cfg.clip)))
            if kl > cfg.kl_guard:
                stop = True
                break
        if stop:
            stats["kl_stop"] = True
            break
    out = {k: (float(np.mean(v)) if isinstance(v, list) and v else v) for k, v in stats.items()}
    for k in ("policy_loss", "value_loss", "entropy", "kl", "clip_frac"):
        if isinstance(out[k], list):
            out[k] = float("nan")
    return out


def _critic_flat(obs):
    return {k: v.reshape(-1, v.shape[-1]) for k, v in obs.items()}


@dataclass
class TrainStats:
    iteration: int
    env_steps: int
    mean_reward: float
    episodes: int
    mean_return: float
    mean_distance: float
    mean_length: float
    col_hist: list
    policy_loss: float
    value_loss: float
    kl: float
    std: float
    wall: float


def train_ppo(env, policy, total_steps, cfg: PPOConfig = PPOConfig(), seed=0, log=None,
              normalizer=None):
    """Train ``policy`` in place for ``total_steps`` environment steps.

    ``log`` (if given) is called with a :class:`TrainStats` after every
    iteration.  Returns the list of stats and the value normalizer.
    """
    rng = np.random.default_rng(seed)
    collector = Collector(env, policy, rng, normalizer, cfg.gamma)
    adam = AdamState(lr=cfg.lr)
    history = []
    it = 0
    t0 = time.perf_counter()
    while collector.steps < total_steps:
        buf = collector.collect(cfg.segment)
        st = ppo_update(policy, buf, adam, cfg, collector.normalizer, rng)
        eps = buf.episodes
        n_ep = int(sum(len(e["ids"]) for e in eps))
        cat = (lambda k: np.concatenate([e[k] for e in eps])) if eps else None
        rec = TrainStats(
            iteration=it, env_steps=collector.steps, mean_reward=float(buf.rewards.mean()),
            episodes=n_ep,
            mean_return=float(cat("return").mean()) if n_ep else float("nan"),
            mean_distance=float(cat("distance").mean()) if n_ep else float("nan"),
            mean_length=float(cat("length").mean()) if n_ep else float("nan"),
            col_hist=np.bincount(env.col, minlength=env.n_cols).tolist(),
            policy_loss=st["policy_loss"], value_loss=st["value_loss"], kl=st["kl"],
            std=float(np.exp(policy.extras["log_std"]).mean()),
            wall=time.perf_counter() - t0)
        history.append(rec)
        if log is not None:
            log(rec)
        it += 1
    return history, collector.normalizer


def stats_row(rec: TrainStats):
    d = asdict(rec)
    d["col_hist"] = " ".join(str(c) for c in rec.col_hist)
    return d
