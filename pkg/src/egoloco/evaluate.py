"""Course evaluation (mean forward displacement and time to fall) and method comparison."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .envs import EnvConfig, LocoEnv
from .phase2 import _pick
from .sim import CONTROL_HZ
from .terrain import LEAD_IN, TerrainKind

EPISODE_CAP_S = 100.0


@dataclass
class EvalConfig:
    kinds: tuple = ("flat",)
    columns: tuple = (0, 3, 6, 9)
    grid_cols: int = 10
    episodes_per_column: int = 8
    cap_s: float = EPISODE_CAP_S
    course_length: float = 0.0       # 0 -> long enough for the fastest command
    randomize: bool = True
    pushes: bool = True
    obs_noise: bool = True
    v_cmd: float = 0.35
    seed: int = 0

    def difficulties(self):
        return [c / (self.grid_cols - 1) for c in self.columns]

    def length(self):
        return self.course_length or float(np.ceil(LEAD_IN + 1.0 + 0.75 * self.cap_s))


@dataclass
class EvalResult:
    kind: str
    displacement: float
    time_to_fall: float
    success_rate: float
    episodes: int
    seed: int
    policy_id: str
    per_column: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _needs(policy):
    key = getattr(policy, "encoder_key", "scandots")
    return {"depth": key == "depth", "noisy": key == "noisy_scandots"}


def run_courses(policy, cfg: EvalConfig, blind=False):
    """Roll out one deterministic episode per environment on every (kind, column) course.

    Returns per-episode arrays: kind row, column index, displacement, time to
    fall (the cap if the walker never fell) and success flag.
    """
    need = _needs(policy)
    n_cells = len(cfg.kinds) * len(cfg.columns)
    env_cfg = EnvConfig(
        n_envs=n_cells * cfg.episodes_per_column, kinds=tuple(cfg.kinds),
        terrain_seed=cfg.seed, episode_s=cfg.cap_s, curriculum=False,
        randomize=cfg.randomize, pushes=cfg.pushes, obs_noise=cfg.obs_noise,
        depth=need["depth"], noisy_elevation=need["noisy"], blind=blind,
        course_length=cfg.length(), course_difficulty=tuple(cfg.difficulties()),
        end_margin=0.5)
    env = LocoEnv(env_cfg, seed=cfg.seed)
    obs = env.reset()
    env.v_cmd[:] = cfg.v_cmd
    obs["command"][:] = cfg.v_cmd
    n = env.n
    h = policy.initial_state(n)
    active = np.ones(n, dtype=bool)
    disp = np.zeros(n)
    ttf = np.full(n, cfg.cap_s)
    success = np.zeros(n, dtype=bool)
    for _ in range(env.max_steps):
        a, h = policy.act(_pick(obs), h)
        res = env.step(np.where(active[:, None], a, 0.0))
        if "episodes" in res.info:
            ep = res.info["episodes"]
            ids = ep["ids"]
            first = active[ids]
            ids_f = ids[first]
            disp[ids_f] = ep["distance"][first]
            term = ep["terminated"][first]
            ttf[ids_f[term]] = ep["length"][first][term] / CONTROL_HZ
            success[ids_f[~term]] = res.info["reached_end"][ids_f[~term]]
            active[ids_f] = False
            h[ids] = 0.0
        env.v_cmd[:] = cfg.v_cmd
        obs = res.obs
        obs["command"][:] = cfg.v_cmd
        if not active.any():
            break
    return env.row.copy(), env.col.copy(), disp, ttf, success


def episode_returns(policy, env_cfg: EnvConfig, seed=0, deterministic=False):
    """Return of the first episode of every environment under ``policy``.

    Actions are sampled from the policy's Gaussian unless ``deterministic``.
    """
    env = LocoEnv(env_cfg, seed=seed)
    rng = np.random.default_rng(seed)
    obs = env.reset()
    h = policy.initial_state(env.n)
    std = np.exp(policy.extras["log_std"])
    acc = np.zeros(env.n)
    out = np.full(env.n, np.nan)
    active = np.ones(env.n, dtype=bool)
    for _ in range(env.max_steps):
        mean, h = policy.act(_pick(obs), h)
        a = mean if deterministic else mean + std * rng.standard_normal(mean.shape)
        res = env.step(a)
        acc += np.where(active, res.reward, 0.0)
        done = active & (res.terminated | res.truncated)
        out[done] = acc[done]
        active &= ~done
        obs = res.obs
        if not active.any():
            break
    return out


def eval_policy(policy, cfg: EvalConfig, policy_id="policy", blind=False):
    """Per-terrain :class:`EvalResult` averaged over the configured columns."""
    rows, cols, disp, ttf, success = run_courses(policy, cfg, blind=blind)
    out = {}
    for r, kind in enumerate(cfg.kinds):
        sel = rows == r
        per_col = {}
        for c, col in enumerate(cfg.columns):
            s = sel & (cols == c)
            per_col[str(col)] = {"displacement": float(disp[s].mean()),
                                 "time_to_fall": float(ttf[s].mean()),
                                 "success_rate": float(success[s].mean())}
        name = TerrainKind.parse(kind).value
        out[name] = EvalResult(name, float(disp[sel].mean()), float(ttf[sel].mean()),
                               float(success[sel].mean()), int(sel.sum()), cfg.seed,
                               policy_id, per_col)
    return out


def compare_methods(results):
    """Ranking table across methods.

    ``results`` maps method name -> {terrain: EvalResult or dict}.  All methods
    must cover the same terrains.  Returns ``(table, markdown)`` where
    ``table`` carries per-terrain values, per-method totals and ranks (ties
    share the better rank).
    """
    if len(results) < 2:
        raise ValueError("comparison needs at least two methods")
    methods = list(results)
    terrains = sorted(results[methods[0]])
    for m in methods:
        if sorted(results[m]) != terrains:
            raise ValueError(f"method {m!r} was evaluated on a different terrain set")

    def get(m, t, key):
        r = results[m][t]
        return float(r[key] if isinstance(r, dict) else getattr(r, key))

    table = {"terrains": terrains, "methods": methods, "rows": {}, "totals": {}, "rank": {}}
    for t in terrains:
        table["rows"][t] = {m: {"displacement": get(m, t, "displacement"),
                                "time_to_fall": get(m, t, "time_to_fall")} for m in methods}
    for m in methods:
        table["totals"][m] = {
            "displacement": sum(table["rows"][t][m]["displacement"] for t in terrains),
            "time_to_fall": sum(table["rows"][t][m]["time_to_fall"] for t in terrains)}
    keyed = {m: (table["totals"][m]["displacement"], table["totals"][m]["time_to_fall"])
             for m in methods}
    for m in methods:
        table["rank"][m] = 1 + sum(keyed[o] > keyed[m] for o in methods)
    return table, render_markdown(table)


def render_markdown(table):
    methods, terrains = table["methods"], table["terrains"]
    head = ("| Terrain | " + " | ".join(f"{m} disp (m)" for m in methods) + " | "
            + " | ".join(f"{m} MTTF (s)" for m in methods) + " |")
    sep = "|" + "---|" * (1 + 2 * len(methods))
    lines = [head, sep]
    for t in terrains + ["Total"]:
        src = table["totals"] if t == "Total" else table["rows"][t]
        d = " | ".join(f"{src[m]['displacement']:.2f}" for m in methods)
        f = " | ".join(f"{src[m]['time_to_fall']:.2f}" for m in methods)
        lines.append(f"| {t} | {d} | {f} |")
    lines.append("")
    lines.append("Rank: " + ", ".join(f"{m} #{table['rank'][m]}" for m in methods))
    return "\n".join(lines) + "\n"


def save_results(path, results):
    doc = {k: (v.to_dict() if isinstance(v, EvalResult) else v) for k, v in results.items()}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def load_results(path):
    with open(path) as fh:
        return json.load(fh)
