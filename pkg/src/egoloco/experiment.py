"""Batch experiment runner: config parsing, the phase-1 -> phase-2 -> eval
pipeline, artifact directory layout and the rerun guard."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envs import EnvConfig, LocoEnv
from .evaluate import EPISODE_CAP_S, EvalConfig, eval_policy, save_results
from .phase1 import PPOConfig, train_ppo
from .phase2 import distill, make_student
from .policies import load_policy, make_policy, params_hash, save_policy
from .rewards import RewardScales
from .sim import DR_RANGES
from .terrain import TerrainKind

ARCHS = ("monolithic", "rma")
BASELINES = ("none", "blind", "noisy")

METRIC_COLUMNS = (
    "stage", "iteration", "env_steps", "mean_reward", "episodes", "mean_return",
    "mean_distance", "mean_length", "col_hist", "policy_loss", "value_loss", "kl", "std",
    "loss", "action_mse", "gamma_mse", "z_mse", "eta_max", "eta_p95",
)


class ConfigError(ValueError):
    """Raised for an experiment config that fails validation."""


class RunExists(RuntimeError):
    """The output directory already holds a run; pass ``force`` to overwrite."""


class StageFailed(RuntimeError):
    pass


# -- config -------------------------------------------------------------------

@dataclass
class GridConfig:
    kinds: tuple = ("flat", "stairs_up")
    cols: int = 10


@dataclass
class NetConfig:
    hidden: tuple = (128, 64)
    gru_size: int = 64
    latent: int = 32
    z_dim: int = 8
    init_std: float = 0.1


@dataclass
class Phase1Config:
    steps: int = 2_000_000
    n_envs: int = 256
    episode_s: float = 20.0
    checkpoint_every: int = 50
    ppo: dict = field(default_factory=dict)


@dataclass
class Phase2Config:
    iterations: int = 300
    n_envs: int = 64
    lr: float = 5e-4
    truncation: int = 24
    obs_log_steps: int = 50


@dataclass
class EvalSection:
    columns: tuple = (0, 3, 6, 9)
    episodes_per_column: int = 8
    cap_s: float = EPISODE_CAP_S
    v_cmd: float = 0.35


@dataclass
class ExperimentConfig:
    name: str = "run"
    seed: int = 0
    architecture: str = "monolithic"
    baseline: str = "none"
    grid: GridConfig = field(default_factory=GridConfig)
    net: NetConfig = field(default_factory=NetConfig)
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    eval: EvalSection = field(default_factory=EvalSection)
    reward_scales: dict = field(default_factory=dict)
    randomization: dict = field(default_factory=dict)
    noise_sigma: dict = field(default_factory=dict)
    teacher_checkpoint: str = ""
    verify_bound: bool = False

    # -- (de)serialization --

    @classmethod
    def from_dict(cls, doc):
        cfg = _build(cls, doc, "config")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: not valid JSON ({e})") from None
        return cls.from_dict(doc)

    def to_dict(self):
        return _plain(asdict(self))

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self):
        if self.architecture not in ARCHS:
            raise ConfigError(f"architecture must be one of {ARCHS}")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}")
        if self.baseline == "noisy" and self.architecture != "monolithic":
            raise ConfigError("the noisy-elevation baseline is defined for the monolithic policy")
        if not self.grid.kinds:
            raise ConfigError("grid.kinds is empty")
        for k in self.grid.kinds:
            try:
                TerrainKind.parse(k)
            except ValueError as e:
                raise ConfigError(str(e)) from None
        if self.grid.cols < 1:
            raise ConfigError("grid.cols must be positive")
        if any(c < 0 or c >= self.grid.cols for c in self.eval.columns):
            raise ConfigError("eval.columns must index the grid columns")
        for name, val in (("phase1.steps", self.phase1.steps),
                          ("phase1.n_envs", self.phase1.n_envs),
                          ("phase2.n_envs", self.phase2.n_envs),
                          ("eval.episodes_per_column", self.eval.episodes_per_column)):
            if val <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.phase2.iterations < 0:
            raise ConfigError("phase2.iterations must be non-negative")
        if self.eval.cap_s <= 0:
            raise ConfigError("eval.cap_s must be positive")
        unknown = set(self.phase1.ppo) - {f.name for f in dataclasses.fields(PPOConfig)}
        if unknown:
            raise ConfigError(f"unknown PPO settings: {sorted(unknown)}")
        unknown = set(self.reward_scales) - {f.name for f in dataclasses.fields(RewardScales)}
        if unknown:
            raise ConfigError(f"unknown reward scales: {sorted(unknown)}")
        for k, v in self.randomization.items():
            if k not in DR_RANGES:
                raise ConfigError(f"unknown randomization parameter {k!r}")
            if len(v) != 2 or v[0] > v[1]:
                raise ConfigError(f"randomization.{k} must be [lo, hi] with lo <= hi")
        for k, v in self.noise_sigma.items():
            if float(v) < 0:
                raise ConfigError(f"noise_sigma.{k} must be non-negative")

    @classmethod
    def smoke(cls, **kw):
        """Tiny networks, two terrains and a 50k-step phase-1 budget."""
        cfg = cls(name="smoke",
                  net=NetConfig(hidden=(32, 32), gru_size=32, latent=16, z_dim=4),
                  phase1=Phase1Config(steps=50_000, n_envs=64, checkpoint_every=10),
                  phase2=Phase2Config(iterations=20, n_envs=32),
                  eval=EvalSection(columns=(0, 5), episodes_per_column=4, cap_s=20.0))
        for k, v in kw.items():
            setattr(cfg, k, v)
        cfg.validate()
        return cfg

    # -- derived objects --

    def seeds(self):
        s = self.seed
        return {"terrain": s, "policy_init": s, "phase1": s, "phase2_env": s + 1,
                "student_init": s + 2, "eval": s + 3}

    def env_config(self, **kw):
        base = EnvConfig(kinds=tuple(self.grid.kinds), cols=self.grid.cols,
                         terrain_seed=self.seed, blind=self.baseline == "blind",
                         scales=RewardScales(**self.reward_scales),
                         dr_ranges={k: tuple(v) for k, v in self.randomization.items()} or None,
                         noise_sigma=dict(self.noise_sigma) or None)
        return base.replace(**kw)

    def ppo_config(self):
        return PPOConfig(**self.phase1.ppo)

    def student_key(self):
        return "noisy_scandots" if self.baseline == "noisy" else "depth"

    def eval_config(self, kinds=None):
        e = self.eval
        return EvalConfig(kinds=tuple(kinds or self.grid.kinds), columns=tuple(e.columns),
                          grid_cols=self.grid.cols, episodes_per_column=e.episodes_per_column,
                          cap_s=e.cap_s, v_cmd=e.v_cmd, seed=self.seeds()["eval"])


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    for name, val in doc.items():
        default = getattr(cls(), name)
        path = f"{where}.{name}"
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), val, path)
        elif isinstance(default, tuple):
            if not isinstance(val, list):
                raise ConfigError(f"{path}: expected a list")
            kw[name] = tuple(val)
        elif isinstance(default, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{path}: expected true/false")
            kw[name] = val
        elif isinstance(default, int):
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"{path}: expected an integer")
            kw[name] = val
        elif isinstance(default, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{path}: expected a number")
            kw[name] = float(val)
        elif isinstance(default, str):
            if not isinstance(val, str):
                raise ConfigError(f"{path}: expected a string")
            kw[name] = val
        elif isinstance(default, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{path}: expected an object")
            kw[name] = val
        else:
            kw[name] = val
    return cls(**kw)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


# -- artifacts ------------------------------------------------------------------

class RunDir:
    """Owns an output directory: manifest, metrics CSV and checkpoints."""

    def __init__(self, out, cfg: ExperimentConfig, force=False, command="run"):
        self.path = Path(out)
        self.cfg = cfg
        manifest = self.path / "manifest.json"
        if manifest.exists() and not force:
            old = json.loads(manifest.read_text())
            same = old.get("config_hash") == cfg.hash()
            raise RunExists(
                f"{self.path} already holds a run ({'same' if same else 'different'} config "
                f"hash {old.get('config_hash')}); use --force to overwrite")
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "checkpoints").mkdir(exist_ok=True)
        for stale in ("metrics.csv", "report.md", "eval.json"):
            (self.path / stale).unlink(missing_ok=True)
        self.manifest = {"command": command, "config": cfg.to_dict(),
                         "config_hash": cfg.hash(), "seeds": cfg.seeds(),
                         "eval_defaults": {"cap_s": cfg.eval.cap_s,
                                           "episodes_per_column": cfg.eval.episodes_per_column},
                         "stages": {}, "status": "running"}
        self.write_manifest()
        self._metrics = open(self.path / "metrics.csv", "w", newline="")
        self._writer = csv.DictWriter(self._metrics, fieldnames=METRIC_COLUMNS,
                                      extrasaction="ignore")
        self._writer.writeheader()

    def write_manifest(self):
        with open(self.path / "manifest.json", "w") as fh:
            json.dump(_plain(self.manifest), fh, indent=2, sort_keys=True)

    def metric(self, row):
        clean = {}
        for k in METRIC_COLUMNS:
            v = row.get(k, "")
            if isinstance(v, float):
                v = repr(v)
            elif isinstance(v, (list, tuple)):
                v = " ".join(str(x) for x in v)
            clean[k] = v
        self._writer.writerow(clean)
        self._metrics.flush()

    def stage(self, name, fn):
        """Run ``fn()``; record status, duration and any error in the manifest."""
        rec = {"status": "running"}
        self.manifest["stages"][name] = rec
        self.write_manifest()
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as e:
            rec.update(status="failed", error=f"{type(e).__name__}: {e}",
                       traceback=traceback.format_exc(), seconds=time.perf_counter() - t0)
            self.manifest["status"] = "failed"
            self.write_manifest()
            raise StageFailed(f"stage {name} failed: {e}") from e
        rec.update(status="ok", seconds=time.perf_counter() - t0)
        if isinstance(result, dict) and "artifacts" in result:
            rec["artifacts"] = result["artifacts"]
        self.write_manifest()
        return result

    def close(self, status="complete"):
        self.manifest["status"] = status
        self.write_manifest()
        self._metrics.close()


# -- stages ---------------------------------------------------------------------

def train_teacher(cfg: ExperimentConfig, run: RunDir | None = None):
    seeds = cfg.seeds()
    env = LocoEnv(cfg.env_config(n_envs=cfg.phase1.n_envs, episode_s=cfg.phase1.episode_s),
                  seed=seeds["phase1"])
    n = cfg.net
    kw = dict(hidden=n.hidden, latent=n.latent, init_std=n.init_std)
    kw.update(gru_size=n.gru_size) if cfg.architecture == "monolithic" else kw.update(z_dim=n.z_dim)
    policy = make_policy(cfg.architecture, np.random.default_rng(seeds["policy_init"]), **kw)
    artifacts = []

    def log(rec):
        if run is None:
            return
        row = asdict(rec)
        row["stage"] = "phase1"
        run.metric(row)
        every = cfg.phase1.checkpoint_every
        if every and (rec.iteration + 1) % every == 0:
            p = run.path / "checkpoints" / f"teacher_{rec.iteration + 1:05d}.npz"
            save_policy(p, policy)
            artifacts.append(str(p.relative_to(run.path)))

    history, _ = train_ppo(env, policy, cfg.phase1.steps, cfg.ppo_config(),
                           seed=seeds["phase1"], log=log)
    if run is not None:
        p = run.path / "checkpoints" / "teacher.npz"
        save_policy(p, policy)
        artifacts.append(str(p.relative_to(run.path)))
    return {"policy": policy, "history": history, "artifacts": artifacts}


def distill_student(cfg: ExperimentConfig, teacher, run: RunDir | None = None):
    seeds = cfg.seeds()
    key = cfg.student_key()
    env = LocoEnv(cfg.env_config(n_envs=cfg.phase2.n_envs, depth=key == "depth",
                                 noisy_elevation=key == "noisy_scandots",
                                 init_max_col=cfg.grid.cols - 1),
                  seed=seeds["phase2_env"])
    student = make_student(teacher, np.random.default_rng(seeds["student_init"]), key)
    before = params_hash(teacher)

    def log(s):
        if run is None:
            return
        row = dict(s)
        row["stage"] = "phase2"
        row["iteration"] = s["iteration"]
        row["env_steps"] = s["env_steps"]
        run.metric(row)

    history = distill(teacher, student, env, cfg.phase2.iterations, lr=cfg.phase2.lr,
                      T=cfg.phase2.truncation, log=log)
    if params_hash(teacher) != before:
        raise StageFailed("teacher parameters changed during distillation")
    artifacts = []
    if run is not None:
        p = run.path / "checkpoints" / "student.npz"
        save_policy(p, student)
        artifacts.append(str(p.relative_to(run.path)))
        artifacts.append(log_observations(cfg, student, run.path / "obs_log.npz"))
    return {"policy": student, "history": history, "artifacts": artifacts}


def log_observations(cfg: ExperimentConfig, policy, path):
    """Record the perception channels a deployed policy sees for a short rollout."""
    key = getattr(policy, "encoder_key", "scandots")
    env = LocoEnv(cfg.env_config(n_envs=4, depth=key == "depth",
                                 noisy_elevation=key == "noisy_scandots"),
                  seed=cfg.seeds()["eval"])
    obs = env.reset()
    h = policy.initial_state(env.n)
    logged = {}
    for _ in range(cfg.phase2.obs_log_steps):
        for k in ("scandots", "depth", "noisy_scandots"):
            if k in obs:
                logged.setdefault(k, []).append(obs[k].copy())
        a, h = policy.act({k: v for k, v in obs.items() if k != "final_obs"}, h)
        obs = env.step(a).obs
    np.savez(path, **{k: np.stack(v) for k, v in logged.items()})
    return Path(path).name


def evaluate_stage(cfg: ExperimentConfig, policies, run: RunDir | None = None):
    blind = cfg.baseline == "blind"
    results = {name: eval_policy(pol, cfg.eval_config(), policy_id=f"{name}@{cfg.hash()}",
                                 blind=blind)
               for name, pol in policies.items()}
    if run is not None:
        save_results(run.path / "eval.json",
                     {name: {k: v.to_dict() for k, v in r.items()}
                      for name, r in results.items()})
    return {"results": results, "artifacts": ["eval.json"] if run is not None else []}


def write_report(path, cfg: ExperimentConfig, results, manifest):
    """Markdown summary; every number carries the config hash and seed it came from."""
    lines = [f"# {cfg.name}", "",
             f"config hash `{manifest['config_hash']}`, seed {cfg.seed}, "
             f"architecture {cfg.architecture}, baseline {cfg.baseline}", ""]
    for name, res in results.items():
        lines += [f"## {name}", "",
                  "| Terrain | displacement (m) | time to fall (s) | success |",
                  "|---|---|---|---|"]
        for kind, r in sorted(res.items()):
            lines.append(f"| {kind} | {r.displacement:.2f} | {r.time_to_fall:.2f} | "
                         f"{r.success_rate:.2f} |")
        lines.append("")
    if "bound" in manifest:
        b = manifest["bound"]
        lines += ["## Bound check", "", f"violations: {b['violations']} of {b['instances']}", ""]
    Path(path).write_text("\n".join(lines))


def run_experiment(cfg: ExperimentConfig, out, force=False, stages=("phase1", "phase2", "eval")):
    """Full pipeline into ``out``.  Returns the manifest dict."""
    cfg.validate()
    run = RunDir(out, cfg, force=force, command="run")
    teacher = student = None
    results = {}
    try:
        if "phase1" in stages:
            if cfg.teacher_checkpoint:
                teacher = run.stage("phase1", lambda: {
                    "policy": load_policy(cfg.teacher_checkpoint),
                    "artifacts": [cfg.teacher_checkpoint]})["policy"]
            else:
                teacher = run.stage("phase1", lambda: train_teacher(cfg, run))["policy"]
        if "phase2" in stages:
            if teacher is None:
                raise StageFailed("phase2 needs a teacher (run phase1 or set teacher_checkpoint)")
            student = run.stage("phase2", lambda: distill_student(cfg, teacher, run))["policy"]
        if "eval" in stages:
            pols = {k: v for k, v in (("teacher", teacher), ("student", student)) if v is not None}
            results = run.stage("eval", lambda: evaluate_stage(cfg, pols, run))["results"]
        if cfg.verify_bound:
            from .theorem import check_bound, write_report as write_bound
            reports, summary = run.stage("bound", lambda: check_bound())
            write_bound(run.path / "bound_report.json", reports, summary)
            run.manifest["bound"] = summary
        write_report(run.path / "report.md", cfg, results, run.manifest)
    except StageFailed:
        run.close("failed")
        raise
    run.close()
    return run.manifest
