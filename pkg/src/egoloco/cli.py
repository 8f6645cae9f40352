"""Command-line entry point (``egoloco``)."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import terrain as terrain_mod
from .evaluate import compare_methods, eval_policy, load_results, save_results
from .experiment import (ConfigError, ExperimentConfig, RunDir, RunExists, StageFailed,
                         run_experiment, write_report)
from .policies import load_policy
from .theorem import check_bound, write_report as write_bound_report


def _config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _common(p, out_required=True):
    p.add_argument("--config", type=Path, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite an existing run")


def cmd_run(args):
    manifest = run_experiment(_config(args), args.out, force=args.force)
    print(f"{args.out}: {manifest['status']} (config {manifest['config_hash']})")


def cmd_train(args):
    cfg = _config(args)
    m = run_experiment(cfg, args.out, force=args.force, stages=("phase1",))
    print(f"teacher checkpoint: {args.out / 'checkpoints' / 'teacher.npz'} "
          f"(config {m['config_hash']})")


def cmd_distill(args):
    cfg = _config(args)
    if args.teacher:
        cfg.teacher_checkpoint = str(args.teacher)
    if not cfg.teacher_checkpoint:
        raise ConfigError("distill-phase2 needs --teacher or teacher_checkpoint in the config")
    m = run_experiment(cfg, args.out, force=args.force, stages=("phase1", "phase2"))
    print(f"student checkpoint: {args.out / 'checkpoints' / 'student.npz'} "
          f"(config {m['config_hash']})")


def cmd_eval(args):
    cfg = _config(args)
    policy = load_policy(args.checkpoint)
    run = RunDir(args.out, cfg, force=args.force, command="eval")
    run.manifest["checkpoint"] = str(args.checkpoint)
    kinds = args.kinds.split(",") if args.kinds else None
    name = args.name or Path(args.checkpoint).stem

    def stage():
        return {"results": eval_policy(policy, cfg.eval_config(kinds),
                                       policy_id=f"{name}@{cfg.hash()}",
                                       blind=cfg.baseline == "blind"),
                "artifacts": ["eval.json"]}

    results = run.stage("eval", stage)["results"]
    save_results(args.out / "eval.json", {name: {k: v.to_dict() for k, v in results.items()}})
    write_report(args.out / "report.md", cfg, {name: results}, run.manifest)
    run.close()
    for k, r in sorted(results.items()):
        print(f"{k}: displacement {r.displacement:.2f} m, time to fall {r.time_to_fall:.1f} s")


def cmd_compare(args):
    merged = {}
    for path in args.results:
        for method, res in load_results(path).items():
            if method in merged:
                method = f"{method}:{Path(path).parent.name}"
            merged[method] = res
    table, md = compare_methods(merged)
    args.out.mkdir(parents=True, exist_ok=True)
    report = args.out / "report.md"
    if report.exists() and not args.force:
        raise RunExists(f"{report} exists; use --force to overwrite")
    report.write_text(md)
    (args.out / "comparison.json").write_text(json.dumps(table, indent=2, sort_keys=True))
    print(md)


def cmd_verify_bound(args):
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "bound_report.json"
    if path.exists() and not args.force:
        raise RunExists(f"{path} exists; use --force to overwrite")
    seed = 0 if args.seed is None else args.seed
    reports, summary = check_bound(n_mdps=args.ensemble_size, eps_grid=tuple(args.eps),
                                   eta_grid=tuple(args.eta), gammas=tuple(args.gamma),
                                   seed=seed, max_states=args.max_states,
                                   max_actions=args.max_actions,
                                   dump_dir=args.out / "counterexamples")
    write_bound_report(path, reports, summary)
    print(json.dumps(summary, indent=2))
    return 0 if summary["violations"] == 0 else 1


def cmd_gen_terrain(args):
    args.out.mkdir(parents=True, exist_ok=True)
    kind = terrain_mod.TerrainKind.parse(args.kind)
    seed = 0 if args.seed is None else args.seed
    hf = terrain_mod.generate_terrain(kind, args.difficulty, seed=seed, length=args.length)
    if args.fractal:
        rng = np.random.default_rng(seed)
        hf = terrain_mod.add_fractal(hf, terrain_mod.fractal_amplitude(kind, rng, args.difficulty),
                                     seed=seed)
    stem = f"{kind.value}_d{args.difficulty:.2f}_s{seed}"
    path = args.out / (stem + (".csv" if args.format == "csv" else ".npz"))
    if path.exists() and not args.force:
        raise RunExists(f"{path} exists; use --force to overwrite")
    (terrain_mod.export_csv if args.format == "csv" else terrain_mod.export_binary)(hf, path)
    print(path)


def build_parser():
    ap = argparse.ArgumentParser(prog="egoloco", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="phase 1, phase 2 and evaluation in one go")
    _common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("train-phase1", help="train a scandot teacher with PPO")
    _common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("distill-phase2", help="distil a teacher checkpoint into a depth student")
    _common(p)
    p.add_argument("--teacher", type=Path, help="teacher checkpoint (.npz)")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint on fixed courses")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--kinds", help="comma-separated terrain kinds (default: config grid)")
    p.add_argument("--name", help="method name used in the results file")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("compare", help="ranking table from eval.json files")
    p.add_argument("results", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("verify-bound", help="check the return-gap bound on random MDPs")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--config", type=Path, help="unused; accepted for uniformity")
    p.add_argument("--ensemble-size", type=int, default=200)
    p.add_argument("--gamma", type=float, nargs="+", default=[0.9, 0.99])
    p.add_argument("--eps", type=float, nargs="+", default=[0.0, 0.01, 0.1])
    p.add_argument("--eta", type=float, nargs="+", default=[0.0, 0.05, 0.1])
    p.add_argument("--max-states", type=int, default=20)
    p.add_argument("--max-actions", type=int, default=11)
    p.set_defaults(fn=cmd_verify_bound)

    p = sub.add_parser("gen-terrain", help="write a heightfield to CSV or .npz")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--config", type=Path, help="unused; accepted for uniformity")
    p.add_argument("--kind", default="stairs_up")
    p.add_argument("--difficulty", type=float, default=0.5)
    p.add_argument("--length", type=float, default=terrain_mod.SUBTERRAIN_LENGTH)
    p.add_argument("--format", choices=("csv", "npz"), default="csv")
    p.add_argument("--fractal", action="store_true", help="add fractal roughness")
    p.set_defaults(fn=cmd_gen_terrain)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        rc = args.fn(args)
    except (ConfigError, RunExists, StageFailed, ValueError, FileNotFoundError) as e:
        print(f"egoloco {args.command}: {e}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
