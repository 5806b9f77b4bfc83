"""Command-line interface.

Every subcommand takes --config <file>, --seed <int>, and --out <dir>; results
are written as CSV/JSON under the output directory, with optional matplotlib
figures next to them when --plots is given. Exit codes: 0 on success, 1 on a
contract violation, 2 on a configuration or usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import manifold_export, timing_bench, write_manifold_csv
from .config import Config, adapt_checkpoints, describe, make_env, make_lexicon
from .env import generate_dataset, save_dataset
from .errors import ConfigError, ContractError, DiscgenError
from .evaluate import few_shot_adapt, leakage_eval, paraphrase_eval, rollout_eval
from .models import GeneratorModel
from .runs import dataset_for, load_model_file, new_model
from .trainer import train


def _load_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config.default()
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(cfg: Config, args):
    if not args.model:
        raise ConfigError("this subcommand needs --model <checkpoint>")
    return load_model_file(cfg, args.model)


def _require_generator(model):
    if not isinstance(model, GeneratorModel):
        raise ContractError(f"model kind {model.kind!r} does not generate policies")
    return model


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    lex = make_lexicon(cfg)
    ds = generate_dataset(make_env(cfg), lex, n_demos=cfg["data.n_demos"],
                          seed=args.seed)
    path = out / "dataset.jsonl"
    save_dataset(ds, path)
    print(f"dataset: {len(ds)} transitions, {len(ds.tasks)} tasks, "
          f"hash={ds.config_hash} -> {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    lex = make_lexicon(cfg)
    ds = dataset_for(cfg, lex, cfg["env.layout_mode"])
    model = new_model(cfg, lex, cfg["train.model"], args.seed)
    tpb = cfg["train.tasks_per_batch"] or None
    result = train(model, ds, lex, steps=cfg["train.steps"], lr=cfg["train.lr"],
                   batch_size=cfg["train.batch_size"], seed=args.seed,
                   weight_decay=cfg["train.weight_decay"],
                   paraphrase=cfg["train.paraphrase"], tasks_per_batch=tpb,
                   out_dir=out, checkpoint_every=cfg["train.checkpoint_every"],
                   grad_clip=cfg["train.grad_clip"] or None)
    summary = {
        "kind": model.kind, "seed": args.seed, "steps": result.steps,
        "final_loss": float(result.losses[-min(100, result.steps):].mean()),
        "wall_time_s": result.wall_time, "n_params": model.n_params(),
        "config_hash": cfg.content_hash(),
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    if args.plots:
        from .plots import plot_loss_curve
        plot_loss_curve(result.losses, result.lrs, out / "loss_curve.png",
                        title=f"{model.kind} (seed {args.seed})")
    print(f"trained {model.kind}: final loss {summary['final_loss']:.6g} "
          f"in {result.wall_time:.1f}s -> {out / 'final.bin'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model, lex = _load_model(cfg, args)
    report = rollout_eval(model, make_env(cfg), lex,
                          n_episodes=cfg["eval.n_episodes"],
                          split=cfg["eval.split"], seed=args.seed)
    report.to_csv(out / "eval.csv", config_hash=cfg.content_hash())
    report.to_json(out / "eval.json")
    if args.plots:
        from .plots import plot_confusion
        plot_confusion(report, out / "confusion.png")
    print(f"overall success: {report.overall:.3f} "
          f"(split={report.split}, {report.n_episodes} episodes/task)")
    return 0


def cmd_leakage(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model, lex = _load_model(cfg, args)
    report = leakage_eval(model, lex, seed=args.seed,
                          n_episodes=cfg["eval.n_episodes"],
                          base_cfg=make_env(cfg))
    report.to_csv(out / "leakage.csv", config_hash=cfg.content_hash())
    report.to_json(out / "leakage.json")
    if args.plots:
        from .plots import plot_confusion
        plot_confusion(report, out / "leakage_confusion.png")
    print(f"leakage score: {report.leakage_score():.4f} "
          f"(success on decorrelated resets: {report.overall:.3f})")
    return 0


def cmd_paraphrase(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model, lex = _load_model(cfg, args)
    r_train, r_held, gap = paraphrase_eval(model, make_env(cfg), lex,
                                           seed=args.seed,
                                           n_episodes=cfg["eval.n_episodes"])
    r_train.to_csv(out / "paraphrase_train.csv", config_hash=cfg.content_hash())
    r_held.to_csv(out / "paraphrase_heldout.csv", config_hash=cfg.content_hash())
    with open(out / "paraphrase.json", "w") as f:
        json.dump({"train": r_train.overall, "heldout": r_held.overall,
                   "gap": gap}, f, indent=2)
    print(f"train {r_train.overall:.3f} vs heldout {r_held.overall:.3f} "
          f"(gap {gap:+.3f})")
    return 0


def cmd_adapt(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model, lex = _load_model(cfg, args)
    _require_generator(model)
    env = make_env(cfg)
    task = (args.task_object, args.task_container)
    results = {}
    inits = ("hypernet", "random") if args.both_inits else (cfg["adapt.init"],)
    for init in inits:
        results[init] = few_shot_adapt(
            model, lex, env, task, k_demos=cfg["adapt.k"],
            steps=cfg["adapt.steps"], eta=cfg["adapt.eta"],
            checkpoints=adapt_checkpoints(cfg), seed=args.seed, init=init)
    with open(out / "adapt.csv", "w", newline="") as f:
        f.write(f"# config_hash={cfg.content_hash()} seed={args.seed} "
                f"task={task[0]}_{task[1]} k={cfg['adapt.k']}\n")
        w = csv.writer(f)
        w.writerow(["init", "step", "val_loss", "success"])
        for init, res in results.items():
            for s, vl, sc in zip(res.checkpoints, res.val_losses, res.successes):
                w.writerow([init, s, f"{vl:.10g}", f"{sc:.6g}"])
    if args.plots:
        from .plots import plot_adaptation
        plot_adaptation(results, out / "adaptation.png")
    for init, res in results.items():
        print(f"{init}: val loss {res.val_losses[0]:.4g} -> {res.val_losses[-1]:.4g}, "
              f"success {res.successes[0]:.2f} -> {res.successes[-1]:.2f}")
    return 0


def cmd_manifold(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model, lex = _load_model(cfg, args)
    _require_generator(model)
    result = manifold_export(model, lex, seed=args.seed)
    write_manifold_csv(result, out / "manifold_cosine.csv",
                       out / "manifold_coords.csv",
                       config_hash=cfg.content_hash(), seed=args.seed)
    if args.plots:
        from .plots import plot_manifold
        plot_manifold(result, out / "manifold.png")
    stats = result.pair_stats()
    print("mean cosine: " + ", ".join(f"{k}={v:.4f}" for k, v in stats.items()))
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model, lex = _load_model(cfg, args)
    _require_generator(model)
    baseline = None
    if args.baseline:
        baseline, _ = load_model_file(cfg, args.baseline)
    result = timing_bench(model, lex, n_trials=cfg["bench.n_trials"],
                          warmup=cfg["bench.warmup"], seed=args.seed,
                          baseline=baseline)
    with open(out / "bench.json", "w") as f:
        json.dump(result, f, indent=2)
    print(f"weight generation {result['weight_gen_ms']:.3f} ms, "
          f"target step {result['target_step_ms']:.5f} ms "
          f"(ratio {result['gen_over_step_ratio']:.1f}x)")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all
    out = _out_dir(args)
    report = run_all(seeds=args.trials)
    with open(out / "gradcheck.json", "w") as f:
        json.dump(report, f, indent=2)
    for name, err in sorted(report["ops"].items()):
        print(f"{name:24s} max rel err {err:.3e}")
    print(f"{'pipeline':24s} max rel err {report['pipeline']:.3e}")
    print("PASS" if report["pass"] else "FAIL")
    if not report["pass"]:
        raise ContractError("finite-difference check failed")
    return 0


def cmd_config(args) -> int:
    print(describe())
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="discgen",
                                description="instruction-conditioned policy "
                                            "generation benchmark")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=False):
        sp.add_argument("--config", help="config file (key = value lines)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--plots", action="store_true",
                        help="also render figures next to the CSV output")
        if model:
            sp.add_argument("--model", help="model checkpoint (.bin)")
        return sp

    common(sub.add_parser("gen-data", help="generate the expert demo dataset")
           ).set_defaults(fn=cmd_gen_data)
    common(sub.add_parser("train", help="train the configured model kind")
           ).set_defaults(fn=cmd_train)
    common(sub.add_parser("eval", help="rollout success evaluation"),
           model=True).set_defaults(fn=cmd_eval)
    common(sub.add_parser("leakage", help="confusion on decorrelated resets"),
           model=True).set_defaults(fn=cmd_leakage)
    common(sub.add_parser("paraphrase", help="train vs held-out surface forms"),
           model=True).set_defaults(fn=cmd_paraphrase)
    sp = common(sub.add_parser("adapt", help="few-shot adaptation to one task"),
                model=True)
    sp.add_argument("--task-object", type=int, default=0)
    sp.add_argument("--task-container", type=int, default=0)
    sp.add_argument("--both-inits", action="store_true",
                    help="run hypernet and random initializations")
    sp.set_defaults(fn=cmd_adapt)
    common(sub.add_parser("manifold", help="generated-policy similarity structure"),
           model=True).set_defaults(fn=cmd_manifold)
    sp = common(sub.add_parser("bench", help="generation vs inference timing"),
                model=True)
    sp.add_argument("--baseline", help="entangled-baseline checkpoint to time")
    sp.set_defaults(fn=cmd_bench)
    sp = common(sub.add_parser("gradcheck", help="finite-difference verification"))
    sp.add_argument("--trials", type=int, default=20,
                    help="random shape draws per op")
    sp.set_defaults(fn=cmd_gradcheck)
    sub.add_parser("config", help="print all config keys with defaults"
                   ).set_defaults(fn=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DiscgenError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
