"""Command-line entry point.

Subcommands: train, eval, simulate, dataset, compare-model, export.
Log verbosity comes from the WAVEDAMP_LOG environment variable
(debug/info/warning; default warning).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import harness
from .config import ExperimentConfig, load_experiment


def _setup_logging() -> None:
    level = os.environ.get("WAVEDAMP_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_experiment(args.config)
    else:
        cfg = ExperimentConfig()
        cfg.validate()
    if getattr(args, "seed", None) is not None:
        cfg.run.seeds = [args.seed]
    if getattr(args, "variant", None):
        cfg.agent.variant = args.variant
    if getattr(args, "out", None):
        cfg.run.out_dir = args.out
    if getattr(args, "iterations", None):
        cfg.run.iterations = args.iterations
    if getattr(args, "workers", None):
        cfg.run.workers = args.workers
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    try:
        os.makedirs(cfg.run.out_dir, exist_ok=True)
        probe = os.path.join(cfg.run.out_dir, ".write-probe")
        with open(probe, "w") as fh:
            fh.write("ok")
        os.remove(probe)
    except OSError as exc:
        print(f"error: output directory not writable: {exc}", file=sys.stderr)
        return 2
    paths = harness.run(cfg)
    print(f"wrote {len(paths['seed_files'])} per-seed metrics files")
    print(f"aggregate: {paths['aggregate']}")
    for seed, ckpt in paths["checkpoints"].items():
        print(f"checkpoint seed {seed}: {ckpt}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    source = args.checkpoint or args.baseline
    summary = harness.evaluate(source, cfg.agent, episodes=args.episodes,
                               seed=cfg.run.seeds[0])
    print(json.dumps(summary, indent=2, sort_keys=True))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    summary = harness.evaluate(args.controller, cfg.agent,
                               episodes=args.episodes, seed=cfg.run.seeds[0])
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_dataset(args) -> int:
    from .controllers import IdmParams

    idm = IdmParams()
    if args.noise is not None:
        idm.noise_std = args.noise
    ds = harness.generate_cf_dataset(n_target=args.samples, idm=idm, seed=args.seed)
    harness.save_cf_dataset(ds, args.out)
    splits = {name: int(np.sum(ds.split == name)) for name in ("train", "val", "test")}
    print(f"wrote {len(ds.accel)} samples to {args.out} (splits: {splits})")
    return 0


def cmd_compare_model(args) -> int:
    if args.dataset:
        ds = harness.load_cf_dataset(args.dataset)
    else:
        ds = harness.generate_cf_dataset(n_target=args.samples, seed=args.seed)
    rows, loss_rows = harness.compare_dynamics_models(
        ds, fractions=args.fractions, repeats=args.repeats,
        steps=args.steps, seed=args.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    paths = harness.save_model_compare(rows, loss_rows, args.out)
    print(f"comparison: {paths['compare']}")
    print(f"loss curves: {paths['loss']}")
    return 0


def cmd_export(args) -> int:
    cfg = _load_config(args)
    n = harness.export_trajectories(args.source, cfg.agent, args.out,
                                    seed=cfg.run.seeds[0])
    print(f"wrote {n} trajectory rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wavedamp",
        description="Mixed-traffic simulation and residual RL training toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=True):
        p.add_argument("--config", help="YAML experiment configuration")
        if seeds:
            p.add_argument("--seed", type=int, help="override the seed list")

    p = sub.add_parser("train", help="train one or more seeds")
    common(p)
    p.add_argument("--variant", choices=["proposed", "vanilla-trpo", "mb-trpo",
                                         "no-initial-policy"])
    p.add_argument("--out", help="output directory")
    p.add_argument("--iterations", type=int)
    p.add_argument("--workers", type=int, help="parallel seed processes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or baseline")
    common(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", help="checkpoint JSON path")
    group.add_argument("--baseline", choices=["idm", "pi"])
    p.add_argument("--episodes", type=int, default=3)
    p.add_argument("--out", help="write the summary JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="roll a physics controller, no learning")
    common(p)
    p.add_argument("--controller", choices=["idm", "pi"], default="idm")
    p.add_argument("--episodes", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("dataset", help="generate the car-following corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=50_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, help="follower acceleration noise std")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("compare-model", help="knowledge vs vanilla regressor sweep")
    p.add_argument("--dataset", help="existing corpus CSV (else regenerate)")
    p.add_argument("--samples", type=int, default=50_000)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--fractions", type=float, nargs="+",
                   default=[0.1, 0.25, 0.5, 0.75, 1.0])
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_compare_model)

    p = sub.add_parser("export", help="export space-time trajectories")
    common(p)
    p.add_argument("--source", required=True,
                   help="checkpoint path, 'idm', or 'pi'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
