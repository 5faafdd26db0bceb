"""Command-line surface: gen-data, train, eval, analyze."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, envs, evaluation, training
from .data import generate_dataset
from .encoder import ContextEncoder
from .envs import sample_task_set
from .training import (PAPER_SCALE_STEPS, PAPER_SCALE_TRANSITIONS, TrainConfig,
                       load_checkpoint, load_config, load_run_datasets, train)

logger = logging.getLogger(__name__)

SPLIT_ALIASES = {"id": "id-test", "ood": "ood-test"}


def _add_gen_data(subparsers):
    p = subparsers.add_parser("gen-data", help="generate offline datasets")
    p.add_argument("--family", required=True, choices=envs.FAMILIES)
    p.add_argument("--tasks-train", type=int, default=20)
    p.add_argument("--tasks-id", type=int, default=10)
    p.add_argument("--tasks-ood", type=int, default=10)
    p.add_argument("--transitions", type=int, default=20000,
                   help="transitions per task (desk-scale default)")
    p.add_argument("--paper-scale", action="store_true",
                   help=f"use {PAPER_SCALE_TRANSITIONS} transitions per task")
    p.add_argument("--episode-length", type=int, default=envs.DEFAULT_EPISODE_LENGTH)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _add_train(subparsers):
    p = subparsers.add_parser("train", help="run meta-training")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-mi", action="store_true",
                   help="disable the entropy regularizer (distance-metric ablation)")
    p.add_argument("--lambda", dest="lambda_dml", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--paper-scale", action="store_true",
                   help=f"train for {PAPER_SCALE_STEPS} steps")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")


def _add_eval(subparsers):
    p = subparsers.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--strategy", required=True, choices=evaluation.STRATEGY_KINDS)
    p.add_argument("--split", required=True, choices=sorted(SPLIT_ALIASES))
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seeds", default="0", help="comma-separated seed list")
    p.add_argument("--out", default=None, help="CSV output path (default: stdout)")


def _add_analyze(subparsers):
    p = subparsers.add_parser("analyze", help="representation and policy analyses")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--probe", action="store_true")
    p.add_argument("--wasserstein", action="store_true")
    p.add_argument("--export-latents", default=None, metavar="OUT")
    p.add_argument("--out", default=None,
                   help="directory for JSON reports (default: checkpoint dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="omrl",
        description="Offline meta-RL on the synthetic point-robot suite")
    parser.add_argument("-v", "--verbose", action="store_true")
    subparsers = parser.add_subparsers(dest="command", required=True)
    _add_gen_data(subparsers)
    _add_train(subparsers)
    _add_eval(subparsers)
    _add_analyze(subparsers)
    return parser


def cmd_gen_data(args) -> int:
    transitions = PAPER_SCALE_TRANSITIONS if args.paper_scale else args.transitions
    tasks = []
    tasks += sample_task_set(args.family, "train", args.tasks_train, args.seed,
                             id_start=0)
    tasks += sample_task_set(args.family, "id-test", args.tasks_id, args.seed,
                             id_start=args.tasks_train)
    tasks += sample_task_set(args.family, "ood-test", args.tasks_ood, args.seed,
                             id_start=args.tasks_train + args.tasks_id)
    manifest = generate_dataset(tasks, transitions, args.out, seed=args.seed,
                                episode_length=args.episode_length)
    print(f"wrote {len(manifest.tasks)} task datasets "
          f"({transitions} rows each) to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.no_mi:
        config.mi_enabled = False
    if args.lambda_dml is not None:
        config.lambda_dml = args.lambda_dml
    if args.steps is not None:
        config.total_steps = args.steps
    if args.paper_scale:
        config.total_steps = PAPER_SCALE_STEPS
    state, log = train(config, args.out, resume_from=args.resume)
    print(f"trained to step {state.step}; checkpoint at {Path(args.out) / 'checkpoint.pt'}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    _, by_split = load_run_datasets(state.config)
    split = SPLIT_ALIASES[args.split]
    datasets = by_split[split]
    if not datasets:
        raise SystemExit(f"no {split} datasets in {state.config.data_dir}")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    strategy = evaluation.ContextStrategy(
        kind=args.strategy, H=state.config.context_size,
        warmup_random_steps=(state.config.context_size // 4
                             if args.strategy == "nonprior" else 0))
    result = evaluation.evaluate_suite(
        state.encoder, state.actor, [ds.task for ds in datasets.values()],
        datasets, strategy, episodes=args.episodes, seeds=seeds)
    if args.out:
        evaluation.write_eval_csv(result, args.out)
        print(f"wrote {len(result.rows)} rows + aggregate to {args.out}")
    else:
        for row in result.rows:
            print(row)
    print(f"{strategy.kind}/{split}: normalized return "
          f"{result.mean_normalized:.2f} +- {result.std_normalized:.2f}")
    return 0


def cmd_analyze(args) -> int:
    state = load_checkpoint(args.checkpoint)
    _, by_split = load_run_datasets(state.config)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    did_anything = False

    if args.probe:
        report = {}
        for split in ("id-test", "ood-test"):
            datasets = by_split[split]
            if not datasets:
                continue
            tasks = [ds.task for ds in datasets.values()]
            result = analysis.regression_probe(state.encoder, tasks, datasets,
                                               seed=state.config.seed)
            report[split] = result.to_json()
        path = analysis.write_json_report(report, out_dir / "probe_report.json")
        print(f"probe report: {path}")
        print(json.dumps(report, indent=2, sort_keys=True))
        did_anything = True

    if args.wasserstein:
        datasets = {**by_split["train"]}
        tasks = [ds.task for ds in datasets.values()]
        report = analysis.policy_distance_report(tasks, datasets,
                                                 seed=state.config.seed)
        path = analysis.write_json_report(report.to_json(),
                                          out_dir / "policy_distance.json")
        print(f"policy-distance report: {path} "
              f"(mean distance {report.mean_distance:.4f})")
        did_anything = True

    if args.export_latents:
        datasets = {**by_split["id-test"], **by_split["ood-test"]} or by_split["train"]
        tasks = [ds.task for ds in datasets.values()]
        path = analysis.export_latents(state.encoder, tasks, datasets,
                                       args.export_latents,
                                       seed=state.config.seed)
        print(f"latents exported to {path}")
        did_anything = True

    if not did_anything:
        print("nothing to do: pass --probe, --wasserstein, or --export-latents")
        return 1
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    handlers = {"gen-data": cmd_gen_data, "train": cmd_train,
                "eval": cmd_eval, "analyze": cmd_analyze}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
