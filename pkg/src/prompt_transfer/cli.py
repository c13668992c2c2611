"""Command-line entry point: ``prompt-transfer <subcommand> --config cfg.json``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import OUT_ENV, ExperimentConfig
from .errors import PromptTransferError
from .indicators import METRICS
from .pipeline import Pipeline

SUBCOMMANDS = {
    "pretrain": "pretrain the backbone checkpoints",
    "tune": "prompt-tune every task (prompts + curves)",
    "matrix": "zero-shot transfer matrix CSV and heatmap",
    "tpt-task": "warm-start PT from the best same-model source prompt",
    "train-projector": "train the cross-model projector",
    "project": "zero-shot scores of projected prompts on the target model",
    "tpt-model": "warm-start target PT from projected prompts",
    "indicators": "Spearman report of similarity metrics vs transfer",
    "retrieve": "nearest stored prompt to a target task's prompt",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prompt-transfer", description="Soft-prompt transfer experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON (defaults are used for omitted fields)")
    common.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
    common.add_argument("--seed", type=int, help="override the task-suite seed")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for independent work items")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    subs = {}
    for name, help_text in SUBCOMMANDS.items():
        subs[name] = sub.add_parser(name, parents=[common], help=help_text)
    for name in ("pretrain",):
        subs[name].add_argument("--model", choices=["source", "target", "all"], default="all")
    for name in ("tune", "matrix", "tpt-task", "retrieve"):
        subs[name].add_argument("--model", choices=["source", "target"], default="source")
    subs["indicators"].add_argument("--model", choices=["source", "target", "all"], default="source",
                                    help="'all' also writes the side-by-side model comparison")
    subs["retrieve"].add_argument("--metric", choices=METRICS, required=True)
    subs["retrieve"].add_argument("--target", required=True)
    return parser


def run(args: argparse.Namespace) -> dict:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    cfg = cfg.with_overrides(out=args.out, seed=args.seed)
    pipe = Pipeline(cfg, jobs=args.jobs)
    cmd = args.command
    result: dict
    if cmd == "pretrain":
        roles = ["source", "target"] if args.model == "all" else [args.model]
        result = {r: pipe.model(r).digest() for r in roles}
    elif cmd == "tune":
        result = {}
        for s in pipe.seeds:
            got = pipe.prompts(args.model, s)
            result.update({f"{k}/s{s}": c.final_score for k, (_, c) in got.items()})
    elif cmd == "matrix":
        m = pipe.matrix(args.model)
        result = {"within_type": m.within_type_mean(), "cross_type": m.cross_type_mean(), "random": m.random_mean()}
    elif cmd == "tpt-task":
        result = {"rows": pipe.tpt_task(args.model)}
    elif cmd == "train-projector":
        p = pipe.projector()
        result = {"projector": p.digest(), "training_tasks": p.training_tasks}
    elif cmd == "project":
        result = {"rows": pipe.project()}
    elif cmd == "tpt-model":
        result = {"rows": pipe.tpt_model()}
    elif cmd == "indicators" and args.model == "all":
        pipe.size_sweep()
        result = {}
        for role in pipe.config["models"]:
            rep = pipe.indicators(role)
            result[role] = {m: rep.overall(m) for m in rep.metrics}
    elif cmd == "indicators":
        rep = pipe.indicators(args.model)
        result = {m: rep.overall(m) for m in rep.metrics}
    else:
        result = pipe.retrieve(args.target, args.metric, args.model)
    pipe.finish()
    return result


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except PromptTransferError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
