"""Command-line entry point: ``clsgen <stage> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .pipeline import BASELINES, PROFILES, ConfigError, MissingArtifactError, Pipeline, RunConfig, run_all

STAGES = ("synth-gen", "pretrain", "build-data", "train", "select", "eval", "baseline", "judge", "report", "all")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON file overriding the profile")
    common.add_argument("--profile", choices=sorted(PROFILES), default="smoke")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", metavar="DIR", default="runs")
    common.add_argument("--force", action="store_true", help="rerun even if artifacts are up to date")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="clsgen", description="Joint classification and rationale generation pipeline.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("synth-gen", parents=[common], help="generate synthetic splits and the pretraining corpus")
    sub.add_parser("pretrain", parents=[common], help="LM-pretrain the desk model on the corpus")
    bd = sub.add_parser("build-data", parents=[common], help="rejection-sample explanations from the teacher")
    bd.add_argument("--teacher", choices=("oracle", "remote"), default=None)
    tr = sub.add_parser("train", parents=[common], help="fine-tune (joint or cls-only) with per-epoch checkpoints")
    tr.add_argument("--teacher", choices=("oracle", "remote"), default=None)
    tr.add_argument("--mode", choices=("joint", "cls_only"), default=None)
    sub.add_parser("select", parents=[common], help="pick the epoch with the best dev quality score")
    ev = sub.add_parser("eval", parents=[common], help="evaluate the selected checkpoint on the test split")
    ev.add_argument("--threshold", choices=("default", "tuned"), default="default")
    bl = sub.add_parser("baseline", parents=[common], help="inference-only baselines on the pretrained model")
    bl.add_argument("method", choices=BASELINES)
    bl.add_argument("--runs", type=int, default=None)
    jd = sub.add_parser("judge", parents=[common], help="rationale-label consistency and readability")
    jd.add_argument("--threshold", choices=("default", "tuned"), default="default")
    sub.add_parser("report", parents=[common], help="aggregate tables from finished stages")
    al = sub.add_parser("all", parents=[common], help="run every stage in order")
    al.add_argument("--teacher", choices=("oracle", "remote"), default=None)
    al.add_argument("--no-baselines", action="store_true")
    return p


def load_config(args) -> RunConfig:
    overrides = {}
    if args.config:
        cfg = RunConfig.from_file(args.config, args.profile, args.seed)
        overrides = {k: cfg[k] for k in cfg.sections}
        profile = cfg.profile
        seed = cfg.seed
    else:
        profile, seed = args.profile, args.seed
    if getattr(args, "teacher", None):
        overrides.setdefault("teacher", {})["source"] = args.teacher
    if getattr(args, "mode", None):
        overrides.setdefault("train", {})["mode"] = args.mode
    return RunConfig.build(profile, overrides, seed)


def dispatch(args) -> dict:
    pipe = Pipeline(load_config(args), args.out, force=args.force)
    cmd = args.command
    if cmd == "synth-gen":
        return pipe.synth_gen()
    if cmd == "pretrain":
        return pipe.pretrain()
    if cmd == "build-data":
        return pipe.build_data()
    if cmd == "train":
        return pipe.train()
    if cmd == "select":
        return pipe.select()
    if cmd == "eval":
        return pipe.evaluate(args.threshold)
    if cmd == "baseline":
        return pipe.baseline(args.method, args.runs)
    if cmd == "judge":
        return pipe.judge(args.threshold)
    if cmd == "report":
        return pipe.report()
    return run_all(pipe, baselines=not args.no_baselines)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        manifest = dispatch(args)
    except (ConfigError, MissingArtifactError) as exc:
        print(f"clsgen {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(manifest, sort_keys=True, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
