"""Command-line entry point: ``repaint <subcommand> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ._validation import ContractError
from .envs import describe_env
from .harness import (
    ARMS,
    ConfigError,
    compare_selection_rules,
    compute_report,
    config_from_dict,
    flatten,
    load_run_records,
    parse_config_text,
    parse_rule,
    run_experiment,
    task_similarity,
    train_teacher,
    write_report,
)


def _seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--seeds expects comma-separated integers, got {text!r}") from exc
    if not seeds:
        raise argparse.ArgumentTypeError("--seeds is empty")
    return seeds


def _common(p, config_required=True):
    p.add_argument("--config", type=Path, required=config_required, help="experiment config file")
    p.add_argument("--seed", type=int, help="single seed (overrides the config)")
    p.add_argument("--seeds", type=_seeds, help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")


def build_parser():
    parser = argparse.ArgumentParser(prog="repaint", description="Policy transfer experiments with REPAINT.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train a teacher policy on task.teacher_weights")
    _common(p)

    p = sub.add_parser("run", help="train and evaluate one arm over the configured seeds")
    _common(p)
    p.add_argument("--arm", choices=ARMS, help="arm to run (overrides the config)")

    p = sub.add_parser("report", help="iterations-to-target report from a run directory")
    p.add_argument("--out", type=Path, required=True, help="run directory holding <arm>/seed_*.csv")
    p.add_argument("--target", type=float, help="fixed target score (default: best baseline score)")
    p.add_argument("--config", type=Path, help="unused; accepted for symmetry with the other subcommands")

    p = sub.add_parser("compare-rules", help="one run per experience-selection rule, with an overlay CSV")
    _common(p)
    p.add_argument("--arm", choices=("it", "repaint"), help="arm to run (overrides the config)")
    p.add_argument("--rules", required=True,
                   help="comma-separated rules, e.g. threshold:0.8,top_fraction:0.2,abs_threshold:0.8,prioritized")

    p = sub.add_parser("describe-env", help="print environment documentation")
    p.add_argument("env_id", nargs="?", help="environment id (all when omitted)")
    return parser


def _load(args):
    """Config file plus command-line overrides, validated together."""
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    flat = parse_config_text(text)
    if args.seed is not None and args.seeds is not None:
        raise ConfigError("give --seed or --seeds, not both")
    if args.seed is not None:
        flat["experiment.seeds"] = [args.seed]
    if args.seeds is not None:
        flat["experiment.seeds"] = list(args.seeds)
    if args.out is not None:
        flat["experiment.out"] = str(args.out)
    arm = getattr(args, "arm", None)
    if arm:
        flat["experiment.arm"] = arm
        if arm == "baseline":
            flat.pop("teacher.checkpoint", None)
            flat.pop("teacher.warm_start", None)
    return config_from_dict(flat)


def cmd_train_teacher(args):
    cfg = _load(args)
    seed = args.seed if args.seed is not None else cfg.teacher_seed
    path = Path(cfg.out) / f"teacher_seed_{seed}.json"
    train_teacher(cfg.teacher_task(), cfg.ppo, seed, cfg.teacher_iterations, path)
    print(path)
    return 0


def cmd_run(args):
    cfg = _load(args)
    run_experiment(cfg)
    sim = task_similarity(cfg)
    msg = f"wrote {Path(cfg.out) / cfg.arm} for seeds {','.join(map(str, cfg.seeds))}"
    if sim is not None and cfg.arm != "baseline":
        msg += f" (teacher similarity {sim:.3f})"
    print(msg)
    return 0


def cmd_report(args):
    records = load_run_records(args.out)
    report = compute_report(records, "auto" if args.target is None else args.target)
    path = write_report(report, Path(args.out) / "report.json")
    print("\n".join(report.summary_lines()))
    print(path)
    return 0


def cmd_compare_rules(args):
    cfg = _load(args)
    rules = [parse_rule(r) for r in args.rules.split(",") if r.strip()]
    results = compare_selection_rules(cfg, rules)
    for label, by_seed in results.items():
        recs = flatten(by_seed)
        best = max(r.mean_return for r in recs)
        print(f"{label}: {len(recs)} records, best single-seed score {best:.6g}")
    print(Path(cfg.out) / "rules.csv")
    return 0


def cmd_describe_env(args):
    print(describe_env(args.env_id))
    return 0


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "run": cmd_run,
    "report": cmd_report,
    "compare-rules": cmd_compare_rules,
    "describe-env": cmd_describe_env,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
