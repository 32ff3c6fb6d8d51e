"""Command-line entry points.

    dnc run <config.json>            train per the experiment config
    dnc eval <policy.dncp> --env ... evaluate a saved checkpoint
    dnc summarize <output_dir>       rebuild the summary table from CSVs
    dnc partition <env> --k ...      emit a partition JSON only

All randomness flows from the seeds in the config or flags.  ``dnc eval
--seed S`` draws from the same final-evaluation stream a training run
with experiment seed S used for its last metrics row, so a freshly
loaded checkpoint reproduces the recorded final evaluation exactly.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .dnc import STREAM_FINAL_EVAL, evaluate_policy
from .envs import ENVS, make_env, sample_initial_states
from .errors import ConfigError
from .harness import (
    compare_variants,
    format_summary,
    load_config,
    run_experiment,
    summarize,
    write_summary,
)
from .partition import kmeans, save_partition
from .policy import load_policy
from .rng import Rng


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if cfg.variants:
        table = compare_variants(cfg)
        print(format_summary(table))
        return 0
    status = run_experiment(cfg)
    print(format_summary(summarize(cfg.output_dir)))
    return status


def _cmd_eval(args) -> int:
    pol = load_policy(args.policy)
    env = make_env(args.env)
    if env.spec.state_dim != pol.state_dim or env.spec.action_dim != pol.action_dim:
        raise ConfigError(
            f"checkpoint is {pol.state_dim}->{pol.action_dim} but env "
            f"{args.env} needs {env.spec.state_dim}->{env.spec.action_dim}"
        )
    rng = Rng(args.seed).child(STREAM_FINAL_EVAL)
    result = evaluate_policy(env, pol, args.episodes, rng)
    print(f"mean_return {result.mean_return!r}")
    print(f"success_rate {result.success_rate!r}")
    return 0


def _cmd_summarize(args) -> int:
    table = summarize(args.output_dir)
    write_summary(Path(args.output_dir), table)
    print(format_summary(table))
    return 0


def _cmd_partition(args) -> int:
    env = make_env(args.env)
    rng = Rng(args.seed)
    samples = sample_initial_states(env, args.samples, rng.child(0))
    part = kmeans(samples, args.k, rng.child(1))
    save_partition(args.out, part)
    print(f"wrote partition with k={part.k} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dnc",
        description="Divide-and-conquer policy optimization benchmark runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train per an experiment config")
    p_run.add_argument("config", help="path to experiment JSON")
    p_run.set_defaults(func=_cmd_run)

    p_eval = sub.add_parser("eval", help="evaluate a saved policy checkpoint")
    p_eval.add_argument("policy", help="path to a .dncp checkpoint")
    p_eval.add_argument("--env", required=True, choices=sorted(ENVS))
    p_eval.add_argument("--episodes", type=int, default=20)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.set_defaults(func=_cmd_eval)

    p_sum = sub.add_parser("summarize", help="rebuild the summary from metrics CSVs")
    p_sum.add_argument("output_dir")
    p_sum.set_defaults(func=_cmd_summarize)

    p_part = sub.add_parser("partition", help="emit a k-means partition JSON")
    p_part.add_argument("env", choices=sorted(ENVS))
    p_part.add_argument("--k", type=int, default=4)
    p_part.add_argument("--samples", type=int, default=10000)
    p_part.add_argument("--seed", type=int, default=0)
    p_part.add_argument("--out", default="partition.json")
    p_part.set_defaults(func=_cmd_partition)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
