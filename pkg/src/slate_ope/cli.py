"""Command-line interface.

Subcommands: ``run`` (full experiment from a config file or preset name),
``generate-log``, ``estimate``, ``metrics``, ``ingest-movielens``.  Any
config field can be overridden with ``--set dotted.path=value``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .core import LogDataset
from .estimators import (
    RewardGrid,
    WeightKind,
    estimate_cdf,
    load_cdf_estimate,
    save_cdf_estimate,
)
from .harness import (
    apply_overrides,
    build_environment,
    build_policy,
    emit_outputs,
    generate_log,
    list_presets,
    load_config,
    run_experiment,
)
from .metrics import cvar, ks_statistic, mean_from_cdf, monotone_repair, quantile
from .ratings import ingest_movielens_csv


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "config",
        help="path to a config JSON file, or a preset name "
        f"(one of: {', '.join(list_presets())})",
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="PATH=VALUE",
        help="override a config field, e.g. --set trials=10 "
        "--set environment.params.seed=3",
    )


def _load(args: argparse.Namespace):
    return apply_overrides(load_config(args.config), args.overrides)


def _cmd_run(args: argparse.Namespace) -> int:
    config = _load(args)
    if args.no_figures:
        config = apply_overrides(config, ["figures=false"])
    table = run_experiment(config)
    written = emit_outputs(table, config)
    for path in written:
        print(path)
    for err in table.errors:
        print(
            f"cell error: estimator={err.estimator} n={err.n} "
            f"trial={err.trial} metric={err.metric}: {err.message}",
            file=sys.stderr,
        )
    return 0 if table.ok else 1


def _cmd_generate_log(args: argparse.Namespace) -> int:
    config = _load(args)
    env = build_environment(config.environment)
    mu = build_policy(config.logging_policy, env, config.master_seed, lane=3)
    n = args.n if args.n is not None else config.sample_sizes[0]
    data = generate_log(env, mu, n, np.random.default_rng(args.seed))
    data.to_csv(args.out)
    print(f"{args.out}: {len(data)} entries, K={data.config.num_slots} "
          f"N={data.config.actions_per_slot}")
    return 0


def _cmd_estimate(args: argparse.Namespace) -> int:
    config = _load(args)
    env = build_environment(config.environment)
    mu = build_policy(config.logging_policy, env, config.master_seed, lane=3)
    pi = build_policy(config.target_policy, env, config.master_seed, lane=2)
    data = LogDataset.from_csv(args.log)
    grid = RewardGrid.linspace(*data.reward_range, config.grid_size)
    estimate = estimate_cdf(WeightKind.parse(args.estimator), pi, data, mu, grid)
    sidecar = save_cdf_estimate(estimate, args.out)
    print(args.out)
    print(sidecar)
    return 0


def _cmd_metrics(args: argparse.Namespace) -> int:
    estimate = load_cdf_estimate(args.cdf)
    cdf = monotone_repair(estimate)
    records = []

    def record(metric: str, value: float) -> None:
        records.append(
            {
                "estimator": str(estimate.weight_kind),
                "n": estimate.n_used,
                "trials": 1,
                "metric": metric,
                "value": value,
                "stderr": None,
            }
        )

    record("mean", mean_from_cdf(cdf))
    record("median", quantile(cdf, 0.5))
    record(f"var@{args.alpha}", quantile(cdf, args.alpha))
    record(f"cvar@{args.alpha}", cvar(cdf, args.alpha))
    if args.truth:
        truth = monotone_repair(load_cdf_estimate(args.truth))
        record("ks", ks_statistic(cdf, truth, resample_truth=True))
    text = json.dumps(records, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(args.out)
    else:
        print(text)
    return 0


def _cmd_ingest(args: argparse.Namespace) -> int:
    matrix = ingest_movielens_csv(
        args.ratings, rating_threshold=args.threshold, delimiter=args.delimiter
    )
    sp.save_npz(args.out, matrix.matrix)
    print(
        f"{args.out}: {matrix.num_users} users x {matrix.num_items} items, "
        f"{matrix.matrix.nnz} interactions"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slate-ope",
        description="Off-policy reward-distribution estimation for slate policies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a full experiment config")
    _add_config_args(p_run)
    p_run.add_argument("--no-figures", action="store_true",
                       help="skip PNG rendering, keep the CSV outputs")
    p_run.set_defaults(fn=_cmd_run)

    p_gen = sub.add_parser("generate-log", help="sample a logged dataset")
    _add_config_args(p_gen)
    p_gen.add_argument("--n", type=int, default=None,
                       help="log size (default: first configured sample size)")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True, help="output log CSV path")
    p_gen.set_defaults(fn=_cmd_generate_log)

    p_est = sub.add_parser("estimate", help="estimate a target CDF from a log")
    _add_config_args(p_est)
    p_est.add_argument("--log", required=True, help="log CSV written by generate-log")
    p_est.add_argument("--estimator", default="suno",
                       help="weight kind: suno, uno, or m<order> (e.g. m2)")
    p_est.add_argument("--out", required=True, help="output CDF CSV path")
    p_est.set_defaults(fn=_cmd_estimate)

    p_met = sub.add_parser("metrics", help="compute risk metrics from a CDF file")
    p_met.add_argument("--cdf", required=True, help="CDF CSV written by estimate")
    p_met.add_argument("--truth", default=None,
                       help="ground-truth CDF CSV for the KS statistic")
    p_met.add_argument("--alpha", type=float, default=0.3,
                       help="tail level for VaR/CVaR (default 0.3)")
    p_met.add_argument("--out", default=None, help="output JSON path (default stdout)")
    p_met.set_defaults(fn=_cmd_metrics)

    p_ing = sub.add_parser("ingest-movielens", help="binarize a ratings CSV")
    p_ing.add_argument("ratings", help="MovieLens-format ratings CSV")
    p_ing.add_argument("--threshold", type=float, default=4.0)
    p_ing.add_argument("--delimiter", default=",")
    p_ing.add_argument("--out", required=True, help="output .npz matrix path")
    p_ing.set_defaults(fn=_cmd_ingest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
