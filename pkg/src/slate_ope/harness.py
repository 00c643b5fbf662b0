"""Config-driven experiment runner: log generation -> estimation -> metrics.

A run is organized as (sample size x trial) cells.  Every cell derives its
own generator from ``SeedSequence(master_seed, spawn_key=(0, size_idx,
trial_idx))``, so cells are independent, individually re-runnable, and the
results never depend on execution order or worker count.  Ground-truth
sampling and policy construction use reserved spawn-key lanes of the same
master seed.

Within a cell all estimators share one generated log (paired comparison);
each estimator's raw CDF estimate is monotone-repaired before metrics are
computed against the ground-truth CDF.  Failures abort the smallest unit
that cannot proceed: a failed estimate drops all of that estimator's
metrics for the cell, a failed metric (e.g. a quantile of a mass-deficient
estimate) drops only itself.  Every failure is recorded and the run
continues; per-metric aggregation uses exactly the trials that produced
that metric, so one metric's failures never skew another's statistics.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import MISSING, asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .core import (
    EpsilonGreedyPolicy,
    FactoredPolicy,
    LogDataset,
    SlateConfig,
    SlateOpeError,
    TablePolicy,
    UniformPolicy,
)
from .estimators import FLOAT_FMT, RewardGrid, WeightKind, estimate_cdf
from .interaction import build_interaction_env, build_mway_env
from .metrics import (
    StepCdf,
    TrialSummary,
    aggregate_trials,
    cvar,
    empirical_step_cdf,
    ks_statistic,
    mean_from_cdf,
    monotone_repair,
    quantile,
)
from .ratings import (
    build_ratings_env,
    fit_ease,
    ground_truth_target_cdf,
    ingest_movielens_csv,
    synthetic_ratings_matrix,
)
from .synth import build_additive_env, exact_target_cdf

__all__ = [
    "CellError",
    "ExperimentConfig",
    "ResultRow",
    "ResultTable",
    "apply_overrides",
    "build_environment",
    "build_policy",
    "emit_outputs",
    "generate_log",
    "list_presets",
    "load_config",
    "run_experiment",
]

RESULTS_CSV_HEADER = "estimator,n,metric,mean,stderr,trials"
DEFAULT_METRICS = ("ks", "mean", "median", "var@0.3", "cvar@0.3")

# spawn-key lanes off the master seed; lane 0 is (0, size_idx, trial_idx)
_LANE_GROUND_TRUTH = 1
_LANE_TARGET_POLICY = 2
_LANE_LOGGING_POLICY = 3


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one experiment, JSON round-trippable."""

    name: str
    environment: dict
    logging_policy: dict
    target_policy: dict
    sample_sizes: tuple[int, ...]
    trials: int
    estimators: tuple[str, ...]
    master_seed: int
    output_dir: str
    grid_size: int = 1000
    metrics: tuple[str, ...] = DEFAULT_METRICS
    ground_truth_draws: int = 1_000_000
    workers: int = 1
    figures: bool = True
    schema_version: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "sample_sizes", tuple(int(n) for n in self.sample_sizes))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        if not self.sample_sizes or any(n < 1 for n in self.sample_sizes):
            raise ValueError("sample sizes must be positive")
        if list(self.sample_sizes) != sorted(self.sample_sizes):
            raise ValueError("sample sizes must be sorted ascending")
        if self.trials < 1:
            raise ValueError("trial count must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not self.estimators:
            raise ValueError("need at least one estimator")
        for e in self.estimators:
            WeightKind.parse(e)
        for m in self.metrics:
            _parse_metric(m)

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        payload = dict(payload)
        version = payload.get("schema_version", 1)
        if version != 1:
            raise ValueError(f"unsupported config schema_version {version}")
        known = set(cls.__dataclass_fields__)
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        missing = {
            f
            for f, spec in cls.__dataclass_fields__.items()
            if spec.default is MISSING and spec.default_factory is MISSING
        } - set(payload)
        if missing:
            raise ValueError(f"missing config fields: {sorted(missing)}")
        return cls(**payload)

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["sample_sizes"] = list(self.sample_sizes)
        payload["estimators"] = list(self.estimators)
        payload["metrics"] = list(self.metrics)
        return payload


def list_presets() -> list[str]:
    root = resources.files("slate_ope") / "presets"
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(source: str | Path) -> ExperimentConfig:
    """Load a config from a JSON file path or a shipped preset name."""
    path = Path(source)
    if path.exists():
        return ExperimentConfig.from_dict(json.loads(path.read_text()))
    preset = resources.files("slate_ope") / "presets" / f"{source}.json"
    if preset.is_file():
        return ExperimentConfig.from_dict(json.loads(preset.read_text()))
    raise FileNotFoundError(
        f"no config file or preset named {source!r}; presets: {list_presets()}"
    )


def apply_overrides(
    config: ExperimentConfig, overrides: Sequence[str]
) -> ExperimentConfig:
    """Apply ``dotted.path=value`` overrides; values parse as JSON literals
    with a plain-string fallback."""
    payload = config.to_dict()
    for item in overrides:
        dotted, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not of the form path=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = payload
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"override path {dotted!r} crosses a non-object")
        node[leaf] = value
    return ExperimentConfig.from_dict(payload)


def _parse_metric(name: str):
    """Return a callable (estimate, truth) -> float for a metric name."""
    if name == "ks":
        return lambda est, truth: ks_statistic(est, truth)
    if name == "mean":
        return lambda est, truth: mean_from_cdf(est)
    if name == "median":
        return lambda est, truth: quantile(est, 0.5)
    for prefix, fn in (("var@", quantile), ("cvar@", cvar)):
        if name.startswith(prefix):
            alpha = float(name[len(prefix):])
            if not 0.0 < alpha < 1.0:
                raise ValueError(f"metric {name!r}: alpha must lie in (0, 1)")
            return lambda est, truth, _a=alpha, _f=fn: _f(est, _a)
    raise ValueError(
        f"unknown metric {name!r}; expected ks, mean, median, var@A or cvar@A"
    )


def _ground_truth_value(name: str, truth: StepCdf) -> float:
    # KS is measured against the truth itself; its reference value is 0
    if name == "ks":
        return 0.0
    return _parse_metric(name)(truth, truth)


def build_environment(spec: dict):
    """Instantiate an environment from its config stanza."""
    kind = spec.get("type")
    params = dict(spec.get("params", {}))
    if kind == "synth":
        config = SlateConfig(params.pop("num_slots"), params.pop("actions_per_slot"))
        return build_additive_env(config, seed=params.pop("seed"), **params)
    if kind == "mway":
        config = SlateConfig(params.pop("num_slots"), params.pop("actions_per_slot"))
        return build_mway_env(config, m=params.pop("m"), seed=params.pop("seed"), **params)
    if kind == "interaction":
        config = SlateConfig(params.pop("num_slots"), params.pop("actions_per_slot"))
        return build_interaction_env(
            config,
            pairwise_strength=params.pop("pairwise_strength"),
            gamma=params.pop("gamma"),
            noise=params.pop("noise"),
            seed=params.pop("seed"),
            **params,
        )
    if kind == "ratings":
        source = params.pop("source", "synthetic")
        if source == "synthetic":
            ratings = synthetic_ratings_matrix(
                num_users=params.pop("num_users"),
                num_items=params.pop("num_items"),
                seed=params.pop("seed"),
            )
        elif source == "csv":
            ratings = ingest_movielens_csv(
                params.pop("path"),
                rating_threshold=params.pop("rating_threshold", 4.0),
                delimiter=params.pop("delimiter", ","),
            )
        else:
            raise ValueError(f"unknown ratings source {source!r}")
        model = fit_ease(ratings, lam=params.pop("ease_lambda", 100.0))
        return build_ratings_env(
            ratings,
            model,
            min_history=params.pop("min_history", 10),
            max_history=params.pop("max_history", 15),
            top_n=params.pop("top_n", 20),
            slots=params.pop("slots", 5),
        )
    raise ValueError(f"unknown environment type {kind!r}")


def build_policy(
    spec: dict, env, master_seed: int, lane: int
) -> FactoredPolicy:
    """Instantiate a policy stanza against an environment.

    Greedy slates come from the environment's own preferences when it has
    any (the ratings simulator), otherwise they are drawn once from the
    policy's seed (or a reserved lane of the master seed) and held fixed.
    """
    kind = spec.get("kind")
    config = env.config
    if kind == "uniform":
        return UniformPolicy(config)
    if kind in ("deterministic", "epsilon_greedy"):
        epsilon = float(spec.get("epsilon", 0.0)) if kind == "epsilon_greedy" else 0.0
        greedy = getattr(env, "greedy_slates", None)
        if greedy is None:
            seed = spec.get("seed")
            rng = (
                np.random.default_rng(seed)
                if seed is not None
                else np.random.default_rng(
                    np.random.SeedSequence(master_seed, spawn_key=(lane,))
                )
            )
            greedy = rng.integers(
                0, config.actions_per_slot, size=(env.num_contexts, config.num_slots)
            )
        return EpsilonGreedyPolicy(config, greedy, epsilon)
    if kind == "table":
        seed = spec.get("seed")
        rng = (
            np.random.default_rng(seed)
            if seed is not None
            else np.random.default_rng(
                np.random.SeedSequence(master_seed, spawn_key=(lane,))
            )
        )
        return TablePolicy.random(config, env.num_contexts, rng)
    raise ValueError(f"unknown policy kind {kind!r}")


def generate_log(
    env, logging_policy: FactoredPolicy, n: int, rng: np.random.Generator | int
) -> LogDataset:
    """Sample n i.i.d. logged tuples: context, factored slate, reward."""
    if n < 1:
        raise ValueError(f"log size must be >= 1, got {n}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    contexts = env.sample_contexts(n, rng)
    slates = logging_policy.sample_slates(contexts, rng)
    rewards = env.sample_rewards(contexts, slates, rng)
    return LogDataset(
        config=env.config,
        contexts=contexts,
        slates=slates,
        rewards=rewards,
        reward_range=env.reward_range,
    )


def ground_truth_cdf(
    env, target: FactoredPolicy, grid: RewardGrid, config: ExperimentConfig
) -> StepCdf:
    """Environment-appropriate ground truth: exact by enumeration when an
    exact per-slate CDF oracle exists, on-policy sampling otherwise."""
    rng = np.random.default_rng(
        np.random.SeedSequence(config.master_seed, spawn_key=(_LANE_GROUND_TRUTH,))
    )
    env_type = config.environment.get("type")
    if env_type in ("synth", "mway"):
        return exact_target_cdf(env, target, grid)
    if env_type == "ratings":
        return ground_truth_target_cdf(
            env, target, grid, draws=config.ground_truth_draws, rng=rng
        )
    contexts = env.sample_contexts(config.ground_truth_draws, rng)
    slates = target.sample_slates(contexts, rng)
    rewards = env.sample_rewards(contexts, slates, rng)
    return empirical_step_cdf(rewards, grid)


@dataclass(frozen=True)
class ResultRow:
    estimator: str
    n: int
    metric: str
    mean: float
    stderr: float
    mse: float
    trials: int


@dataclass(frozen=True)
class CellError:
    estimator: str
    n: int
    trial: int
    metric: str  # "*" when the estimate itself failed
    message: str


@dataclass(frozen=True)
class ResultTable:
    rows: tuple[ResultRow, ...]
    errors: tuple[CellError, ...]
    ground_truth: dict

    @property
    def ok(self) -> bool:
        return not self.errors

    def row(self, estimator: str, n: int, metric: str) -> ResultRow:
        for r in self.rows:
            if (r.estimator, r.n, r.metric) == (estimator, n, metric):
                return r
        raise KeyError((estimator, n, metric))


# worker-process state, installed once per worker by the pool initializer
_WORKER: dict[str, Any] = {}


def _init_worker(payload: dict) -> None:
    _WORKER.update(payload)


def _run_cell_remote(args: tuple[int, int]) -> list:
    return _run_cell(
        _WORKER["env"],
        _WORKER["mu"],
        _WORKER["pi"],
        _WORKER["grid"],
        _WORKER["truth"],
        _WORKER["config"],
        *args,
    )


def _run_cell(
    env,
    mu: FactoredPolicy,
    pi: FactoredPolicy,
    grid: RewardGrid,
    truth: StepCdf,
    config: ExperimentConfig,
    size_idx: int,
    trial_idx: int,
) -> list:
    """One (size, trial) cell: shared log, all estimators, all metrics.

    Returns ``[(estimator, metrics-dict | error-message), ...]``.
    """
    n = config.sample_sizes[size_idx]
    rng = np.random.default_rng(
        np.random.SeedSequence(config.master_seed, spawn_key=(0, size_idx, trial_idx))
    )
    data = generate_log(env, mu, n, rng)
    out = []
    for name in config.estimators:
        kind = WeightKind.parse(name)
        try:
            raw = estimate_cdf(kind, pi, data, mu, grid)
            cdf = monotone_repair(raw)
        except (SlateOpeError, ValueError) as exc:
            out.append((name, {}, [("*", str(exc))]))
            continue
        values: dict[str, float] = {}
        failures: list[tuple[str, str]] = []
        for metric in config.metrics:
            try:
                values[metric] = _parse_metric(metric)(cdf, truth)
            except (SlateOpeError, ValueError) as exc:
                failures.append((metric, str(exc)))
        out.append((name, values, failures))
    return out


def run_experiment(config: ExperimentConfig) -> ResultTable:
    """Execute the full protocol and aggregate per (estimator, n, metric).

    Ground truth is computed once; cells run independently (optionally in a
    process pool) and are reduced in (size, trial) order, so repeated runs
    of one config produce identical tables.
    """
    env = build_environment(config.environment)
    mu = build_policy(
        config.logging_policy, env, config.master_seed, _LANE_LOGGING_POLICY
    )
    pi = build_policy(
        config.target_policy, env, config.master_seed, _LANE_TARGET_POLICY
    )
    grid = RewardGrid.linspace(*env.reward_range, config.grid_size)
    truth = ground_truth_cdf(env, pi, grid, config)
    gt_values = {m: _ground_truth_value(m, truth) for m in config.metrics}

    cells = [
        (size_idx, trial_idx)
        for size_idx in range(len(config.sample_sizes))
        for trial_idx in range(config.trials)
    ]
    if config.workers > 1:
        payload = {
            "env": env, "mu": mu, "pi": pi,
            "grid": grid, "truth": truth, "config": config,
        }
        with ProcessPoolExecutor(
            max_workers=config.workers,
            initializer=_init_worker,
            initargs=(payload,),
        ) as pool:
            results = list(pool.map(_run_cell_remote, cells, chunksize=8))
    else:
        results = [
            _run_cell(env, mu, pi, grid, truth, config, *cell) for cell in cells
        ]

    summaries: dict[tuple[str, int], list[TrialSummary]] = {}
    errors: list[CellError] = []
    for (size_idx, trial_idx), cell_out in zip(cells, results):
        n = config.sample_sizes[size_idx]
        for estimator, values, failures in cell_out:
            for metric, message in failures:
                errors.append(CellError(estimator, n, trial_idx, metric, message))
            if values:
                summaries.setdefault((estimator, n), []).append(
                    TrialSummary(estimator=estimator, n=n, metrics=values)
                )

    rows = []
    for estimator in config.estimators:
        for n in config.sample_sizes:
            trials = summaries.get((estimator, n), [])
            for metric in config.metrics:
                with_metric = [t for t in trials if metric in t.metrics]
                if with_metric:
                    agg = aggregate_trials(with_metric, gt_values[metric], metric)
                    rows.append(
                        ResultRow(
                            estimator=estimator,
                            n=n,
                            metric=metric,
                            mean=agg.mean,
                            stderr=agg.standard_error,
                            mse=agg.mse,
                            trials=agg.trials,
                        )
                    )
                else:
                    rows.append(
                        ResultRow(estimator, n, metric, float("nan"), float("nan"),
                                  float("nan"), 0)
                    )
    return ResultTable(
        rows=tuple(rows), errors=tuple(errors), ground_truth=gt_values
    )


def _safe_name(metric: str) -> str:
    return metric.replace("@", "_")


def emit_outputs(table: ResultTable, config: ExperimentConfig) -> list[Path]:
    """Write results.csv, results.json, per-metric plot data and figures.

    results.csv carries the fixed ``estimator,n,metric,mean,stderr,trials``
    columns and is byte-stable across runs of the same config; timestamps
    are confined to the JSON metadata.
    """
    if not table.rows:
        raise ValueError("cannot emit an empty result table")
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = out_dir / "results.csv"
    lines = [RESULTS_CSV_HEADER]
    for r in table.rows:
        lines.append(
            f"{r.estimator},{r.n},{r.metric},"
            f"{FLOAT_FMT % r.mean},{FLOAT_FMT % r.stderr},{r.trials}"
        )
    csv_path.write_text("\n".join(lines) + "\n")
    written.append(csv_path)

    json_path = out_dir / "results.json"
    json_path.write_text(
        json.dumps(
            {
                "schema_version": config.schema_version,
                "config": config.to_dict(),
                "master_seed": config.master_seed,
                "generated_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
                "ground_truth": table.ground_truth,
                "rows": [asdict(r) for r in table.rows],
                "errors": [asdict(e) for e in table.errors],
            },
            indent=2,
        )
        + "\n"
    )
    written.append(json_path)

    for metric in config.metrics:
        plot_path = out_dir / f"plot_{_safe_name(metric)}.csv"
        plot_lines = ["estimator,n,mean,stderr"]
        for estimator in config.estimators:
            for n in config.sample_sizes:
                r = table.row(estimator, n, metric)
                plot_lines.append(
                    f"{estimator},{n},{FLOAT_FMT % r.mean},{FLOAT_FMT % r.stderr}"
                )
        plot_path.write_text("\n".join(plot_lines) + "\n")
        written.append(plot_path)

    if config.figures:
        from .figures import render_metric_figures

        written.extend(render_metric_figures(table, config))
    return written
