"""Render result-table figures to files next to the delimited outputs.

One PNG per metric: mean value against sample size (log x) with one-standard-
error bars, one series per estimator.  Rendering is file-only (Agg backend)
so runs work headless; the plot-data CSVs carry the same numbers for anyone
who prefers their own plotting stack.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["render_metric_figures"]

_MARKERS = ("o", "s", "^", "d", "v", "*")


def render_metric_figures(table, config) -> list[Path]:
    """Write ``figures/<metric>.png`` for every configured metric."""
    fig_dir = Path(config.output_dir) / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric in config.metrics:
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for i, estimator in enumerate(config.estimators):
            rows = [table.row(estimator, n, metric) for n in config.sample_sizes]
            ax.errorbar(
                [r.n for r in rows],
                [r.mean for r in rows],
                yerr=[r.stderr for r in rows],
                marker=_MARKERS[i % len(_MARKERS)],
                capsize=3,
                label=estimator,
            )
        truth = table.ground_truth.get(metric)
        if truth is not None and metric != "ks":
            ax.axhline(truth, color="gray", linestyle="--", linewidth=1,
                       label="ground truth")
        ax.set_xscale("log")
        ax.set_xlabel("sample size")
        ax.set_ylabel(metric)
        ax.set_title(f"{config.name}: {metric}")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = fig_dir / f"{metric.replace('@', '_')}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written
