"""Risk and goodness-of-fit metrics computed from step CDFs.

A :class:`StepCdf` is a right-continuous step function on a reward grid:
the value at grid point ``nu_j`` holds on ``[nu_j, nu_{j+1})``.  Raw CDF
estimates are made valid by :func:`monotone_repair` (running maximum, then
clipping to [0, 1]); everything downstream consumes the repaired form.

Non-linear functionals of the CDF (quantiles, VaR, CVaR) computed from an
estimated CDF are biased even when the CDF estimate itself is unbiased;
consistency under growing sample size is the guarantee to test for them.
Grid-cell width is the resolution floor for every metric here.
"""

from __future__ import annotations

import logging as _logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .estimators import CdfEstimate, RewardGrid

__all__ = [
    "StepCdf",
    "TrialAggregate",
    "TrialSummary",
    "aggregate_trials",
    "cvar",
    "empirical_step_cdf",
    "ks_statistic",
    "mean_from_cdf",
    "monotone_repair",
    "quantile",
    "step_eval",
]

logger = _logging.getLogger(__name__)

_MASS_TOL = 1e-9


@dataclass(frozen=True)
class StepCdf:
    """Monotone CDF values on a reward grid.

    ``under_mass`` marks repaired estimates whose final value stayed below 1
    after clipping; metrics then operate on the available mass.
    """

    grid: RewardGrid
    values: np.ndarray
    under_mass: bool = False

    def __post_init__(self) -> None:
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.shape != self.grid.points.shape:
            raise ValueError("values must align with the grid")
        if values.size and (
            values.min() < -_MASS_TOL or values.max() > 1.0 + _MASS_TOL
        ):
            raise ValueError("step CDF values must lie in [0, 1]")
        # snap float dust (e.g. cumsum overshoot by an ulp) back into range
        values = np.clip(values, 0.0, 1.0)
        if np.any(np.diff(values) < 0.0):
            raise ValueError("step CDF values must be non-decreasing")
        if not self.under_mass and values.size and values[-1] < 1.0 - _MASS_TOL:
            raise ValueError(
                f"final CDF value {values[-1]} < 1; pass under_mass=True for "
                "mass-deficient estimates"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def total_mass(self) -> float:
        return float(self.values[-1])

    def jumps(self) -> np.ndarray:
        """Per-grid-point probability increments (first point jumps from 0)."""
        return np.diff(self.values, prepend=0.0)


def monotone_repair(raw: CdfEstimate) -> StepCdf:
    """Project a raw CDF estimate onto valid step CDFs.

    Running maximum in grid order, then clip to [0, 1].  The result is
    flagged ``under_mass`` when the final value stays below 1 (negative
    weights can leave estimated mass missing).  Idempotent on valid inputs.
    """
    values = np.clip(np.maximum.accumulate(raw.values), 0.0, 1.0)
    under = bool(values.size and values[-1] < 1.0 - _MASS_TOL)
    return StepCdf(grid=raw.grid, values=values, under_mass=under)


def step_eval(cdf: StepCdf, x: float | np.ndarray) -> float | np.ndarray:
    """Evaluate the step function at x (0 below the first grid point)."""
    idx = np.searchsorted(cdf.grid.points, x, side="right")
    values = np.concatenate(([0.0], cdf.values))
    out = values[idx]
    if np.isscalar(x):
        return float(out)
    return out


def ks_statistic(
    estimate: StepCdf, truth: StepCdf, resample_truth: bool = False
) -> float:
    """Largest absolute gap between two CDFs over the estimate's grid.

    Requires a shared grid unless ``resample_truth`` is set, in which case
    the truth is evaluated as a step function at the estimate's points.
    """
    if truth.grid.points.shape == estimate.grid.points.shape and np.array_equal(
        truth.grid.points, estimate.grid.points
    ):
        truth_values = truth.values
    elif resample_truth:
        truth_values = step_eval(truth, estimate.grid.points)
    else:
        raise ValueError(
            "CDFs live on different grids; pass resample_truth=True to "
            "evaluate the truth on the estimate's grid"
        )
    return float(np.abs(estimate.values - truth_values).max())


def mean_from_cdf(cdf: StepCdf) -> float:
    """Expectation of the discrete distribution implied by CDF increments.

    ``sum_j nu_j * (F(nu_j) - F(nu_{j-1}))`` with F = 0 before the grid.
    For under-mass CDFs the sum runs over the available mass, unnormalized
    (the mean stays linear in the CDF); the mass used is logged.
    """
    mean = float(np.dot(cdf.grid.points, cdf.jumps()))
    if cdf.under_mass:
        logger.debug(
            "mean_from_cdf over mass-deficient CDF: mass used %.6g", cdf.total_mass
        )
    return mean


def quantile(cdf: StepCdf, alpha: float) -> float:
    """Smallest grid point with F(nu) >= alpha (step-function inverse).

    The median is ``quantile(0.5)`` and VaR_alpha is ``quantile(alpha)``.
    Resolution is one grid cell; no interpolation between points.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if cdf.total_mass < alpha:
        raise ValueError(
            f"total CDF mass {cdf.total_mass} is below alpha={alpha}"
        )
    idx = int(np.searchsorted(cdf.values, alpha, side="left"))
    return float(cdf.grid.points[idx])


def cvar(cdf: StepCdf, alpha: float) -> float:
    """Expected reward in the lower alpha-tail (at or below VaR_alpha).

    The jump at VaR_alpha is truncated so the included mass is exactly
    alpha, then the truncated tail expectation is divided by alpha.
    """
    var = quantile(cdf, alpha)
    idx = int(np.searchsorted(cdf.values, alpha, side="left"))
    jumps = cdf.jumps()
    below = float(np.dot(cdf.grid.points[:idx], jumps[:idx]))
    mass_below = float(cdf.values[idx - 1]) if idx > 0 else 0.0
    return (below + var * (alpha - mass_below)) / alpha


def empirical_step_cdf(
    samples: np.ndarray,
    grid: RewardGrid,
    weights: np.ndarray | None = None,
) -> StepCdf:
    """Empirical (optionally weighted) CDF of samples on a grid.

    Weights are normalized to total mass 1; they must be non-negative.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("need at least one sample")
    if samples.max() > grid.points[-1]:
        raise ValueError(
            f"samples reach {samples.max()}, beyond the grid end "
            f"{grid.points[-1]}"
        )
    if weights is None:
        weights = np.full(samples.shape[0], 1.0 / samples.shape[0])
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != samples.shape:
            raise ValueError("weights must align with samples")
        if weights.min() < 0.0:
            raise ValueError("weights must be non-negative")
        total = weights.sum()
        if total <= 0.0:
            raise ValueError("weights must have positive total mass")
        weights = weights / total
    order = np.argsort(samples, kind="stable")
    prefix = np.cumsum(weights[order])
    idx = np.searchsorted(samples[order], grid.points, side="right")
    values = np.where(idx > 0, prefix[np.maximum(idx - 1, 0)], 0.0)
    # float cumsum can overshoot 1 by an ulp; the last value is exact mass 1
    values = np.clip(values, 0.0, 1.0)
    values[-1] = 1.0
    return StepCdf(grid=grid, values=np.maximum.accumulate(values))


@dataclass(frozen=True)
class TrialSummary:
    """Metric values measured in one experiment trial."""

    estimator: str
    n: int
    metrics: Mapping[str, float]

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("sample size must be >= 1")


@dataclass(frozen=True)
class TrialAggregate:
    mean: float
    standard_error: float
    mse: float
    trials: int


def aggregate_trials(
    per_trial: Sequence[TrialSummary] | Sequence[float],
    ground_truth: float,
    metric: str | None = None,
) -> TrialAggregate:
    """Cross-trial mean, standard error and MSE against a ground truth.

    Accepts either raw per-trial values or :class:`TrialSummary` records
    (then ``metric`` selects which value to aggregate).  MSE captures both
    bias and variance; the standard error is sample-std / sqrt(trials) and
    is NaN for a single trial.
    """
    if len(per_trial) == 0:
        raise ValueError("aggregate_trials needs at least one trial")
    if isinstance(per_trial[0], TrialSummary):
        if metric is None:
            raise ValueError("metric name required when passing TrialSummary records")
        values = np.array([t.metrics[metric] for t in per_trial], dtype=np.float64)
    else:
        values = np.asarray(per_trial, dtype=np.float64)
    mean = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else float("nan")
    mse = float(np.mean((values - ground_truth) ** 2))
    return TrialAggregate(mean=mean, standard_error=se, mse=mse, trials=values.size)
