"""Importance weights and off-policy reward-CDF estimation.

Three weight families share one estimator.  With per-slot density ratios
``Y_k = target_k(a_k|x) / logging_k(a_k|x)``:

* product weight (the structure-agnostic baseline):  ``rho = prod_k Y_k``
* slot-additive weight:                              ``G = sum_k (Y_k - 1) + 1``
* order-m subset weight, inclusion-exclusion over the non-empty slot
  subsets S of size at most m:
  ``G_m = 1 + sum_{S: 1 <= |S| <= m} prod_{i in S} (Y_i - 1)``

``G_m`` collapses to the additive weight at m=1 and, by binomial expansion,
to the product weight at m=K; those orders are evaluated through the
additive/product code paths directly, which is the numerically stable form
of the same function.  The centered-product construction is what makes the
weight correct for reward CDFs that decompose over slot subsets of order up
to m: conditioned on any m slots, the remaining centered factors average
out to zero under a factored logging policy, so the weight restricted to
those slots behaves like their exact density ratio.  (A sum of plain
``prod Y - 1`` terms over only the size-m subsets does not have this
property once distinct subsets share slots.)

The CDF estimate at a threshold ``nu`` is the weighted indicator mean
``(1/n) * sum_i w_i * 1{R_i <= nu}``.

The raw estimate is intentionally NOT clipped or monotonized here: additive
weights can be negative (as low as ``1 - K`` when no slot ratio survives), so
the raw statistic can leave [0, 1] and lose monotonicity.  Unbiasedness
holds only for the raw form; monotone repair lives in :mod:`slate_ope.metrics`.

Per-entry weights are computed in fixed-size chunks with numpy reductions, so
evaluation order (and therefore every sum) is deterministic regardless of how
callers parallelize across log entries.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import (
    FLOAT_FMT,
    ContextId,
    FactoredPolicy,
    LogDataset,
    Slate,
    SlateOpeError,
    SupportViolationError,
)

__all__ = [
    "SUBSET_GUARD",
    "CdfEstimate",
    "RewardGrid",
    "WeightDiagnostics",
    "WeightKind",
    "compute_weights",
    "effective_sample_size",
    "estimate_cdf",
    "importance_weight",
    "load_cdf_estimate",
    "save_cdf_estimate",
    "weight_diagnostics",
]

# Refuse order-m weights whose subset expansion has more terms than this.
SUBSET_GUARD = 1_000_000

# Chunked weight evaluation keeps peak memory bounded for n = 10^7 logs while
# preserving a deterministic reduction order.
_CHUNK = 1 << 20


@dataclass(frozen=True)
class WeightKind:
    """Which importance-weight family to use.

    ``label`` is one of ``"uno"`` (product), ``"suno"`` (slot-additive) or
    ``"m-way"``; the latter carries the subset order ``m``.
    """

    label: str
    m: int | None = None

    def __post_init__(self) -> None:
        if self.label not in ("uno", "suno", "m-way"):
            raise ValueError(f"unknown weight kind {self.label!r}")
        if self.label == "m-way":
            if self.m is None or self.m < 1:
                raise ValueError("m-way weights need a subset order m >= 1")
        elif self.m is not None:
            raise ValueError(f"{self.label!r} weights take no order parameter")

    @classmethod
    def parse(cls, text: str) -> "WeightKind":
        """Parse ``"uno"``, ``"suno"`` or ``"m<order>"`` (e.g. ``"m2"``)."""
        text = text.strip().lower()
        if text in ("uno", "suno"):
            return cls(text)
        if text.startswith("m") and text[1:].isdigit():
            return cls("m-way", int(text[1:]))
        raise ValueError(f"cannot parse weight kind {text!r}")

    def __str__(self) -> str:
        if self.label == "m-way":
            return f"m{self.m}"
        return self.label


UNO = WeightKind("uno")
SUNO = WeightKind("suno")


@dataclass(frozen=True)
class RewardGrid:
    """Strictly increasing evaluation points for CDF estimates."""

    points: np.ndarray

    def __post_init__(self) -> None:
        points = np.ascontiguousarray(self.points, dtype=np.float64)
        if points.ndim != 1 or points.shape[0] < 1:
            raise ValueError("grid must be a non-empty 1-d array")
        if points.shape[0] > 1 and not np.all(np.diff(points) > 0):
            raise ValueError("grid points must be strictly increasing")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    @classmethod
    def linspace(cls, r_min: float, r_max: float, size: int = 1000) -> "RewardGrid":
        """Evenly spaced grid over [r_min, r_max]; a fine default size keeps
        the discretization floor well below the metric tolerances."""
        if size < 2:
            raise ValueError("grid size must be >= 2")
        if not r_min < r_max:
            raise ValueError(f"need r_min < r_max, got [{r_min}, {r_max}]")
        return cls(np.linspace(r_min, r_max, size))

    def covers(self, reward_range: tuple[float, float]) -> bool:
        return self.points[0] <= reward_range[0] and self.points[-1] >= reward_range[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def cell_width(self) -> float:
        """Largest gap between adjacent points: the resolution floor for all
        metrics computed downstream."""
        if len(self) == 1:
            return 0.0
        return float(np.diff(self.points).max())


@dataclass(frozen=True)
class WeightDiagnostics:
    """Summary statistics of the per-entry importance weights."""

    mean: float
    variance: float
    ess: float
    frac_zero: float
    frac_negative: float
    n: int


@dataclass(frozen=True)
class CdfEstimate:
    """Raw off-policy CDF estimate on a reward grid.

    ``values`` may leave [0, 1] and be non-monotone when additive weights go
    negative; that is a property of the unbiased raw statistic, not a bug.
    """

    grid: RewardGrid
    values: np.ndarray
    n_used: int
    weight_kind: WeightKind
    diagnostics: WeightDiagnostics | None = None

    def __post_init__(self) -> None:
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.shape != self.grid.points.shape:
            raise ValueError("values must align with the grid")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


def _slot_ratios(
    target: FactoredPolicy,
    logging: FactoredPolicy,
    contexts: np.ndarray,
    slates: np.ndarray,
) -> np.ndarray:
    """Per-slot density ratios Y with shape (n, K); hard error on zero
    logging mass at any logged slot action (common-support precondition)."""
    n, k = slates.shape
    ratios = np.empty((n, k), dtype=np.float64)
    for slot in range(k):
        mu = logging.slot_probs(contexts, slot, slates[:, slot])
        zero = np.flatnonzero(mu == 0.0)
        if zero.size:
            i = int(zero[0])
            raise SupportViolationError(
                context=int(contexts[i]), slot=slot, action=int(slates[i, slot])
            )
        pi = target.slot_probs(contexts, slot, slates[:, slot])
        ratios[:, slot] = pi / mu
    return ratios


def _weights_from_ratios(kind: WeightKind, ratios: np.ndarray) -> np.ndarray:
    k = ratios.shape[1]
    if kind.label == "uno":
        return np.prod(ratios, axis=1)
    if kind.label == "suno":
        return 1.0 + np.sum(ratios - 1.0, axis=1)
    m = kind.m
    if not 1 <= m <= k:
        raise ValueError(f"m-way order {m} outside [1, K={k}]")
    # the collapse orders ARE the additive/product weights; evaluating them
    # through those paths keeps the identities exact in floating point
    if m == 1:
        return 1.0 + np.sum(ratios - 1.0, axis=1)
    if m == k:
        return np.prod(ratios, axis=1)
    n_terms = sum(math.comb(k, j) for j in range(1, m + 1))
    if n_terms > SUBSET_GUARD:
        raise SlateOpeError(
            f"order-{m} weights over K={k} slots need {n_terms} subset "
            f"terms, above the guard of {SUBSET_GUARD}"
        )
    centered = ratios - 1.0
    weights = np.ones(ratios.shape[0], dtype=np.float64)
    for order in range(1, m + 1):
        for subset in combinations(range(k), order):
            weights = weights + np.prod(centered[:, subset], axis=1)
    return weights


def compute_weights(
    kind: WeightKind,
    target: FactoredPolicy,
    logging: FactoredPolicy,
    contexts: np.ndarray,
    slates: np.ndarray,
) -> np.ndarray:
    """Importance weights for paired (context, slate) arrays."""
    contexts = np.asarray(contexts, dtype=np.int64)
    slates = np.asarray(slates, dtype=np.int64)
    logging.config.validate_slate_array(slates)
    n = slates.shape[0]
    out = np.empty(n, dtype=np.float64)
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        ratios = _slot_ratios(
            target, logging, contexts[start:stop], slates[start:stop]
        )
        out[start:stop] = _weights_from_ratios(kind, ratios)
    return out


def importance_weight(
    kind: WeightKind,
    target: FactoredPolicy,
    logging: FactoredPolicy,
    context: ContextId,
    slate: Slate,
) -> float:
    """Importance weight of one logged slate under the chosen family."""
    logging.config.validate_slate(slate)
    contexts = np.array([context], dtype=np.int64)
    slates = np.array([slate.actions], dtype=np.int64)
    ratios = _slot_ratios(target, logging, contexts, slates)
    return float(_weights_from_ratios(kind, ratios)[0])


def estimate_cdf(
    kind: WeightKind,
    target: FactoredPolicy,
    data: LogDataset,
    logging: FactoredPolicy,
    grid: RewardGrid,
) -> CdfEstimate:
    """Estimate the target policy's reward CDF from logged data.

    For each grid point ``nu`` the value is ``(1/n) sum_i w_i 1{R_i <= nu}``,
    evaluated in one pass: rewards are sorted once, weights prefix-summed in
    reward order, and the prefix sums looked up per grid point.  Costs
    O(n log n + |grid| log n), so a 10^4-point grid over 10^7 entries is fine.
    """
    if len(data) == 0:
        raise SlateOpeError("cannot estimate a CDF from an empty dataset")
    if not grid.covers(data.reward_range):
        raise SlateOpeError(
            f"grid [{grid.points[0]}, {grid.points[-1]}] does not cover the "
            f"dataset reward range {data.reward_range}"
        )
    weights = compute_weights(kind, target, logging, data.contexts, data.slates)
    order = np.argsort(data.rewards, kind="stable")
    sorted_rewards = data.rewards[order]
    prefix = np.cumsum(weights[order])
    idx = np.searchsorted(sorted_rewards, grid.points, side="right")
    values = np.where(idx > 0, prefix[idx - 1], 0.0) / len(data)
    return CdfEstimate(
        grid=grid,
        values=values,
        n_used=len(data),
        weight_kind=kind,
        diagnostics=_diagnostics_from_weights(weights),
    )


def effective_sample_size(weights: Iterable[float]) -> float:
    """ESS = (sum w)^2 / sum w^2; how many unit-weight samples the weighted
    set is worth.  All-zero weights give 0."""
    w = np.asarray(list(weights) if not isinstance(weights, np.ndarray) else weights)
    w = w.astype(np.float64, copy=False)
    if w.size == 0:
        raise ValueError("effective sample size needs at least one weight")
    denom = float(np.sum(w * w))
    if denom == 0.0:
        return 0.0
    return float(np.sum(w)) ** 2 / denom


def _diagnostics_from_weights(weights: np.ndarray) -> WeightDiagnostics:
    return WeightDiagnostics(
        mean=float(weights.mean()),
        variance=float(weights.var()),
        ess=effective_sample_size(weights),
        frac_zero=float(np.mean(weights == 0.0)),
        frac_negative=float(np.mean(weights < 0.0)),
        n=int(weights.shape[0]),
    )


def weight_diagnostics(
    kind: WeightKind,
    target: FactoredPolicy,
    data: LogDataset,
    logging: FactoredPolicy,
) -> WeightDiagnostics:
    """Summary statistics over the dataset's importance weights."""
    if len(data) == 0:
        raise SlateOpeError("cannot summarize weights of an empty dataset")
    weights = compute_weights(kind, target, logging, data.contexts, data.slates)
    return _diagnostics_from_weights(weights)


def save_cdf_estimate(estimate: CdfEstimate, csv_path: str | Path) -> Path:
    """Write a two-column ``nu,value`` CSV plus a JSON sidecar.

    The sidecar (same stem, ``.json``) carries the weight kind, sample count
    and weight diagnostics.  Returns the sidecar path.
    """
    csv_path = Path(csv_path)
    lines = ["nu,value"]
    for nu, value in zip(estimate.grid.points, estimate.values):
        lines.append(f"{FLOAT_FMT % nu},{FLOAT_FMT % value}")
    csv_path.write_text("\n".join(lines) + "\n")
    sidecar = csv_path.with_suffix(".json")
    meta = {
        "weight_kind": str(estimate.weight_kind),
        "n_used": estimate.n_used,
        "diagnostics": asdict(estimate.diagnostics)
        if estimate.diagnostics is not None
        else None,
    }
    sidecar.write_text(json.dumps(meta, indent=2) + "\n")
    return sidecar


def load_cdf_estimate(csv_path: str | Path) -> CdfEstimate:
    csv_path = Path(csv_path)
    rows = csv_path.read_text().splitlines()
    if not rows or rows[0] != "nu,value":
        raise ValueError(f"{csv_path}: expected 'nu,value' header")
    data = np.array(
        [[float(f) for f in row.split(",")] for row in rows[1:] if row]
    ).reshape(-1, 2)
    sidecar = csv_path.with_suffix(".json")
    meta = json.loads(sidecar.read_text())
    diagnostics = (
        WeightDiagnostics(**meta["diagnostics"])
        if meta.get("diagnostics") is not None
        else None
    )
    return CdfEstimate(
        grid=RewardGrid(data[:, 0]),
        values=data[:, 1],
        n_used=int(meta["n_used"]),
        weight_kind=WeightKind.parse(meta["weight_kind"]),
        diagnostics=diagnostics,
    )
