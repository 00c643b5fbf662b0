"""Slate environments with higher-order slot interactions.

Two constructions:

* :class:`InteractionEnv` has expected reward

      E[R | A] = sum_k gamma^(k-1) * base[k, a_k]
               + sum_{j<k} pair[(j,k), a_j, a_k]

  The position-cascade decay ``gamma`` alone keeps the expected reward
  additive over single slots (a decayed per-slot table is still a per-slot
  table); any nonzero pairwise table is what breaks single-slot additive
  decomposability.  Observation noise is a zero-mean Gaussian truncated at
  +/- 3 sigma, so conditional means match the tables exactly and rewards
  stay inside the declared range.

* :class:`MWayCdfEnv` makes the conditional reward CDF decompose exactly
  into C(K, m) component functions of m-slot action tuples (normalized
  sigmoid slices, mirroring the single-slot synthetic environment).  It is
  the test bed for the m-subset importance weights: order-m weights are
  unbiased here, order below m is not.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .core import Slate, SlateConfig, SlateOpeError
from .synth import _sigmoid, sample_by_inversion

__all__ = [
    "InteractionEnv",
    "MWayCdfEnv",
    "build_interaction_env",
    "build_mway_env",
    "exact_target_mean",
    "load_interaction_manifest",
    "load_mway_manifest",
    "save_interaction_manifest",
    "save_mway_manifest",
]

MWAY_TABLE_GUARD = 10_000_000
_NOISE_TRUNC_SIGMAS = 3.0


@dataclass(frozen=True)
class InteractionEnv:
    """Cascade-decayed pairwise-interaction slate environment."""

    config: SlateConfig
    base: np.ndarray         # (K, N) per-slot effects
    pair_tables: np.ndarray  # (C(K,2), N, N), lexicographic (j, k) pairs
    gamma: float
    noise_scale: float
    pairwise_strength: float
    seed: int

    num_contexts: int = 1

    def __post_init__(self) -> None:
        k, n = self.config.num_slots, self.config.actions_per_slot
        base = np.ascontiguousarray(self.base, dtype=np.float64)
        pairs = np.ascontiguousarray(self.pair_tables, dtype=np.float64)
        n_pairs = math.comb(k, 2)
        if base.shape != (k, n):
            raise ValueError(f"base table must be shaped ({k}, {n})")
        if pairs.shape != (n_pairs, n, n):
            raise ValueError(f"pair tables must be shaped ({n_pairs}, {n}, {n})")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.noise_scale < 0.0:
            raise ValueError("noise_scale must be non-negative")
        for arr in (base, pairs):
            arr.setflags(write=False)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "pair_tables", pairs)

    @property
    def pair_indices(self) -> list[tuple[int, int]]:
        return list(combinations(range(self.config.num_slots), 2))

    @property
    def _decay(self) -> np.ndarray:
        return self.gamma ** np.arange(self.config.num_slots)

    @property
    def reward_range(self) -> tuple[float, float]:
        """Bounds on E[R|A] (separable per-table extrema), widened by the
        noise truncation radius."""
        decay = self._decay
        lo = float(decay @ self.base.min(axis=1) + self.pair_tables.min(axis=(1, 2)).sum())
        hi = float(decay @ self.base.max(axis=1) + self.pair_tables.max(axis=(1, 2)).sum())
        pad = _NOISE_TRUNC_SIGMAS * self.noise_scale
        return (lo - pad, hi + pad)

    def expected_rewards(self, slates: np.ndarray) -> np.ndarray:
        """E[R | A] per slate row."""
        slates = np.asarray(slates, dtype=np.int64)
        total = (self.base[np.arange(self.config.num_slots), slates] * self._decay).sum(
            axis=1
        )
        for p, (j, k) in enumerate(self.pair_indices):
            total = total + self.pair_tables[p, slates[:, j], slates[:, k]]
        return total

    def expected_reward(self, slate: Slate) -> float:
        self.config.validate_slate(slate)
        return float(self.expected_rewards(np.array([slate.actions]))[0])

    def sample_contexts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(n, dtype=np.int64)

    def sample_rewards(
        self,
        contexts: np.ndarray,
        slates: np.ndarray,
        rng: np.random.Generator,
    ) -> np.ndarray:
        means = self.expected_rewards(slates)
        if self.noise_scale == 0.0:
            return means
        return means + _truncated_normal(means.shape[0], self.noise_scale, rng)


def _truncated_normal(
    n: int, scale: float, rng: np.random.Generator
) -> np.ndarray:
    """Zero-mean Gaussian truncated at +/- 3 sigma, by rejection."""
    bound = _NOISE_TRUNC_SIGMAS * scale
    out = rng.normal(0.0, scale, size=n)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, scale, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def build_interaction_env(
    config: SlateConfig,
    pairwise_strength: float,
    gamma: float,
    noise: float,
    seed: int,
) -> InteractionEnv:
    """Draw effect tables from ``seed``; pairwise tables scale with
    ``pairwise_strength`` (0 gives a fully additive environment)."""
    if pairwise_strength < 0.0:
        raise ValueError("pairwise_strength must be non-negative")
    rng = np.random.default_rng(seed)
    k, n = config.num_slots, config.actions_per_slot
    base = rng.uniform(0.0, 1.0, size=(k, n))
    pair_tables = pairwise_strength * rng.uniform(
        0.0, 1.0, size=(math.comb(k, 2), n, n)
    )
    return InteractionEnv(
        config=config,
        base=base,
        pair_tables=pair_tables,
        gamma=gamma,
        noise_scale=noise,
        pairwise_strength=pairwise_strength,
        seed=seed,
    )


def exact_target_mean(env: InteractionEnv, target) -> float:
    """Exact E_pi[R] by slate enumeration (noise is mean-zero)."""
    from .core import slate_matrix

    slates = slate_matrix(env.config)
    probs = np.ones(slates.shape[0])
    for k in range(env.config.num_slots):
        dist = target.slot_distribution(0, k)
        probs *= dist[slates[:, k]]
    return float(probs @ env.expected_rewards(slates))


@dataclass(frozen=True)
class MWayCdfEnv:
    """Environment whose conditional reward CDF decomposes over m-slot
    subsets; rewards live on [0, 1]."""

    config: SlateConfig
    m: int
    slopes: np.ndarray   # (C(K,m), N**m)
    centers: np.ndarray  # (C(K,m), N**m)
    seed: int

    reward_range: tuple[float, float] = (0.0, 1.0)
    num_contexts: int = 1

    def __post_init__(self) -> None:
        k, n = self.config.num_slots, self.config.actions_per_slot
        if not 1 <= self.m <= k:
            raise ValueError(f"m must lie in [1, K={k}]")
        shape = (math.comb(k, self.m), n**self.m)
        slopes = np.ascontiguousarray(self.slopes, dtype=np.float64)
        centers = np.ascontiguousarray(self.centers, dtype=np.float64)
        if slopes.shape != shape or centers.shape != shape:
            raise ValueError(f"component tables must be shaped {shape}")
        for arr in (slopes, centers):
            arr.setflags(write=False)
        object.__setattr__(self, "slopes", slopes)
        object.__setattr__(self, "centers", centers)

    @property
    def subsets(self) -> list[tuple[int, ...]]:
        return list(combinations(range(self.config.num_slots), self.m))

    def _flat_actions(self, slates: np.ndarray, subset: tuple[int, ...]) -> np.ndarray:
        """Row index into a component table for each slate's m-tuple."""
        n = self.config.actions_per_slot
        flat = np.zeros(slates.shape[0], dtype=np.int64)
        for slot in subset:
            flat = flat * n + slates[:, slot]
        return flat

    def exact_slate_cdf(
        self, slate: Slate | np.ndarray, nu: np.ndarray | float
    ) -> np.ndarray | float:
        actions = slate.actions if isinstance(slate, Slate) else np.asarray(slate)
        slates = np.asarray(actions, dtype=np.int64).reshape(1, -1)
        nu_arr = np.atleast_1d(np.asarray(nu, dtype=np.float64))
        total = np.zeros(nu_arr.shape[0])
        for s, subset in enumerate(self.subsets):
            idx = int(self._flat_actions(slates, subset)[0])
            total += self._component(s, idx, nu_arr)
        if np.isscalar(nu):
            return float(total[0])
        return total

    def _component(self, subset_idx: int, flat: int | np.ndarray, nu: np.ndarray):
        # rescale to [0, 1] first so each component is exactly 1/C(K, m) at nu=1
        s = self.slopes[subset_idx, flat]
        c = self.centers[subset_idx, flat]
        low = _sigmoid(-s * c)
        high = _sigmoid(s * (1.0 - c))
        return ((_sigmoid(s * (nu - c)) - low) / (high - low)) / len(self.subsets)

    def sample_contexts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(n, dtype=np.int64)

    def sample_rewards(
        self,
        contexts: np.ndarray,
        slates: np.ndarray,
        rng: np.random.Generator,
    ) -> np.ndarray:
        slates = np.asarray(slates, dtype=np.int64)
        u = rng.random(slates.shape[0])
        # per-sample component parameters are constant across bisection steps
        params = []
        for si in range(len(self.subsets)):
            flat = self._flat_actions(slates, self.subsets[si])
            s = self.slopes[si, flat]
            c = self.centers[si, flat]
            low = _sigmoid(-s * c)
            scale = 1.0 / ((_sigmoid(s * (1.0 - c)) - low) * len(self.subsets))
            params.append((s, c, low, scale))

        def cdf_at(nu: np.ndarray) -> np.ndarray:
            total = np.zeros(nu.shape[0])
            for s, c, low, scale in params:
                total += (_sigmoid(s * (nu - c)) - low) * scale
            return total

        return sample_by_inversion(cdf_at, u, 0.0, 1.0)

    def sample_reward(self, slate: Slate, rng: np.random.Generator) -> float:
        self.config.validate_slate(slate)
        slates = np.array([slate.actions], dtype=np.int64)
        return float(self.sample_rewards(np.zeros(1, dtype=np.int64), slates, rng)[0])


def build_mway_env(config: SlateConfig, m: int, seed: int) -> MWayCdfEnv:
    """Draw per-subset component parameters; each component contributes
    exactly 1/C(K, m) at nu = 1 so every slate's CDF ends at 1."""
    k, n = config.num_slots, config.actions_per_slot
    if not 1 <= m <= k:
        raise ValueError(f"m must lie in [1, K={k}]")
    n_subsets = math.comb(k, m)
    entries = n_subsets * n**m
    if entries > MWAY_TABLE_GUARD:
        raise SlateOpeError(
            f"m-way component tables need {entries} entries, above the guard "
            f"of {MWAY_TABLE_GUARD}"
        )
    rng = np.random.default_rng(seed)
    slopes = rng.uniform(2.0, 10.0, size=(n_subsets, n**m))
    centers = rng.uniform(0.2, 0.8, size=(n_subsets, n**m))
    return MWayCdfEnv(config=config, m=m, slopes=slopes, centers=centers, seed=seed)


def save_interaction_manifest(env: InteractionEnv, path: str | Path) -> None:
    payload = {
        "kind": "interaction",
        "seed": env.seed,
        "num_slots": env.config.num_slots,
        "actions_per_slot": env.config.actions_per_slot,
        "gamma": env.gamma,
        "noise_scale": env.noise_scale,
        "pairwise_strength": env.pairwise_strength,
        "base": env.base.tolist(),
        "pair_tables": env.pair_tables.tolist(),
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_interaction_manifest(path: str | Path) -> InteractionEnv:
    payload = json.loads(Path(path).read_text())
    if payload.get("kind") != "interaction":
        raise ValueError(f"{path}: not an interaction environment manifest")
    return InteractionEnv(
        config=SlateConfig(payload["num_slots"], payload["actions_per_slot"]),
        base=np.array(payload["base"]),
        pair_tables=np.array(payload["pair_tables"]),
        gamma=payload["gamma"],
        noise_scale=payload["noise_scale"],
        pairwise_strength=payload["pairwise_strength"],
        seed=payload["seed"],
    )


def save_mway_manifest(env: MWayCdfEnv, path: str | Path) -> None:
    payload = {
        "kind": "mway-cdf",
        "seed": env.seed,
        "num_slots": env.config.num_slots,
        "actions_per_slot": env.config.actions_per_slot,
        "m": env.m,
        "slopes": env.slopes.tolist(),
        "centers": env.centers.tolist(),
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_mway_manifest(path: str | Path) -> MWayCdfEnv:
    payload = json.loads(Path(path).read_text())
    if payload.get("kind") != "mway-cdf":
        raise ValueError(f"{path}: not an m-way environment manifest")
    return MWayCdfEnv(
        config=SlateConfig(payload["num_slots"], payload["actions_per_slot"]),
        m=payload["m"],
        slopes=np.array(payload["slopes"]),
        centers=np.array(payload["centers"]),
        seed=payload["seed"],
    )
