"""Semi-synthetic slate simulator built from a user-item ratings matrix.

Pipeline: binarized interactions -> closed-form item-item model (EASE) ->
per-user preference scores -> top-N candidate sets -> nDCG slate reward.
The slate reward is deterministic given (user, slate), so the conditional
reward CDF is a step function; the expected reward decomposes additively
over slots (each slot contributes ``gain / log2(slot_index + 1)``), but the
full reward CDF does not in general.

Local action index ``a`` for a user means that user's ``a``-th best
candidate (0 is best), so the greedy slate is ``(0, 1, ..., K-1)`` for every
user.

Slates may repeat an item across slots (a consequence of the factored
action space) and duplicates contribute their gain once per slot they
occupy.  The normalizer stays the DCG of the ideal *distinct* top-K, which
keeps the ideal slate at exactly 1 and the expected reward additive over
slots, but means duplicate-heavy slates can score above 1; the environment
declares its reward range accordingly.  Distinct-item slates always land in
[0, 1].
"""

from __future__ import annotations

import csv
import json
import logging as _logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .core import ENUMERATION_GUARD, Slate, SlateConfig, SlateOpeError, slate_matrix
from .estimators import RewardGrid
from .metrics import StepCdf, empirical_step_cdf

__all__ = [
    "PreferenceModel",
    "RatingsMatrix",
    "RatingsSlateEnv",
    "SlateSimUser",
    "build_ratings_env",
    "fit_ease",
    "ground_truth_target_cdf",
    "ingest_movielens_csv",
    "load_ratings_manifest",
    "ndcg_reward",
    "save_ratings_manifest",
    "synthetic_ratings_matrix",
]

logger = _logging.getLogger(__name__)

MOVIELENS_HEADER = ("userId", "movieId", "rating", "timestamp")
DEFAULT_EASE_LAMBDA = 100.0
DENSE_SOLVE_ITEM_CAP = 2000


@dataclass(frozen=True)
class RatingsMatrix:
    """Binary user x item interaction matrix (sparse CSR)."""

    matrix: sp.csr_matrix

    def __post_init__(self) -> None:
        matrix = sp.csr_matrix(self.matrix, dtype=np.float64)
        matrix.sum_duplicates()
        if matrix.nnz and not np.all(matrix.data == 1.0):
            raise ValueError("interaction matrix entries must be binary")
        object.__setattr__(self, "matrix", matrix)

    @classmethod
    def from_pairs(
        cls, users: np.ndarray, items: np.ndarray, shape: tuple[int, int]
    ) -> "RatingsMatrix":
        data = np.ones(len(users))
        matrix = sp.csr_matrix((data, (users, items)), shape=shape)
        matrix.data[:] = 1.0  # collapse duplicate pairs
        return cls(matrix)

    @property
    def num_users(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_items(self) -> int:
        return self.matrix.shape[1]

    def history_lengths(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel().astype(np.int64)


@dataclass(frozen=True)
class PreferenceModel:
    """Item-item weight matrix with an exactly zero diagonal."""

    weights: np.ndarray
    ridge: float

    def __post_init__(self) -> None:
        weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if weights.ndim != 2 or weights.shape[0] != weights.shape[1]:
            raise ValueError("weight matrix must be square")
        if np.any(np.diag(weights) != 0.0):
            raise ValueError("weight matrix diagonal must be exactly zero")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)


def fit_ease(
    ratings: RatingsMatrix,
    lam: float = DEFAULT_EASE_LAMBDA,
    max_items: int = DENSE_SOLVE_ITEM_CAP,
) -> PreferenceModel:
    """Closed-form ridge-regularized item-item self-regression.

    With Gram ``G = X'X + lam*I`` and ``P = G^-1`` the solution is
    ``B = I - P * diag(1/diag(P))``, then the diagonal is zeroed exactly.
    Equivalent to per-column ridge regression of each item on all others
    under the zero-self-weight constraint.
    """
    if lam <= 0.0:
        raise ValueError("ridge parameter must be positive")
    n_items = ratings.num_items
    if n_items > max_items:
        raise SlateOpeError(
            f"{n_items} items exceed the dense-solve cap of {max_items}; "
            "trim the item universe or raise max_items explicitly"
        )
    gram = np.asarray((ratings.matrix.T @ ratings.matrix).todense())
    gram[np.diag_indices(n_items)] += lam
    try:
        p_inv = np.linalg.inv(gram)
    except np.linalg.LinAlgError as exc:
        raise SlateOpeError(
            f"Gram matrix is singular despite ridge {lam}; increase the "
            "ridge parameter"
        ) from exc
    diag = np.diag(p_inv)
    if np.any(diag == 0.0) or not np.all(np.isfinite(p_inv)):
        raise SlateOpeError(
            f"ill-conditioned Gram inverse at ridge {lam}; increase the "
            "ridge parameter"
        )
    weights = -p_inv / diag[None, :]
    np.fill_diagonal(weights, 0.0)
    return PreferenceModel(weights=weights, ridge=float(lam))


@dataclass(frozen=True)
class SlateSimUser:
    """One simulated user: top-N candidates with ground-truth gains.

    ``gains`` are the user's preference scores over its candidates, shifted
    so the weakest candidate sits at exactly 0; ``candidates[a]`` maps the
    local action index ``a`` to a global item id.
    """

    context: int
    gains: np.ndarray
    candidates: np.ndarray
    ideal_ranking: np.ndarray
    source_row: int

    def __post_init__(self) -> None:
        gains = np.ascontiguousarray(self.gains, dtype=np.float64)
        candidates = np.ascontiguousarray(self.candidates, dtype=np.int64)
        ideal = np.ascontiguousarray(self.ideal_ranking, dtype=np.int64)
        n = gains.shape[0]
        if candidates.shape != (n,) or ideal.shape != (n,):
            raise ValueError("gains, candidates and ideal ranking must align")
        if not np.all(np.isfinite(gains)):
            raise ValueError("gains must be finite")
        if not np.array_equal(np.sort(ideal), np.arange(n)):
            raise ValueError("ideal ranking must be a permutation of candidates")
        for arr in (gains, candidates, ideal):
            arr.setflags(write=False)
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "candidates", candidates)
        object.__setattr__(self, "ideal_ranking", ideal)


def _discounts(k: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(k) + 2.0)


def ndcg_reward(user: SlateSimUser, slate: Slate) -> float:
    """Normalized DCG of a slate against the user's ideal top-K ranking.

    ``DCG = sum_k gain(slate_k) / log2(k+1)`` over 1-based slots, with
    gains floored at 0; the normalizer is the DCG of the ideal top-K.
    Duplicate items contribute once per occupied slot.  All-zero ideal
    gains define the reward as 0.
    """
    k = len(slate.actions)
    actions = np.asarray(slate.actions, dtype=np.int64)
    if actions.min() < 0 or actions.max() >= user.gains.shape[0]:
        raise ValueError("slate actions must index the user's candidate list")
    disc = _discounts(k)
    gains = np.maximum(user.gains, 0.0)
    dcg = float(gains[actions] @ disc)
    idcg = float(gains[user.ideal_ranking[:k]] @ disc)
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


@dataclass(frozen=True)
class RatingsSlateEnv:
    """Slate environment over simulated users with deterministic nDCG reward."""

    users: tuple[SlateSimUser, ...]
    config: SlateConfig

    def __post_init__(self) -> None:
        if not self.users:
            raise ValueError("environment needs at least one user")
        n = self.config.actions_per_slot
        if self.config.num_slots > n:
            raise ValueError(
                "ideal top-K needs K distinct candidates; "
                f"K={self.config.num_slots} exceeds N={n}"
            )
        for user in self.users:
            if user.gains.shape[0] != n:
                raise ValueError(
                    f"user {user.context} has {user.gains.shape[0]} candidates, "
                    f"config requires {n}"
                )
        gains = np.maximum(np.stack([u.gains for u in self.users]), 0.0)
        ideal = np.stack([u.ideal_ranking for u in self.users])
        disc = _discounts(self.config.num_slots)
        idcg = (np.take_along_axis(gains, ideal[:, : self.config.num_slots], axis=1) @ disc)
        # the best duplicate-heavy slate repeats the top item in every slot
        max_dcg = gains.max(axis=1) * disc.sum()
        hi = float(
            np.divide(max_dcg, idcg, out=np.zeros_like(max_dcg), where=idcg > 0).max()
        )
        for arr in (gains, ideal, idcg):
            arr.setflags(write=False)
        object.__setattr__(self, "_gains", gains)
        object.__setattr__(self, "_idcg", idcg)
        object.__setattr__(self, "_ideal", ideal)
        object.__setattr__(self, "reward_range", (0.0, max(hi, 1.0)))

    @property
    def num_contexts(self) -> int:
        return len(self.users)

    @property
    def greedy_slates(self) -> np.ndarray:
        """Per-user top-K slate (one best action per slot, in rank order)."""
        return self._ideal[:, : self.config.num_slots]

    def ndcg_rewards(self, contexts: np.ndarray, slates: np.ndarray) -> np.ndarray:
        contexts = np.asarray(contexts, dtype=np.int64)
        slates = np.asarray(slates, dtype=np.int64)
        disc = _discounts(self.config.num_slots)
        dcg = (self._gains[contexts[:, None], slates] * disc).sum(axis=1)
        idcg = self._idcg[contexts]
        return np.divide(dcg, idcg, out=np.zeros_like(dcg), where=idcg > 0.0)

    def sample_contexts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.num_contexts, size=n)

    def sample_rewards(
        self,
        contexts: np.ndarray,
        slates: np.ndarray,
        rng: np.random.Generator,
    ) -> np.ndarray:
        # reward is deterministic given (user, slate); rng is unused
        return self.ndcg_rewards(contexts, slates)


def build_ratings_env(
    ratings: RatingsMatrix,
    model: PreferenceModel,
    min_history: int = 10,
    max_history: int = 15,
    top_n: int = 20,
    slots: int = 5,
) -> RatingsSlateEnv:
    """Trim users by history length, score and keep each user's top-N items.

    History bounds are inclusive.  Candidate order is score-descending with
    ties broken by ascending global item id; gains are shifted per user so
    the weakest candidate has gain exactly 0.
    """
    if model.weights.shape[0] != ratings.num_items:
        raise ValueError("preference model and ratings matrix disagree on items")
    if not 1 <= top_n <= ratings.num_items:
        raise ValueError(f"top_n must lie in [1, {ratings.num_items}]")
    lengths = ratings.history_lengths()
    keep = np.flatnonzero((lengths >= min_history) & (lengths <= max_history))
    if keep.size == 0:
        raise SlateOpeError(
            f"no users with history in [{min_history}, {max_history}] "
            f"(had {ratings.num_users} users, lengths "
            f"{lengths.min() if lengths.size else 0}-{lengths.max() if lengths.size else 0})"
        )
    scores = np.asarray(ratings.matrix[keep] @ model.weights)
    item_ids = np.arange(ratings.num_items)
    users = []
    for new_id, row in enumerate(keep):
        user_scores = scores[new_id]
        order = np.lexsort((item_ids, -user_scores))[:top_n]
        gains = user_scores[order] - user_scores[order].min()
        users.append(
            SlateSimUser(
                context=new_id,
                gains=gains,
                candidates=order,
                ideal_ranking=np.lexsort((order, -gains)),
                source_row=int(row),
            )
        )
    logger.info(
        "ratings env: kept %d/%d users, %d candidates each",
        len(users),
        ratings.num_users,
        top_n,
    )
    return RatingsSlateEnv(
        users=tuple(users), config=SlateConfig(slots, top_n)
    )


def ground_truth_target_cdf(
    env: RatingsSlateEnv,
    target,
    grid: RewardGrid,
    draws: int = 1_000_000,
    rng: np.random.Generator | None = None,
) -> StepCdf:
    """Ground-truth reward CDF of the target policy on the simulator.

    Rewards are deterministic given (user, slate), so the CDF is computed
    exactly by per-user slate enumeration whenever the total slate count
    fits the enumeration guard; otherwise it falls back to an on-policy
    Monte-Carlo run of at least 10^5 draws.
    """
    total = env.num_contexts * env.config.num_slates
    if total <= ENUMERATION_GUARD:
        slates = slate_matrix(env.config)
        all_rewards = []
        all_probs = []
        user_mass = 1.0 / env.num_contexts
        for x in range(env.num_contexts):
            probs = np.ones(slates.shape[0])
            for k in range(env.config.num_slots):
                probs *= target.slot_distribution(x, k)[slates[:, k]]
            contexts = np.full(slates.shape[0], x, dtype=np.int64)
            all_rewards.append(env.ndcg_rewards(contexts, slates))
            all_probs.append(probs * user_mass)
        return empirical_step_cdf(
            np.concatenate(all_rewards), grid, weights=np.concatenate(all_probs)
        )
    if draws < 100_000:
        raise ValueError("Monte-Carlo ground truth needs at least 10^5 draws")
    if rng is None:
        rng = np.random.default_rng(0)
    contexts = env.sample_contexts(draws, rng)
    slates = target.sample_slates(contexts, rng)
    rewards = env.ndcg_rewards(contexts, slates)
    return empirical_step_cdf(rewards, grid)


def ingest_movielens_csv(
    path: str | Path,
    rating_threshold: float = 4.0,
    delimiter: str = ",",
) -> RatingsMatrix:
    """Load MovieLens-format ratings and binarize at a threshold.

    Expects the header ``userId,movieId,rating,timestamp``.  Rows that do
    not parse are skipped and counted; duplicate (user, item) pairs collapse
    to one interaction.  Users and items are re-indexed densely.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty ratings file") from None
        normalized = tuple(h.strip().lower() for h in header)
        if normalized != tuple(h.lower() for h in MOVIELENS_HEADER):
            raise ValueError(
                f"{path}: expected header {','.join(MOVIELENS_HEADER)}, "
                f"got {','.join(header)}"
            )
        users: list[int] = []
        items: list[int] = []
        skipped = 0
        total = 0
        for row in reader:
            total += 1
            try:
                user, item, rating = int(row[0]), int(row[1]), float(row[2])
            except (ValueError, IndexError):
                skipped += 1
                continue
            if rating >= rating_threshold:
                users.append(user)
                items.append(item)
    if skipped:
        logger.warning("%s: skipped %d malformed rows of %d", path, skipped, total)
    if not users:
        raise ValueError(
            f"{path}: no interactions at threshold {rating_threshold} "
            f"({total} rows, {skipped} malformed)"
        )
    user_arr = np.asarray(users)
    item_arr = np.asarray(items)
    _, user_idx = np.unique(user_arr, return_inverse=True)
    _, item_idx = np.unique(item_arr, return_inverse=True)
    matrix = RatingsMatrix.from_pairs(
        user_idx, item_idx, shape=(user_idx.max() + 1, item_idx.max() + 1)
    )
    logger.info(
        "%s: %d interactions, %d users, %d items (threshold %.2f, %d skipped)",
        path,
        matrix.matrix.nnz,
        matrix.num_users,
        matrix.num_items,
        rating_threshold,
        skipped,
    )
    return matrix


def synthetic_ratings_matrix(
    num_users: int,
    num_items: int,
    seed: int,
    min_items: int = 8,
    max_items: int = 18,
    num_groups: int = 5,
) -> RatingsMatrix:
    """Seeded synthetic interaction matrix for desk-scale experiments.

    Users and items are split into affinity groups; a user mostly interacts
    inside its own group, which gives the item-item model real structure to
    pick up.  History lengths straddle the default [10, 15] trimming window
    so the trimming path is exercised.
    """
    rng = np.random.default_rng(seed)
    user_group = rng.integers(0, num_groups, size=num_users)
    item_group = rng.integers(0, num_groups, size=num_items)
    base_pop = 1.0 / (np.arange(num_items) + 10.0)
    users: list[int] = []
    items: list[int] = []
    for u in range(num_users):
        weights = base_pop * np.where(item_group == user_group[u], 8.0, 1.0)
        weights = weights / weights.sum()
        count = int(rng.integers(min_items, max_items + 1))
        chosen = rng.choice(num_items, size=count, replace=False, p=weights)
        users.extend([u] * count)
        items.extend(chosen.tolist())
    return RatingsMatrix.from_pairs(
        np.asarray(users), np.asarray(items), shape=(num_users, num_items)
    )


def save_ratings_manifest(env: RatingsSlateEnv, path: str | Path) -> None:
    """Binary-free JSON snapshot (user ids, candidate ids, gains) for replay."""
    payload = {
        "kind": "ratings",
        "num_slots": env.config.num_slots,
        "actions_per_slot": env.config.actions_per_slot,
        "users": [
            {
                "context": u.context,
                "source_row": u.source_row,
                "candidates": u.candidates.tolist(),
                "gains": u.gains.tolist(),
                "ideal_ranking": u.ideal_ranking.tolist(),
            }
            for u in env.users
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_ratings_manifest(path: str | Path) -> RatingsSlateEnv:
    payload = json.loads(Path(path).read_text())
    if payload.get("kind") != "ratings":
        raise ValueError(f"{path}: not a ratings environment manifest")
    users = tuple(
        SlateSimUser(
            context=u["context"],
            gains=np.array(u["gains"]),
            candidates=np.array(u["candidates"]),
            ideal_ranking=np.array(u["ideal_ranking"]),
            source_row=u["source_row"],
        )
        for u in payload["users"]
    )
    return RatingsSlateEnv(
        users=users,
        config=SlateConfig(payload["num_slots"], payload["actions_per_slot"]),
    )
