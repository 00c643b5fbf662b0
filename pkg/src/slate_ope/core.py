"""Domain types for slate bandit logs and factored policies.

A slate is a composite action with ``num_slots`` positions, each filled by
one of ``actions_per_slot`` candidate actions (indexed locally ``0..N-1``).
Contexts are discrete indices into an environment-owned context table; the
non-contextual simulators use the single context ``0``.

Slates may repeat the same action index across slots: every slot draws
independently from the same local candidate set, which is what a factored
policy permits.  Environments that need distinct items (e.g. the ratings
simulator) document how duplicates contribute to the reward.
"""

from __future__ import annotations

import io
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "ENUMERATION_GUARD",
    "ContextId",
    "DimensionMismatchError",
    "EnumerationGuardError",
    "EpsilonGreedyPolicy",
    "FactoredPolicy",
    "LogDataset",
    "LogEntry",
    "Slate",
    "SlateConfig",
    "SlateOpeError",
    "SupportViolationError",
    "TablePolicy",
    "UniformPolicy",
    "enumerate_slates",
    "slate_matrix",
    "slate_prob",
]

# Context identifiers are plain non-negative integers into an environment's
# context table.
ContextId = int

# Enumerating all N^K slates is refused beyond this many slates.
ENUMERATION_GUARD = 10_000_000

# Decimal float serialization with 17 significant digits round-trips IEEE-754
# doubles exactly.
FLOAT_FMT = "%.17g"


class SlateOpeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(SlateOpeError):
    """A slate (or slate array) does not conform to the expected config."""


class EnumerationGuardError(SlateOpeError):
    """Full slate enumeration was requested for an intractably large space."""


class SupportViolationError(SlateOpeError):
    """The logging policy assigned zero probability to a logged slot action.

    Common support at the slot level is a precondition for every importance
    weight; a violation means the log could not have been generated by the
    claimed logging policy, so it is surfaced as a hard error instead of a
    silent zero weight.
    """

    def __init__(self, context: int, slot: int, action: int):
        self.context = context
        self.slot = slot
        self.action = action
        super().__init__(
            f"logging policy has zero probability for action {action} "
            f"in slot {slot} under context {context}"
        )


@dataclass(frozen=True)
class SlateConfig:
    """Shape of the combinatorial action space: K slots x N actions per slot."""

    num_slots: int
    actions_per_slot: int

    def __post_init__(self) -> None:
        if self.num_slots < 1:
            raise ValueError(f"num_slots must be >= 1, got {self.num_slots}")
        if self.actions_per_slot < 1:
            raise ValueError(
                f"actions_per_slot must be >= 1, got {self.actions_per_slot}"
            )

    @property
    def num_slates(self) -> int:
        """Total slate count N**K (exact integer, may be astronomically large)."""
        return self.actions_per_slot**self.num_slots

    def validate_slate(self, slate: "Slate") -> None:
        if len(slate.actions) != self.num_slots:
            raise DimensionMismatchError(
                f"slate has {len(slate.actions)} slots, config requires "
                f"{self.num_slots}"
            )
        for k, a in enumerate(slate.actions):
            if not 0 <= a < self.actions_per_slot:
                raise DimensionMismatchError(
                    f"slot {k} action {a} outside [0, {self.actions_per_slot})"
                )

    def validate_slate_array(self, slates: np.ndarray) -> None:
        if slates.ndim != 2 or slates.shape[1] != self.num_slots:
            raise DimensionMismatchError(
                f"slate array shape {slates.shape} incompatible with "
                f"K={self.num_slots}"
            )
        if slates.size and (slates.min() < 0 or slates.max() >= self.actions_per_slot):
            raise DimensionMismatchError(
                f"slate array contains actions outside [0, {self.actions_per_slot})"
            )


@dataclass(frozen=True)
class Slate:
    """One slate action: a length-K tuple of per-slot action indices."""

    actions: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))

    def __len__(self) -> int:
        return len(self.actions)

    def __iter__(self) -> Iterator[int]:
        return iter(self.actions)


@dataclass(frozen=True)
class LogEntry:
    """One logged interaction: (context, slate, scalar slate-level reward)."""

    context: ContextId
    slate: Slate
    reward: float


@dataclass(frozen=True)
class LogDataset:
    """Immutable logged dataset of n i.i.d. (context, slate, reward) tuples.

    Stored as flat arrays (``contexts`` (n,), ``slates`` (n, K),
    ``rewards`` (n,)) so estimation over n = 10^7 entries stays tractable;
    `LogEntry` views are materialized on demand.
    """

    config: SlateConfig
    contexts: np.ndarray
    slates: np.ndarray
    rewards: np.ndarray
    reward_range: tuple[float, float]

    def __post_init__(self) -> None:
        contexts = np.ascontiguousarray(self.contexts, dtype=np.int64)
        slates = np.ascontiguousarray(self.slates, dtype=np.int64)
        rewards = np.ascontiguousarray(self.rewards, dtype=np.float64)
        if contexts.ndim != 1 or rewards.ndim != 1:
            raise ValueError("contexts and rewards must be 1-d arrays")
        n = contexts.shape[0]
        if rewards.shape[0] != n or slates.shape[0] != n:
            raise ValueError("contexts, slates and rewards must share length")
        self.config.validate_slate_array(slates)
        if n and contexts.min() < 0:
            raise ValueError("context ids must be non-negative")
        r_min, r_max = float(self.reward_range[0]), float(self.reward_range[1])
        if not r_min <= r_max:
            raise ValueError(f"invalid reward range [{r_min}, {r_max}]")
        if n and (rewards.min() < r_min or rewards.max() > r_max):
            raise ValueError(
                f"rewards outside declared range [{r_min}, {r_max}]: "
                f"observed [{rewards.min()}, {rewards.max()}]"
            )
        for arr in (contexts, slates, rewards):
            arr.setflags(write=False)
        object.__setattr__(self, "contexts", contexts)
        object.__setattr__(self, "slates", slates)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "reward_range", (r_min, r_max))

    @classmethod
    def from_entries(
        cls,
        entries: Sequence[LogEntry],
        config: SlateConfig,
        reward_range: tuple[float, float],
    ) -> "LogDataset":
        contexts = np.array([e.context for e in entries], dtype=np.int64)
        slates = np.array(
            [e.slate.actions for e in entries], dtype=np.int64
        ).reshape(len(entries), config.num_slots)
        rewards = np.array([e.reward for e in entries], dtype=np.float64)
        return cls(config, contexts, slates, rewards, reward_range)

    def __len__(self) -> int:
        return self.contexts.shape[0]

    def __getitem__(self, i: int) -> LogEntry:
        return LogEntry(
            context=int(self.contexts[i]),
            slate=Slate(tuple(int(a) for a in self.slates[i])),
            reward=float(self.rewards[i]),
        )

    def __iter__(self) -> Iterator[LogEntry]:
        for i in range(len(self)):
            yield self[i]

    def to_csv(self, path: str | Path) -> None:
        """Write the dataset in the package log format.

        Line 1 declares the slate shape and reward range; each following line
        is one record ``context_id,a_1,...,a_K,reward``.  Rewards use 17
        significant decimal digits so 64-bit reals round-trip bit-exactly.
        """
        buf = io.StringIO()
        r_min, r_max = self.reward_range
        buf.write(
            "K=%d,N=%d,r_min=%s,r_max=%s\n"
            % (
                self.config.num_slots,
                self.config.actions_per_slot,
                FLOAT_FMT % r_min,
                FLOAT_FMT % r_max,
            )
        )
        for i in range(len(self)):
            fields = [str(int(self.contexts[i]))]
            fields.extend(str(int(a)) for a in self.slates[i])
            fields.append(FLOAT_FMT % self.rewards[i])
            buf.write(",".join(fields))
            buf.write("\n")
        Path(path).write_text(buf.getvalue())

    @classmethod
    def from_csv(cls, path: str | Path) -> "LogDataset":
        text = Path(path).read_text()
        lines = text.splitlines()
        if not lines:
            raise ValueError(f"{path}: empty log file")
        header: dict[str, str] = {}
        for part in lines[0].split(","):
            key, _, value = part.partition("=")
            header[key.strip()] = value.strip()
        try:
            config = SlateConfig(int(header["K"]), int(header["N"]))
            reward_range = (float(header["r_min"]), float(header["r_max"]))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}: malformed log header {lines[0]!r}") from exc
        k = config.num_slots
        records = [line.split(",") for line in lines[1:] if line]
        contexts = np.empty(len(records), dtype=np.int64)
        slates = np.empty((len(records), k), dtype=np.int64)
        rewards = np.empty(len(records), dtype=np.float64)
        for i, rec in enumerate(records):
            if len(rec) != k + 2:
                raise ValueError(
                    f"{path}: record {i} has {len(rec)} fields, expected {k + 2}"
                )
            contexts[i] = int(rec[0])
            slates[i] = [int(a) for a in rec[1 : k + 1]]
            rewards[i] = float(rec[k + 1])
        return cls(config, contexts, slates, rewards, reward_range)


class FactoredPolicy(ABC):
    """Per-slot conditional action-probability oracle.

    A factored policy's slate probability is the product of per-slot
    probabilities; both logging and target policies use this interface.
    Implementations must be pure functions of their inputs so they can be
    evaluated concurrently.
    """

    config: SlateConfig

    @abstractmethod
    def slot_prob(self, context: ContextId, slot: int, action: int) -> float:
        """Probability of choosing ``action`` in ``slot`` given ``context``."""

    def slot_probs(
        self, contexts: np.ndarray, slot: int, actions: np.ndarray
    ) -> np.ndarray:
        """Vectorized ``slot_prob`` over paired (context, action) arrays.

        The base implementation loops; table-backed policies override it
        with array gathers.
        """
        contexts = np.asarray(contexts)
        actions = np.asarray(actions)
        out = np.empty(contexts.shape[0], dtype=np.float64)
        for i in range(contexts.shape[0]):
            out[i] = self.slot_prob(int(contexts[i]), slot, int(actions[i]))
        return out

    def slot_distribution(self, context: ContextId, slot: int) -> np.ndarray:
        """Full probability vector over the slot's N actions."""
        n = self.config.actions_per_slot
        return np.array(
            [self.slot_prob(context, slot, a) for a in range(n)], dtype=np.float64
        )

    def sample_slates(
        self, contexts: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray:
        """Draw one slate per context, slots independent (factored sampling).

        Slots are drawn in order via inverse-CDF lookups; a fixed generator
        state always reproduces the same slates.
        """
        contexts = np.asarray(contexts, dtype=np.int64)
        n = contexts.shape[0]
        k = self.config.num_slots
        out = np.empty((n, k), dtype=np.int64)
        unique = np.unique(contexts)
        inverse = np.searchsorted(unique, contexts)
        for slot in range(k):
            cum = np.cumsum(
                np.stack([self.slot_distribution(int(c), slot) for c in unique]),
                axis=1,
            )
            u = rng.random(n)
            out[:, slot] = np.minimum(
                _rows_searchsorted(cum[inverse], u), self.config.actions_per_slot - 1
            )
        return out


def _rows_searchsorted(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    # index of first cumulative mass exceeding u, row by row
    return (u[:, None] >= cum).sum(axis=1)


class UniformPolicy(FactoredPolicy):
    """Factored uniform-random policy: every slot action has mass 1/N."""

    def __init__(self, config: SlateConfig):
        self.config = config
        self._p = 1.0 / config.actions_per_slot

    def slot_prob(self, context: ContextId, slot: int, action: int) -> float:
        return self._p

    def slot_probs(
        self, contexts: np.ndarray, slot: int, actions: np.ndarray
    ) -> np.ndarray:
        return np.full(np.asarray(contexts).shape[0], self._p)

    def sample_slates(
        self, contexts: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray:
        n = np.asarray(contexts).shape[0]
        k = self.config.num_slots
        out = np.empty((n, k), dtype=np.int64)
        # one slot at a time, matching the generic draw order
        for slot in range(k):
            out[:, slot] = rng.integers(0, self.config.actions_per_slot, size=n)
        return out


class EpsilonGreedyPolicy(FactoredPolicy):
    """Per-slot epsilon-greedy mixture around a fixed greedy slate per context.

    Each slot assigns mass ``eps`` to every non-greedy action and
    ``eps + (1 - N*eps)`` to the greedy one, which sums to one per slot.
    ``eps = 0`` is the deterministic policy; ``eps = 1/N`` reduces to uniform.
    """

    def __init__(
        self,
        config: SlateConfig,
        greedy_slates: np.ndarray,
        epsilon: float,
    ):
        greedy = np.ascontiguousarray(greedy_slates, dtype=np.int64)
        if greedy.ndim != 2 or greedy.shape[1] != config.num_slots:
            raise DimensionMismatchError(
                f"greedy slate table shape {greedy.shape} incompatible with "
                f"K={config.num_slots}"
            )
        config.validate_slate_array(greedy)
        n = config.actions_per_slot
        if not 0.0 <= epsilon <= 1.0 / n:
            raise ValueError(f"epsilon must lie in [0, 1/N] = [0, {1.0 / n}]")
        greedy.setflags(write=False)
        self.config = config
        self.greedy_slates = greedy
        self.epsilon = float(epsilon)
        self._p_greedy = self.epsilon + (1.0 - n * self.epsilon)

    @classmethod
    def deterministic(
        cls, config: SlateConfig, greedy_slates: np.ndarray
    ) -> "EpsilonGreedyPolicy":
        return cls(config, greedy_slates, epsilon=0.0)

    @classmethod
    def random_greedy(
        cls,
        config: SlateConfig,
        num_contexts: int,
        epsilon: float,
        rng: np.random.Generator,
    ) -> "EpsilonGreedyPolicy":
        """Greedy slates assigned randomly once, then held fixed."""
        greedy = rng.integers(
            0, config.actions_per_slot, size=(num_contexts, config.num_slots)
        )
        return cls(config, greedy, epsilon)

    def slot_prob(self, context: ContextId, slot: int, action: int) -> float:
        if action == int(self.greedy_slates[context, slot]):
            return self._p_greedy
        return self.epsilon

    def slot_probs(
        self, contexts: np.ndarray, slot: int, actions: np.ndarray
    ) -> np.ndarray:
        greedy = self.greedy_slates[np.asarray(contexts), slot]
        return np.where(np.asarray(actions) == greedy, self._p_greedy, self.epsilon)

    def slot_distribution(self, context: ContextId, slot: int) -> np.ndarray:
        dist = np.full(self.config.actions_per_slot, self.epsilon)
        dist[self.greedy_slates[context, slot]] = self._p_greedy
        return dist


class TablePolicy(FactoredPolicy):
    """Explicit probability-table policy: table[x, k, a] = slot probability."""

    def __init__(self, config: SlateConfig, table: np.ndarray):
        table = np.ascontiguousarray(table, dtype=np.float64)
        if table.ndim != 3 or table.shape[1:] != (
            config.num_slots,
            config.actions_per_slot,
        ):
            raise DimensionMismatchError(
                f"table shape {table.shape} incompatible with "
                f"(*, {config.num_slots}, {config.actions_per_slot})"
            )
        if table.size and table.min() < 0.0:
            raise ValueError("slot probabilities must be non-negative")
        sums = table.sum(axis=2)
        if table.size and np.abs(sums - 1.0).max() > 1e-9:
            raise ValueError("slot probabilities must sum to 1 within 1e-9")
        table.setflags(write=False)
        self.config = config
        self.table = table

    @classmethod
    def random(
        cls, config: SlateConfig, num_contexts: int, rng: np.random.Generator
    ) -> "TablePolicy":
        raw = rng.random((num_contexts, config.num_slots, config.actions_per_slot))
        return cls(config, raw / raw.sum(axis=2, keepdims=True))

    def slot_prob(self, context: ContextId, slot: int, action: int) -> float:
        return float(self.table[context, slot, action])

    def slot_probs(
        self, contexts: np.ndarray, slot: int, actions: np.ndarray
    ) -> np.ndarray:
        return self.table[np.asarray(contexts), slot, np.asarray(actions)]

    def slot_distribution(self, context: ContextId, slot: int) -> np.ndarray:
        return self.table[context, slot].copy()


def slate_prob(policy: FactoredPolicy, context: ContextId, slate: Slate) -> float:
    """Probability of a whole slate: the product of its per-slot masses."""
    policy.config.validate_slate(slate)
    prob = 1.0
    for slot, action in enumerate(slate.actions):
        prob *= policy.slot_prob(context, slot, action)
    return prob


def enumerate_slates(config: SlateConfig) -> Iterator[Slate]:
    """Yield every slate exactly once, in lexicographic order.

    Refuses to enumerate when N**K exceeds ``ENUMERATION_GUARD``.
    """
    total = config.num_slates
    if total > ENUMERATION_GUARD:
        raise EnumerationGuardError(
            f"slate space has {total} elements, above the enumeration guard "
            f"of {ENUMERATION_GUARD}"
        )
    k, n = config.num_slots, config.actions_per_slot
    actions = [0] * k
    for _ in range(total):
        yield Slate(tuple(actions))
        for slot in range(k - 1, -1, -1):
            actions[slot] += 1
            if actions[slot] < n:
                break
            actions[slot] = 0


def slate_matrix(config: SlateConfig) -> np.ndarray:
    """All N**K slates as an (N**K, K) int array, lexicographic row order."""
    total = config.num_slates
    if total > ENUMERATION_GUARD:
        raise EnumerationGuardError(
            f"slate space has {total} elements, above the enumeration guard "
            f"of {ENUMERATION_GUARD}"
        )
    k, n = config.num_slots, config.actions_per_slot
    grids = np.meshgrid(*([np.arange(n, dtype=np.int64)] * k), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)
