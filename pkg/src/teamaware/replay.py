"""Whole-episode replay storage for recurrent Q-learning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass
class EpisodeRecord:
    """One padded episode.

    Time-major layout with `length` valid steps; observation-like arrays
    carry one extra row (the post-transition frame) for bootstrap targets.
    Padding appears only after termination.
    """

    obs: np.ndarray          # [L + 1, n, obs_dim]
    state: np.ndarray        # [L + 1, state_dim]
    avail: np.ndarray        # [L + 1, n, n_actions]
    actions: np.ndarray      # [L, n] int
    reward: np.ndarray       # [L]
    terminated: np.ndarray   # [L] 0/1; 1 marks a truly terminal transition
                             # (bootstrap zero); episode-limit truncation
                             # stays 0 so the value bootstrap survives it
    mask: np.ndarray         # [L] 1 for t < length
    length: int

    def validate(self) -> "EpisodeRecord":
        limit = self.reward.shape[0]
        if not 1 <= self.length <= limit:
            raise ContractViolation("episode length outside [1, limit]")
        if self.obs.shape[0] != limit + 1 or self.state.shape[0] != limit + 1:
            raise ContractViolation("observation rows must be limit + 1")
        if not np.all(np.isfinite(self.reward)):
            raise ContractViolation("non-finite reward in episode")
        expect = np.zeros(limit)
        expect[:self.length] = 1.0
        if not np.array_equal(self.mask, expect):
            raise ContractViolation("padding mask must be 1 exactly for t < length")
        return self


class ReplayBuffer:
    """FIFO store of episodes with uniform without-replacement sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ContractViolation("capacity must be >= 1")
        self.capacity = capacity
        self._episodes: list[EpisodeRecord] = []

    def __len__(self) -> int:
        return len(self._episodes)

    def add(self, record: EpisodeRecord) -> None:
        record.validate()
        self._episodes.append(record)
        if len(self._episodes) > self.capacity:
            self._episodes.pop(0)

    def can_sample(self, batch_size: int) -> bool:
        return len(self._episodes) >= batch_size

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[EpisodeRecord]:
        if not self.can_sample(batch_size):
            raise ContractViolation(
                f"buffer holds {len(self)} episodes, need {batch_size}")
        idx = rng.choice(len(self._episodes), size=batch_size, replace=False)
        return [self._episodes[i] for i in idx]


def stack_batch(records: list[EpisodeRecord]) -> dict[str, np.ndarray]:
    """Batch-major arrays truncated to the longest episode in the batch."""
    t_max = max(r.length for r in records)
    return {
        "obs": np.stack([r.obs[:t_max + 1] for r in records]),
        "state": np.stack([r.state[:t_max + 1] for r in records]),
        "avail": np.stack([r.avail[:t_max + 1] for r in records]),
        "actions": np.stack([r.actions[:t_max] for r in records]),
        "reward": np.stack([r.reward[:t_max] for r in records]),
        "terminated": np.stack([r.terminated[:t_max] for r in records]),
        "mask": np.stack([r.mask[:t_max] for r in records]),
    }
