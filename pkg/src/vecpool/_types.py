"""Plain data types shared by both backends."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .env_core import StateRecord

#: Returned by ``ActionQueue.dequeue`` once the queue is shut down and drained.
SHUTDOWN = -1


class ActionMsg(NamedTuple):
    """A routed command. The step payload itself lives in the pool's action
    table at row ``env_id``; the queue only carries the routing word."""

    env_id: int
    reset: bool = False

    def encode(self) -> int:
        return (int(self.env_id) << 1) | int(bool(self.reset))

    @classmethod
    def decode(cls, word: int) -> "ActionMsg":
        return cls(int(word) >> 1, bool(int(word) & 1))


class BlockView(NamedTuple):
    """The per-field buffers of one block generation (structure of arrays)."""

    env_ids: np.ndarray
    observations: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    truncateds: np.ndarray
    elapsed_steps: np.ndarray


def new_block(batch_size: int, obs_shape: tuple[int, ...], obs_dtype) -> BlockView:
    return BlockView(
        np.empty(batch_size, np.int32),
        np.empty((batch_size, *obs_shape), obs_dtype),
        np.empty(batch_size, np.float64),
        np.empty(batch_size, np.bool_),
        np.empty(batch_size, np.bool_),
        np.empty(batch_size, np.int32),
    )


@dataclass(eq=False)
class SlotHandle:
    """Exclusive write access to slot ``offset`` of block ``generation``."""

    generation: int
    offset: int
    block: BlockView

    def write(self, env_id: int, observation, reward: float, done: bool, truncated: bool, elapsed_step: int) -> None:
        i = self.offset
        b = self.block
        b.env_ids[i] = env_id
        b.observations[i] = observation
        b.rewards[i] = reward
        b.dones[i] = done
        b.truncateds[i] = truncated
        b.elapsed_steps[i] = elapsed_step


@dataclass(eq=False, slots=True)
class StateBatch:
    """M state records packed field-wise. Owns its arrays."""

    env_ids: np.ndarray
    observations: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    truncateds: np.ndarray
    elapsed_steps: np.ndarray
    generation: int = -1

    def __len__(self) -> int:
        return len(self.env_ids)

    def record(self, i: int) -> StateRecord:
        return StateRecord(
            int(self.env_ids[i]),
            self.observations[i].copy(),
            float(self.rewards[i]),
            bool(self.dones[i]),
            bool(self.truncateds[i]),
            int(self.elapsed_steps[i]),
        )

    def records(self) -> list[StateRecord]:
        return [self.record(i) for i in range(len(self))]

    def take(self, order: np.ndarray) -> "StateBatch":
        return StateBatch(
            self.env_ids[order],
            self.observations[order],
            self.rewards[order],
            self.dones[order],
            self.truncateds[order],
            self.elapsed_steps[order],
            self.generation,
        )

    @property
    def info(self) -> dict:
        return {"env_id": self.env_ids, "elapsed_step": self.elapsed_steps, "truncated": self.truncateds}
