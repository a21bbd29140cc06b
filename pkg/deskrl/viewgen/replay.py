"""Replay storage with n-step window sampling."""

from __future__ import annotations
from typing import Dict, List, NamedTuple, Optional, Tuple

from dataclasses import dataclass
import threading

import numpy as np
import torch

from .errors import EmptyBufferError, InvalidSpecError, ShapeMismatchError
from .simenv import MultiViewObservation, View


@dataclass
class Transition:
    obs: MultiViewObservation
    action: np.ndarray
    reward: float
    # gamma, or 0 when the step reached a terminal state
    discount: float
    done: bool
    episode_id: int
    step_index: int
    next_obs: MultiViewObservation


class Batch(NamedTuple):
    fixed: torch.Tensor
    moving: torch.Tensor
    next_fixed: torch.Tensor
    next_moving: torch.Tensor
    action: torch.Tensor
    rewards: torch.Tensor
    discounts: torch.Tensor
    indices: np.ndarray

    @property
    def size(self) -> int:
        return self.action.shape[0]

    def obs(self, view: View) -> torch.Tensor:
        return self.fixed if view is View.FIXED else self.moving

    def next_obs(self, view: View) -> torch.Tensor:
        return self.next_fixed if view is View.FIXED else self.next_moving

    def to(self, device) -> "Batch":
        return self._replace(
            **{
                name: value.to(device)
                for name, value in self._asdict().items()
                if isinstance(value, torch.Tensor)
            }
        )


class ReplayBuffer:
    """Fixed-capacity ring of transitions, oldest evicted first.

    Frames are shared by reference between consecutive transitions, so a
    stored step costs one new frame per view. `add` and `sample_batch` may
    run on different threads.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise InvalidSpecError(f"Replay capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self._items: List[Transition] = []
        # Episode ids and step indices per ring slot, kept next to the items.
        self._episode_ids = np.zeros(self.capacity, dtype=np.int64)
        self._step_indices = np.zeros(self.capacity, dtype=np.int64)
        self._next = 0
        self.added = 0
        self.lock = threading.Lock()
        self._starts_cache: Dict[int, Tuple[int, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self._items)

    def add(self, transition: Transition):
        with self.lock:
            if len(self._items) < self.capacity:
                self._items.append(transition)
            else:
                self._items[self._next] = transition
            self._episode_ids[self._next] = transition.episode_id
            self._step_indices[self._next] = transition.step_index
            self._next = (self._next + 1) % self.capacity
            self.added += 1

    def __getitem__(self, k: int) -> Transition:
        """The k-th transition in insertion order among those still stored."""
        if not 0 <= k < len(self._items):
            raise IndexError(k)
        if len(self._items) < self.capacity:
            return self._items[k]
        return self._items[(self._next + k) % self.capacity]

    def transitions(self) -> List[Transition]:
        return [self[k] for k in range(len(self))]

    def valid_starts(self, n: int) -> np.ndarray:
        """Logical indices starting an n-window inside a single episode."""
        if n < 1:
            raise InvalidSpecError(f"n must be at least 1, got {n}")
        added, starts = self._starts_cache.get(n, (-1, None))
        if added == self.added:
            return starts
        size = len(self)
        if size < n:
            starts = np.zeros(0, dtype=np.int64)
        else:
            slots = self._slots()
            ids, steps = self._episode_ids[slots], self._step_indices[slots]
            count = size - n + 1
            same_episode = ids[:count] == ids[n - 1:]
            contiguous = steps[n - 1:] - steps[:count] == n - 1
            starts = np.flatnonzero(same_episode & contiguous)
        self._starts_cache[n] = (self.added, starts)
        return starts

    def _slots(self) -> np.ndarray:
        """Ring slots in insertion order."""
        size = len(self._items)
        if size < self.capacity:
            return np.arange(size)
        return (self._next + np.arange(size)) % self.capacity

    def state_dict(self) -> dict:
        with self.lock:
            return {
                "capacity": self.capacity,
                "added": self.added,
                "transitions": self.transitions(),
            }

    @classmethod
    def from_state_dict(cls, state: dict, capacity: Optional[int] = None) -> "ReplayBuffer":
        buffer = cls(capacity or state["capacity"])
        for transition in state["transitions"]:
            buffer.add(transition)
        buffer.added = state["added"]
        return buffer


def _stack(stacks) -> torch.Tensor:
    return torch.from_numpy(np.stack([stack.array() for stack in stacks]))


def sample_batch(buffer: ReplayBuffer, batch_size: int, n: int, seed: int) -> Batch:
    """Uniformly sample `batch_size` n-step windows.

    Observations are taken at the window start and after its last step;
    reward and discount windows are B×n.
    """
    with buffer.lock:
        starts = buffer.valid_starts(n)
        if len(starts) == 0:
            raise EmptyBufferError(
                f"Replay holds no complete {n}-step window ({len(buffer)} transitions)"
            )
        rng = np.random.default_rng(seed)
        indices = starts[rng.integers(len(starts), size=batch_size)]
        windows = [[buffer[i + k] for k in range(n)] for i in indices]

    first = [window[0] for window in windows]
    last = [window[-1] for window in windows]
    actions = np.stack([t.action for t in first]).astype(np.float32)
    if actions.ndim != 2:
        raise ShapeMismatchError(f"Stored actions must be vectors, got {actions.shape}")
    rewards = np.array([[t.reward for t in w] for w in windows], dtype=np.float32)
    discounts = np.array([[t.discount for t in w] for w in windows], dtype=np.float32)
    return Batch(
        fixed=_stack(t.obs.fixed for t in first),
        moving=_stack(t.obs.moving for t in first),
        next_fixed=_stack(t.next_obs.fixed for t in last),
        next_moving=_stack(t.next_obs.moving for t in last),
        action=torch.from_numpy(actions),
        rewards=torch.from_numpy(rewards),
        discounts=torch.from_numpy(discounts),
        indices=indices,
    )
