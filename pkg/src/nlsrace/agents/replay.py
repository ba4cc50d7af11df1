"""Fixed-capacity experience replay with oldest-first eviction."""

from __future__ import annotations

import numpy as np


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs_dim = int(obs_dim)
        self.states = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, obs_dim))
        self.dones = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0
        self.pushes = 0

    def __len__(self) -> int:
        return self._size

    def push(self, state, action, reward, next_state, done) -> None:
        k = self._next
        self.states[k] = state
        self.actions[k] = action
        self.rewards[k] = reward
        self.next_states[k] = next_state
        self.dones[k] = done
        self._next = (k + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self.pushes += 1

    def _ordered_slots(self) -> np.ndarray:
        start = self._next if self._size == self.capacity else 0
        return (start + np.arange(self._size)) % self.capacity

    def contents(self) -> list:
        """Stored experiences, oldest first."""
        return [(self.states[k].copy(), int(self.actions[k]), float(self.rewards[k]),
                 self.next_states[k].copy(), bool(self.dones[k])) for k in self._ordered_slots()]

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if batch_size > self._size:
            raise ValueError(f"cannot sample {batch_size} from {self._size} experiences")
        return rng.choice(self._size, size=batch_size, replace=False)

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Uniform batch without replacement: (states, actions, rewards, next_states, dones)."""
        idx = self.sample_indices(batch_size, rng)
        return self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx], self.dones[idx]
