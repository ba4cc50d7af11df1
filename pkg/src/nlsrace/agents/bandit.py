"""One-step, single-state bandit with the race environment's interface.

Used to sanity-check both learners: the optimal arm is known by construction.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..env import OBS_BASELINE, OBS_DQN, ObsComponent, Observation, StepResult


class BanditEnv:
    def __init__(self, rewards: Sequence[float] = (0.0, 0.0, 1.0, 0.0), obs_kind: str = OBS_DQN):
        self.rewards = tuple(float(r) for r in rewards)
        self.n_actions = len(self.rewards)
        self.obs_kind = obs_kind
        if obs_kind == OBS_DQN:
            self.obs_spec = (ObsComponent("fuel_mass", 1.0), ObsComponent("position", 1, discrete=True, low=1))
            self._raw = (0.5, 1)
        elif obs_kind == OBS_BASELINE:
            self.obs_spec = (ObsComponent("position", 1, discrete=True, low=1), ObsComponent("tire_deg", 1.0))
            self._raw = (1, 0.5)
        else:
            raise ValueError(f"unknown obs_kind {obs_kind!r}")
        self.done = True

    def _obs(self) -> Observation:
        vec = np.array([v / c.high for v, c in zip(self._raw, self.obs_spec)])
        return Observation(self.obs_kind, self._raw, vec)

    def reset(self, seed: Optional[int] = None) -> Observation:
        self.done = False
        return self._obs()

    def step(self, action: int) -> StepResult:
        if self.done:
            raise RuntimeError("episode is finished; call reset()")
        self.done = True
        return StepResult(self._obs(), self.rewards[int(action)], True, {"position": 1, "retired": False})
