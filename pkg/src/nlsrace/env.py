"""Episodic pit-strategy environment around the race engine.

One step is one lap: the agent picks an action before the lap starts, the
whole field drives it, and the agent gets a reward for where it ended up.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from .engine import REFUEL_OPTIONS, RaceState, action_to_request, init_race, simulate_start, step_lap

if TYPE_CHECKING:
    from .config import RaceConfig

N_ACTIONS = 1 + len(REFUEL_OPTIONS)
ACTION_LABELS = ("No pit stop, continue the race",) + tuple(
    f"Pit and refuel for {n} laps" for n in REFUEL_OPTIONS)

OBS_DQN = "dqn"
OBS_BASELINE = "baseline"


@dataclass(frozen=True)
class RewardConfig:
    good_position_threshold: int = 4
    position_reward: float = 1.0
    tire_threshold: float = 90.0
    tire_penalty_reward: float = -1.0
    retirement_reward: float = -10.0
    terminal_max: float = 10.0
    # optional shaping terms, all off by default
    progress_weight: float = 0.0
    leader_delta_weight: float = 0.0
    fuel_level_weight: float = 0.0

    def terminal(self, final_position: int, field_size: int) -> float:
        return (field_size - final_position) / field_size * self.terminal_max


@dataclass(frozen=True)
class Observation:
    kind: str
    raw: tuple
    vector: np.ndarray = field(compare=False)

    @property
    def position(self) -> int:
        return int(self.raw[1] if self.kind == OBS_DQN else self.raw[0])


@dataclass
class StepResult:
    observation: Observation
    reward: float
    done: bool
    info: dict


@dataclass(frozen=True)
class ObsComponent:
    name: str
    high: float
    discrete: bool = False
    low: float = 0.0


def compute_reward(position: int, tire_deg: float, done: bool, retired: bool, cfg: RewardConfig,
                   field_size: int, progress: float = 0.0, leader_delta: float = 0.0,
                   fuel_fraction: float = 0.0) -> float:
    """Step-wise reward in [-1, 1]; at the flag, the terminal reward instead."""
    if retired:
        return cfg.retirement_reward
    if done:
        return cfg.terminal(position, field_size)
    r = 0.0
    if position <= cfg.good_position_threshold:
        r += cfg.position_reward
    if tire_deg > cfg.tire_threshold:
        r += cfg.tire_penalty_reward
    r += cfg.progress_weight * progress
    r -= cfg.leader_delta_weight * leader_delta
    r += cfg.fuel_level_weight * fuel_fraction
    return float(min(max(r, -1.0), 1.0))


class RaceEnv:
    """reset/step environment; car 0 is the agent, the rest race the fixed strategy."""

    n_actions = N_ACTIONS

    def __init__(self, config: "RaceConfig", obs_kind: str = OBS_DQN):
        if obs_kind not in (OBS_DQN, OBS_BASELINE):
            raise ValueError(f"obs_kind must be {OBS_DQN!r} or {OBS_BASELINE!r}")
        self.config = config
        self.obs_kind = obs_kind
        self.episode = 0
        self.state: Optional[RaceState] = None
        self.done = True
        self.trajectory: list = []
        fs = config.field_size
        if obs_kind == OBS_DQN:
            self.obs_spec = (ObsComponent("fuel_mass", config.car.tank_capacity),
                             ObsComponent("position", fs, discrete=True, low=1))
        else:
            self.obs_spec = (ObsComponent("position", fs, discrete=True, low=1),
                             ObsComponent("tire_deg", config.obs_max_tire_deg))

    def _observe(self) -> Observation:
        agent = self.state.agent
        pos = self.state.position_of(0)
        if self.obs_kind == OBS_DQN:
            raw = (float(agent.cond.fuel_mass), pos)
        else:
            raw = (pos, float(agent.cond.tire_deg))
        vec = np.array([min(max(v / c.high, 0.0), 1.0) for v, c in zip(raw, self.obs_spec)])
        return Observation(self.obs_kind, raw, vec)

    def reset(self, seed: Optional[int] = None) -> Observation:
        if seed is None:
            seed = self.config.seed + self.episode
        self.state = init_race(self.config, seed)
        simulate_start(self.state)
        self.done = False
        self.episode += 1
        self.trajectory = []
        return self._observe()

    def step(self, action: int) -> StepResult:
        if self.done or self.state is None:
            raise RuntimeError("episode is finished; call reset()")
        action = int(action)
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action must be in 0..{N_ACTIONS - 1}, got {action}")
        state = self.state
        lap = state.lap
        step_lap(state, {0: action_to_request(action)})
        agent = state.agent
        retired = agent.retired
        done = retired or state.finished
        pos = state.position_of(0)
        leader = min(c.cumulative_time for c in state.cars if not c.retired) if state.order else 0.0
        reward = compute_reward(
            pos, agent.cond.tire_deg, done, retired, self.config.reward, self.config.field_size,
            progress=lap / self.config.laps,
            leader_delta=(agent.cumulative_time - leader) / max(self.config.track.base_lap_time, 1.0),
            fuel_fraction=agent.cond.fuel_mass / self.config.car.tank_capacity)
        self.done = done
        info = {"lap": lap, "position": pos, "fuel": agent.cond.fuel_mass, "tire_deg": agent.cond.tire_deg,
                "last_pit": agent.last_pit_lap, "active_c60": len(state.active_c60s), "retired": retired,
                "race_time": agent.cumulative_time}
        self.trajectory.append((len(self.trajectory) + 1, action, reward, agent.cond.fuel_mass,
                                agent.cond.tire_deg, pos, lap))
        return StepResult(self._observe(), reward, done, info)

    def trajectory_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "action", "reward", "fuel", "tire_deg", "position", "lap"])
        for row in self.trajectory:
            w.writerow([row[0], row[1], f"{row[2]:.6f}", f"{row[3]:.6f}", f"{row[4]:.6f}", row[5], row[6]])
        return buf.getvalue()
