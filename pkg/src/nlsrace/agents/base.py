"""Shared pieces for the learning agents: training configuration, presets,
exploration, and per-episode metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 5000
    learning_rate: float = 0.001
    batch_size: int = 32
    buffer_capacity: int = 10_000
    gamma: float = 0.99
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_fraction: float = 0.6
    target_sync_interval: int = 500
    eval_interval: int = 500
    seed: int = 0
    hidden_layers: tuple = (50,)
    momentum: float = 0.0
    n_bins: int = 10
    loss_log_every: int = 50
    q_init: float = 0.0

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.batch_size > self.buffer_capacity:
            raise ValueError("need 1 <= batch_size <= buffer_capacity")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        if not (0 <= self.epsilon_end <= self.epsilon_start <= 1):
            raise ValueError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if not 0 < self.epsilon_decay_fraction <= 1:
            raise ValueError("epsilon_decay_fraction must be in (0, 1]")
        if self.target_sync_interval < 1:
            raise ValueError("target_sync_interval must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if not self.hidden_layers or min(self.hidden_layers) < 1:
            raise ValueError("hidden_layers must be positive widths")

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "paper-v1": TrainConfig(episodes=10_000, learning_rate=0.001),
    "paper-v2": TrainConfig(episodes=50_000, learning_rate=0.01),
    "paper-v3": TrainConfig(episodes=100_000, learning_rate=0.01),
    "desk": TrainConfig(episodes=5_000, learning_rate=0.001),
    "smoke": TrainConfig(episodes=500, learning_rate=0.001, eval_interval=100),
    "qlearn": TrainConfig(episodes=10_000, learning_rate=0.1),
}


def preset(name: str) -> TrainConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def epsilon_at(episode: int, cfg: TrainConfig) -> float:
    """Exponential decay from start to end over the first decay fraction of episodes."""
    horizon = cfg.epsilon_decay_fraction * cfg.episodes
    if cfg.epsilon_start == 0 or episode >= horizon:
        return cfg.epsilon_end
    if cfg.epsilon_end == 0:
        return cfg.epsilon_start * (1 - episode / horizon)
    return cfg.epsilon_start * (cfg.epsilon_end / cfg.epsilon_start) ** (episode / horizon)


def greedy(q_values) -> int:
    """argmax with the lowest index winning ties."""
    return int(np.argmax(np.asarray(q_values)))


def epsilon_greedy(q_values, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    q = np.asarray(q_values)
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(len(q)))
    return greedy(q)


@dataclass
class TrainingHistory:
    episode: list = field(default_factory=list)
    total_reward: list = field(default_factory=list)
    final_position: list = field(default_factory=list)
    mean_loss: list = field(default_factory=list)
    epsilon: list = field(default_factory=list)

    def record(self, episode, total_reward, final_position, mean_loss, epsilon):
        self.episode.append(int(episode))
        self.total_reward.append(float(total_reward))
        self.final_position.append(int(final_position))
        self.mean_loss.append(float(mean_loss))
        self.epsilon.append(float(epsilon))

    def __len__(self):
        return len(self.episode)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "total_reward", "final_position", "mean_loss", "epsilon"])
        for row in zip(self.episode, self.total_reward, self.final_position, self.mean_loss, self.epsilon):
            e, r, p, loss, eps = row
            w.writerow([e, f"{r:.6f}", p, "" if math.isnan(loss) else f"{loss:.8g}", f"{eps:.6f}"])
        return buf.getvalue()

    def loss_every(self, k: int) -> list:
        """(episode, mean loss) every k-th episode."""
        return [(e, loss) for e, loss in zip(self.episode, self.mean_loss) if e % k == 0]
