"""Tabular Q-learning over a binned observation space."""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ..env import OBS_DQN, ObsComponent, Observation
from ..stochastic import derive_seed
from .base import TrainConfig, TrainingHistory, epsilon_at, epsilon_greedy, greedy


class QTable:
    """Q-values per (binned state, action).

    Discrete components (race position) get one bin per value; continuous ones
    are split into ``n_bins`` equal-width bins over [low, high], with values
    beyond the range falling into the edge bins.
    """

    def __init__(self, spec: Sequence[ObsComponent], n_actions: int, n_bins: int = 10, initial: float = 0.0):
        self.spec = tuple(spec)
        self.n_actions = int(n_actions)
        self.n_bins = int(n_bins)
        self.shape = tuple(int(c.high - c.low + 1) if c.discrete else self.n_bins for c in self.spec)
        self.values = np.full(self.shape + (self.n_actions,), float(initial))

    def index(self, raw) -> tuple:
        out = []
        for v, c, nb in zip(raw, self.spec, self.shape):
            if c.discrete:
                k = int(round(v)) - int(c.low)
            else:
                k = int(math.floor((v - c.low) / (c.high - c.low) * nb))
            out.append(min(max(k, 0), nb - 1))
        return tuple(out)

    def raw_from_vector(self, vec) -> tuple:
        return tuple(v * c.high for v, c in zip(vec, self.spec))

    def q(self, raw) -> np.ndarray:
        return self.values[self.index(raw)]

    def update(self, raw, action: int, reward: float, next_raw, done: bool, alpha: float, gamma: float) -> float:
        """One-step Q-learning update; returns the TD error."""
        s = self.index(raw) + (int(action),)
        target = reward if done else reward + gamma * float(np.max(self.values[self.index(next_raw)]))
        td = target - self.values[s]
        self.values[s] += alpha * td
        return float(td)

    def to_dict(self) -> dict:
        return {
            "spec": [{"name": c.name, "high": c.high, "discrete": c.discrete, "low": c.low} for c in self.spec],
            "n_actions": self.n_actions,
            "n_bins": self.n_bins,
            "shape": list(self.shape),
            "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QTable":
        spec = [ObsComponent(c["name"], c["high"], c["discrete"], c["low"]) for c in d["spec"]]
        table = cls(spec, d["n_actions"], d["n_bins"])
        values = np.asarray(d["values"], dtype=float)
        if values.shape != table.values.shape:
            raise ValueError(f"table shape {values.shape} does not match {table.values.shape}")
        table.values = values
        return table

    def states(self):
        return itertools.product(*(range(n) for n in self.shape))


def _obs_vector(X):
    return check_array(np.atleast_2d(X), dtype=float)


class QLearningAgent(BaseEstimator):
    """Baseline learner; ``fit`` takes an environment instead of a design matrix.

    ``q_init`` fills the table before learning; a value above any reachable
    return makes untried actions look attractive until they have been tried.
    """

    def __init__(self, episodes=10_000, learning_rate=0.1, gamma=0.99, epsilon_start=1.0, epsilon_end=0.05,
                 epsilon_decay_fraction=0.6, n_bins=10, seed=0, loss_log_every=50, q_init=0.0):
        self.episodes = episodes
        self.learning_rate = learning_rate
        self.gamma = gamma
        self.epsilon_start = epsilon_start
        self.epsilon_end = epsilon_end
        self.epsilon_decay_fraction = epsilon_decay_fraction
        self.n_bins = n_bins
        self.seed = seed
        self.loss_log_every = loss_log_every
        self.q_init = q_init

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "QLearningAgent":
        return cls(episodes=cfg.episodes, learning_rate=cfg.learning_rate, gamma=cfg.gamma,
                   epsilon_start=cfg.epsilon_start, epsilon_end=cfg.epsilon_end,
                   epsilon_decay_fraction=cfg.epsilon_decay_fraction, n_bins=cfg.n_bins, seed=cfg.seed,
                   loss_log_every=cfg.loss_log_every, q_init=cfg.q_init)

    def train_config(self) -> TrainConfig:
        return TrainConfig(episodes=self.episodes, learning_rate=self.learning_rate, gamma=self.gamma,
                           epsilon_start=self.epsilon_start, epsilon_end=self.epsilon_end,
                           epsilon_decay_fraction=self.epsilon_decay_fraction, n_bins=self.n_bins,
                           seed=self.seed, loss_log_every=self.loss_log_every, q_init=self.q_init)

    def fit(self, env, y=None, callback=None):
        if getattr(env, "obs_kind", None) == OBS_DQN and not hasattr(env, "rewards"):
            raise ValueError("Q-learning expects the baseline observation (position, tire_deg)")
        cfg = self.train_config()
        rng = np.random.default_rng(derive_seed(cfg.seed, 0x51))
        table = QTable(env.obs_spec, env.n_actions, cfg.n_bins, cfg.q_init)
        history = TrainingHistory()
        for ep in range(cfg.episodes):
            eps = epsilon_at(ep, cfg)
            obs = env.reset(seed=derive_seed(cfg.seed, ep) % (2 ** 62))
            total, sq, done, info = 0.0, [], False, {}
            while not done:
                a = epsilon_greedy(table.q(obs.raw), eps, rng)
                res = env.step(a)
                td = table.update(obs.raw, a, res.reward, res.observation.raw, res.done, cfg.learning_rate, cfg.gamma)
                sq.append(td * td)
                total += res.reward
                obs, done, info = res.observation, res.done, res.info
            history.record(ep + 1, total, info.get("position", 0), float(np.mean(sq)), eps)
            if callback is not None:
                callback(self, ep + 1, history)
        self.table_ = table
        self.history_ = history
        self.obs_kind_ = getattr(env, "obs_kind", None)
        return self

    def q_values(self, obs) -> np.ndarray:
        check_is_fitted(self, "table_")
        if isinstance(obs, Observation):
            return self.table_.q(obs.raw).copy()
        X = _obs_vector(obs)
        return np.array([self.table_.q(self.table_.raw_from_vector(row)) for row in X])

    def predict(self, X):
        """Greedy action for an Observation, or one per row of normalised vectors."""
        if isinstance(X, Observation):
            return greedy(self.q_values(X))
        q = self.q_values(X)
        return np.argmax(q, axis=1)

    def __call__(self, obs) -> int:
        return int(self.predict(obs))

    def to_dict(self) -> dict:
        check_is_fitted(self, "table_")
        return {"agent": "q", "obs_kind": self.obs_kind_, "params": self.get_params(), "table": self.table_.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "QLearningAgent":
        agent = cls(**d["params"])
        agent.table_ = QTable.from_dict(d["table"])
        agent.obs_kind_ = d.get("obs_kind")
        agent.history_ = TrainingHistory()
        return agent


def qlearn_train(env, cfg: TrainConfig):
    agent = QLearningAgent.from_config(cfg).fit(env)
    return agent.table_, agent.history_
