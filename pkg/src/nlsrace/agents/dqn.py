"""Deep Q-learning with experience replay and a periodically synced target network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ..env import OBS_BASELINE, Observation
from ..stochastic import derive_seed
from .base import TrainConfig, TrainingHistory, epsilon_at, epsilon_greedy, greedy
from .mlp import SGD, MlpParams, init_mlp, mlp_backward, mlp_forward
from .replay import ReplayBuffer


class DQNAgent(BaseEstimator):
    def __init__(self, episodes=5000, learning_rate=0.001, batch_size=32, buffer_capacity=10_000, gamma=0.99,
                 epsilon_start=1.0, epsilon_end=0.05, epsilon_decay_fraction=0.6, target_sync_interval=500,
                 hidden_layers=(50,), momentum=0.0, seed=0, loss_log_every=50):
        self.episodes = episodes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.buffer_capacity = buffer_capacity
        self.gamma = gamma
        self.epsilon_start = epsilon_start
        self.epsilon_end = epsilon_end
        self.epsilon_decay_fraction = epsilon_decay_fraction
        self.target_sync_interval = target_sync_interval
        self.hidden_layers = hidden_layers
        self.momentum = momentum
        self.seed = seed
        self.loss_log_every = loss_log_every

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "DQNAgent":
        return cls(episodes=cfg.episodes, learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                   buffer_capacity=cfg.buffer_capacity, gamma=cfg.gamma, epsilon_start=cfg.epsilon_start,
                   epsilon_end=cfg.epsilon_end, epsilon_decay_fraction=cfg.epsilon_decay_fraction,
                   target_sync_interval=cfg.target_sync_interval, hidden_layers=tuple(cfg.hidden_layers),
                   momentum=cfg.momentum, seed=cfg.seed, loss_log_every=cfg.loss_log_every)

    def train_config(self) -> TrainConfig:
        return TrainConfig(episodes=self.episodes, learning_rate=self.learning_rate, batch_size=self.batch_size,
                           buffer_capacity=self.buffer_capacity, gamma=self.gamma,
                           epsilon_start=self.epsilon_start, epsilon_end=self.epsilon_end,
                           epsilon_decay_fraction=self.epsilon_decay_fraction,
                           target_sync_interval=self.target_sync_interval, hidden_layers=tuple(self.hidden_layers),
                           momentum=self.momentum, seed=self.seed, loss_log_every=self.loss_log_every)

    def fit(self, env, y=None, callback=None):
        if getattr(env, "obs_kind", None) == OBS_BASELINE and not hasattr(env, "rewards"):
            raise ValueError("DQN expects the (fuel_mass, position) observation")
        cfg = self.train_config()
        rng = np.random.default_rng(derive_seed(cfg.seed, 0xD0))
        obs_dim = len(env.obs_spec)
        online = init_mlp((obs_dim,) + cfg.hidden_layers + (env.n_actions,), rng)
        target = online.copy()
        opt = SGD(cfg.learning_rate, cfg.momentum)
        buffer = ReplayBuffer(cfg.buffer_capacity, obs_dim)
        history = TrainingHistory()
        steps = 0
        self.target_syncs_ = 0
        for ep in range(cfg.episodes):
            eps = epsilon_at(ep, cfg)
            obs = env.reset(seed=derive_seed(cfg.seed, ep) % (2 ** 62))
            total, losses, done, info = 0.0, [], False, {}
            while not done:
                s = obs.vector
                a = epsilon_greedy(mlp_forward(online, s), eps, rng)
                res = env.step(a)
                buffer.push(s, a, res.reward, res.observation.vector, res.done)
                total += res.reward
                obs, done, info = res.observation, res.done, res.info
                steps += 1
                if len(buffer) >= cfg.batch_size:
                    losses.append(self._learn(online, target, opt, buffer, rng, cfg))
                if steps % cfg.target_sync_interval == 0:
                    target = online.copy()
                    self.target_syncs_ += 1
            history.record(ep + 1, total, info.get("position", 0),
                           float(np.mean(losses)) if losses else float("nan"), eps)
            if callback is not None:
                callback(self, ep + 1, history)
        self.params_ = online
        self.target_params_ = target
        self.history_ = history
        self.obs_kind_ = getattr(env, "obs_kind", None)
        self.n_steps_ = steps
        return self

    @staticmethod
    def _learn(online: MlpParams, target: MlpParams, opt: SGD, buffer: ReplayBuffer,
               rng: np.random.Generator, cfg: TrainConfig) -> float:
        s, a, r, s2, d = buffer.sample(cfg.batch_size, rng)
        q_next = mlp_forward(target, s2).max(axis=1)
        y = r + cfg.gamma * q_next * (~d)
        n_actions = online.biases[-1].shape[0]
        mask = np.zeros((len(a), n_actions))
        mask[np.arange(len(a)), a] = 1.0
        targets = np.zeros_like(mask)
        targets[np.arange(len(a)), a] = y
        grads, loss = mlp_backward(online, s, targets, mask)
        opt.step(online, grads)
        return loss

    def q_values(self, obs) -> np.ndarray:
        check_is_fitted(self, "params_")
        if isinstance(obs, Observation):
            return mlp_forward(self.params_, obs.vector)
        return mlp_forward(self.params_, check_array(np.atleast_2d(obs), dtype=float))

    def predict(self, X):
        if isinstance(X, Observation):
            return greedy(self.q_values(X))
        return np.argmax(self.q_values(X), axis=1)

    def __call__(self, obs) -> int:
        return int(self.predict(obs))

    def to_dict(self) -> dict:
        check_is_fitted(self, "params_")
        params = self.get_params()
        params["hidden_layers"] = list(params["hidden_layers"])
        return {"agent": "dqn", "obs_kind": self.obs_kind_, "params": params, "network": self.params_.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DQNAgent":
        params = dict(d["params"])
        params["hidden_layers"] = tuple(params["hidden_layers"])
        agent = cls(**params)
        agent.params_ = MlpParams.from_dict(d["network"])
        agent.obs_kind_ = d.get("obs_kind")
        agent.history_ = TrainingHistory()
        return agent


def dqn_train(env, cfg: TrainConfig):
    agent = DQNAgent.from_config(cfg).fit(env)
    return agent.params_, agent.history_
