"""Learning agents, their network and replay memory, evaluation, and the strategy oracle."""

from .bandit import BanditEnv
from .base import PRESETS, TrainConfig, TrainingHistory, epsilon_at, epsilon_greedy, greedy, preset
from .dqn import DQNAgent, dqn_train
from .evaluation import EvalStats, FixedSequencePolicy, NeverPit, evaluate
from .mlp import MlpParams, SGD, init_mlp, masked_loss, mlp_backward, mlp_forward
from .oracle import brute_force_oracle, stop_laps, strategy_oracle
from .qlearning import QLearningAgent, QTable, qlearn_train
from .replay import ReplayBuffer

__all__ = [
    "BanditEnv", "DQNAgent", "EvalStats", "FixedSequencePolicy", "MlpParams", "NeverPit", "PRESETS",
    "QLearningAgent", "QTable", "ReplayBuffer", "SGD", "TrainConfig", "TrainingHistory", "brute_force_oracle",
    "dqn_train", "epsilon_at", "epsilon_greedy", "evaluate", "greedy", "init_mlp", "masked_loss",
    "mlp_backward", "mlp_forward", "preset", "qlearn_train", "stop_laps", "strategy_oracle",
]
