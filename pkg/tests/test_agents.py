import json
from functools import partial

import numpy as np
import pytest
from scipy import stats

from nlsrace.agents import (BanditEnv, DQNAgent, FixedSequencePolicy, MlpParams, NeverPit, QLearningAgent, QTable,
                            ReplayBuffer, SGD, TrainConfig, brute_force_oracle, epsilon_at, epsilon_greedy, evaluate,
                            greedy, init_mlp, masked_loss, mlp_backward, mlp_forward, preset, stop_laps,
                            strategy_oracle)
from nlsrace.stochastic import derive_seed
from nlsrace.env import OBS_BASELINE, OBS_DQN, ObsComponent, RaceEnv


# ---------------------------------------------------------------- policies

def test_greedy_examples():
    assert epsilon_greedy([0.1, 0.9, 0.3, 0.3], 0.0, np.random.default_rng(0)) == 1
    assert epsilon_greedy([0.5, 0.5, 0.1, 0.1], 0.0, np.random.default_rng(0)) == 0
    assert greedy([0.0, 0.0]) == 0


def test_epsilon_one_is_uniform():
    rng = np.random.default_rng(1)
    draws = np.array([epsilon_greedy([0, 1, 2, 3], 1.0, rng) for _ in range(100_000)])
    freq = np.bincount(draws, minlength=4) / len(draws)
    assert np.all(np.abs(freq - 0.25) < 0.01)
    with pytest.raises(ValueError):
        epsilon_greedy([0, 1], 1.5, rng)


def test_epsilon_schedule():
    cfg = TrainConfig(episodes=1000)
    assert epsilon_at(0, cfg) == 1.0
    assert epsilon_at(600, cfg) == 0.05 and epsilon_at(999, cfg) == 0.05
    values = [epsilon_at(e, cfg) for e in range(700)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_presets_and_config_validation():
    assert preset("paper-v2").episodes == 50_000 and preset("paper-v2").learning_rate == 0.01
    assert preset("desk").episodes == 5000
    with pytest.raises(ValueError):
        preset("missing")
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"episodes": 5, "unknown": 1})
    cfg = TrainConfig(hidden_layers=[8, 8])
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- replay

def test_replay_keeps_newest():
    buf = ReplayBuffer(5, 2)
    for k in range(8):
        buf.push([k, k], k % 4, float(k), [k + 1, k + 1], k == 7)
    items = buf.contents()
    assert len(buf) == 5
    assert [r for _, _, r, _, _ in items] == [3.0, 4.0, 5.0, 6.0, 7.0]
    assert items[-1][4] is True


def test_replay_sampling_uniform():
    buf = ReplayBuffer(20, 1)
    for k in range(20):
        buf.push([k], 0, float(k), [k], False)
    rng = np.random.default_rng(3)
    counts = np.zeros(20)
    for _ in range(10_000):
        counts[buf.sample_indices(1, rng)] += 1
    assert stats.chisquare(counts).pvalue > 0.001
    with pytest.raises(ValueError):
        buf.sample(21, rng)
    with pytest.raises(ValueError):
        ReplayBuffer(0, 1)


# ---------------------------------------------------------------- network

def test_forward_zero_net():
    params = MlpParams([np.zeros((2, 50)), np.zeros((50, 4))], [np.zeros(50), np.zeros(4)])
    assert np.array_equal(mlp_forward(params, [0.3, 0.7]), np.zeros(4))


def test_forward_hand_computed():
    w1 = np.array([[1.0, 0.0], [0.0, 1.0]])
    b1 = np.array([0.0, -0.5])
    w2 = np.array([[0.1, 0.2, 0.3, 0.4], [1.0, -1.0, 0.5, 0.0]])
    b2 = np.array([0.01, 0.02, 0.03, 0.04])
    params = MlpParams([w1, w2], [b1, b2])
    x = np.array([0.2, 0.9])
    h = np.array([0.2, 0.4])  # relu(x @ w1 + b1)
    expected = np.array([0.1 * 0.2 + 0.4 + 0.01, 0.2 * 0.2 - 0.4 + 0.02,
                         0.3 * 0.2 + 0.2 + 0.03, 0.4 * 0.2 + 0.04])
    assert np.allclose(mlp_forward(params, x), expected, atol=1e-12, rtol=0)
    assert np.allclose(h @ w2 + b2, expected, atol=1e-12, rtol=0)


def test_positive_region_linearity():
    rng = np.random.default_rng(0)
    w1 = np.abs(rng.normal(size=(2, 5)))
    params = MlpParams([w1, rng.normal(size=(5, 4))], [np.zeros(5), np.zeros(4)])
    x = np.array([0.3, 0.6])
    pre1 = x @ w1
    pre2 = (2 * x) @ w1
    assert np.all(pre1 > 0) and np.allclose(pre2, 2 * pre1)
    assert np.allclose(mlp_forward(params, 2 * x), 2 * mlp_forward(params, x))


def test_backward_zero_loss_and_mask():
    rng = np.random.default_rng(5)
    params = init_mlp((2, 50, 4), rng)
    x = rng.random((3, 2))
    q = mlp_forward(params, x)
    grads, loss = mlp_backward(params, x, q, np.ones_like(q))
    assert loss == 0.0 and np.all(grads.flat() == 0)
    mask = np.zeros_like(q)
    mask[:, 2] = 1
    grads, _ = mlp_backward(params, x, q + 1.0, mask)
    assert np.all(grads.weights[-1][:, [0, 1, 3]] == 0) and np.all(grads.biases[-1][[0, 1, 3]] == 0)


def gradient_errors(n_points, seed=0):
    rng = np.random.default_rng(seed)
    h = 1e-5
    worst = 0.0
    for _ in range(n_points):
        params = init_mlp((2, 50, 4), rng)
        x = rng.random((4, 2))
        target = rng.normal(size=(4, 4))
        mask = np.zeros((4, 4))
        mask[np.arange(4), rng.integers(0, 4, 4)] = 1
        grads, _ = mlp_backward(params, x, target, mask)
        base = params.flat()
        analytic = grads.flat()
        idx = rng.choice(len(base), size=20, replace=False)
        for k in idx:
            plus, minus = base.copy(), base.copy()
            plus[k] += h
            minus[k] -= h
            params.set_flat(plus)
            lp = masked_loss(params, x, target, mask)
            params.set_flat(minus)
            lm = masked_loss(params, x, target, mask)
            params.set_flat(base)
            numeric = (lp - lm) / (2 * h)
            denom = max(abs(numeric), abs(analytic[k]), 1e-7)
            worst = max(worst, abs(numeric - analytic[k]) / denom)
    return worst


def test_gradients_match_finite_differences():
    assert gradient_errors(10, seed=11) < 1e-4


def test_sgd_step_and_momentum():
    params = MlpParams([np.ones((1, 1))], [np.zeros(1)])
    grads = MlpParams([np.full((1, 1), 2.0)], [np.ones(1)])
    SGD(0.1).step(params, grads)
    assert params.weights[0][0, 0] == pytest.approx(0.8) and params.biases[0][0] == pytest.approx(-0.1)
    opt = SGD(0.1, momentum=0.5)
    params = MlpParams([np.ones((1, 1))], [np.zeros(1)])
    opt.step(params, grads)
    opt.step(params, grads)
    assert params.weights[0][0, 0] == pytest.approx(1 - 0.2 - (0.5 * 0.2 + 0.2))


def test_mlp_params_round_trip():
    params = init_mlp((2, 3, 4), np.random.default_rng(0))
    back = MlpParams.from_dict(json.loads(json.dumps(params.to_dict())))
    assert np.array_equal(back.flat(), params.flat())


# ---------------------------------------------------------------- tabular

def test_q_update_degenerate():
    spec = (ObsComponent("position", 1, discrete=True, low=1), ObsComponent("tire_deg", 100.0))
    table = QTable(spec, 4)
    table.update((1, 10.0), 2, 3.5, (1, 20.0), False, alpha=1.0, gamma=0.0)
    assert table.q((1, 10.0))[2] == 3.5


def test_q_binning():
    spec = (ObsComponent("position", 16, discrete=True, low=1), ObsComponent("tire_deg", 100.0))
    table = QTable(spec, 4, n_bins=10)
    assert table.shape == (16, 10)
    assert table.index((1, 0.0)) == (0, 0)
    assert table.index((16, 35.0)) == (15, 3)
    assert table.index((3, 120.0)) == (2, 9)
    assert QTable.from_dict(json.loads(json.dumps(table.to_dict()))).shape == table.shape


@pytest.mark.parametrize("arm", [0, 1, 2, 3])
def test_both_agents_solve_bandit(arm):
    rewards = [0.0] * 4
    rewards[arm] = 1.0
    q = QLearningAgent(episodes=200, learning_rate=0.5, seed=arm).fit(BanditEnv(rewards, OBS_BASELINE))
    d = DQNAgent(episodes=500, learning_rate=0.05, batch_size=16, buffer_capacity=500, target_sync_interval=10,
                 seed=arm).fit(BanditEnv(rewards, OBS_DQN))
    q_obs = BanditEnv(rewards, OBS_BASELINE).reset()
    d_obs = BanditEnv(rewards, OBS_DQN).reset()
    assert q(q_obs) == arm
    assert d(d_obs) == arm


def test_observation_variant_checks(det_cfg):
    with pytest.raises(ValueError):
        QLearningAgent(episodes=1).fit(RaceEnv(det_cfg, OBS_DQN))
    with pytest.raises(ValueError):
        DQNAgent(episodes=1).fit(RaceEnv(det_cfg, OBS_BASELINE))


def test_estimator_params_round_trip():
    agent = QLearningAgent(learning_rate=0.2, q_init=3.0)
    assert agent.get_params()["q_init"] == 3.0
    assert agent.set_params(learning_rate=0.3).learning_rate == 0.3
    assert QLearningAgent.from_config(agent.train_config()).get_params() == agent.get_params()
    dqn = DQNAgent(hidden_layers=(8, 8))
    assert DQNAgent.from_config(dqn.train_config()).get_params() == dqn.get_params()


def test_unfitted_agent_raises():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        QLearningAgent().predict(np.zeros((1, 2)))
    with pytest.raises(NotFittedError):
        DQNAgent().predict(np.zeros((1, 2)))


def test_dqn_reproducible_and_target_syncs(reduced_cfg):
    def train():
        return DQNAgent(episodes=6, batch_size=8, buffer_capacity=100, target_sync_interval=25, seed=4).fit(
            RaceEnv(reduced_cfg, OBS_DQN))
    a, b = train(), train()
    assert np.array_equal(a.params_.flat(), b.params_.flat())
    assert a.target_syncs_ == a.n_steps_ // 25
    back = DQNAgent.from_dict(json.loads(json.dumps(a.to_dict())))
    obs = np.array([[0.5, 0.1], [1.0, 1.0]])
    assert np.array_equal(back.predict(obs), a.predict(obs))


def test_target_constant_between_syncs(reduced_cfg):
    agent = DQNAgent(episodes=2, batch_size=8, buffer_capacity=100, target_sync_interval=10_000, seed=1)
    agent.fit(RaceEnv(reduced_cfg, OBS_DQN))
    # no sync happened, so the target is still the initial network bit for bit
    init = init_mlp((2, 50, 4), np.random.default_rng(derive_seed(1, 0xD0)))
    assert agent.target_syncs_ == 0
    assert np.array_equal(agent.target_params_.flat(), init.flat())
    assert not np.array_equal(agent.params_.flat(), init.flat())


def test_q_checkpoint_round_trip(det_cfg):
    agent = QLearningAgent(episodes=20, seed=2).fit(RaceEnv(det_cfg, OBS_BASELINE))
    back = QLearningAgent.from_dict(json.loads(json.dumps(agent.to_dict())))
    assert np.array_equal(back.table_.values, agent.table_.values)
    assert back.obs_kind_ == OBS_BASELINE
    assert len(agent.history_) == 20 and agent.history_.to_csv().count("\n") == 21
    assert [e for e, _ in agent.history_.loss_every(10)] == [10, 20]


# ---------------------------------------------------------------- evaluation and oracle

def test_evaluate_determinism_and_never_pit(default_cfg):
    factory = partial(RaceEnv, default_cfg, OBS_DQN)
    a = evaluate(NeverPit(), factory, 1, seed=3)
    b = evaluate(NeverPit(), factory, 1, seed=3)
    assert a.races == b.races
    assert evaluate(NeverPit(), factory, 3, seed=0).retirement_rate == 1.0
    with pytest.raises(ValueError):
        evaluate(NeverPit(), factory, 0)


def test_evaluate_parallel_matches_serial(default_cfg):
    factory = partial(RaceEnv, default_cfg, OBS_DQN)
    policy = FixedSequencePolicy([0] * 7 + [3] + [0] * 7 + [2] + [0] * 5 + [1] + [0] * 3)
    assert evaluate(policy, factory, 4, seed=1, jobs=2) == evaluate(policy, factory, 4, seed=1)


def test_oracle_replay_wins_deterministic(det_cfg):
    actions, _ = strategy_oracle(det_cfg)
    stats_ = evaluate(FixedSequencePolicy(actions), partial(RaceEnv, det_cfg, OBS_DQN), 3, seed=0)
    assert stats_.win_rate == 1.0 and stats_.retirement_rate == 0.0


def small(det_cfg, laps, fuel_laps):
    return det_cfg.replace(laps=laps, start_fuel_laps=fuel_laps)


def test_oracle_short_fuel_pits_early(det_cfg):
    cfg = small(det_cfg, 5, 3)
    actions, total = strategy_oracle(cfg)
    assert stop_laps(actions)[0] <= 3
    bf_actions, bf_total = brute_force_oracle(cfg)
    assert total == pytest.approx(bf_total, abs=1e-9)


def test_oracle_no_stop_when_fuel_suffices(det_cfg):
    actions, _ = strategy_oracle(small(det_cfg, 6, 8))
    assert actions == [0] * 6


@pytest.mark.parametrize("laps,fuel", [(6, 2), (7, 4), (8, 3)])
def test_oracle_matches_brute_force(det_cfg, laps, fuel):
    cfg = small(det_cfg, laps, fuel)
    seq, total = strategy_oracle(cfg)
    bf_seq, bf_total = brute_force_oracle(cfg)
    assert total == pytest.approx(bf_total, abs=1e-9)


def test_oracle_guards(default_cfg, det_cfg):
    with pytest.raises(ValueError):
        strategy_oracle(default_cfg)
    with pytest.raises(ValueError):
        strategy_oracle(det_cfg.replace(laps=31))
