import numpy as np
import pytest

from nlsrace.env import N_ACTIONS, OBS_BASELINE, OBS_DQN, RaceEnv, RewardConfig, compute_reward


def test_reward_examples():
    cfg = RewardConfig()
    assert compute_reward(3, 40.0, False, False, cfg, 16) == 1.0
    assert compute_reward(2, 95.0, False, False, cfg, 16) == 0.0
    assert compute_reward(9, 95.0, False, False, cfg, 16) == -1.0
    assert compute_reward(1, 0.0, True, True, cfg, 16) == -10.0
    assert compute_reward(1, 0.0, True, False, cfg, 16) == pytest.approx(15 / 16 * 10)
    assert compute_reward(16, 0.0, True, False, cfg, 16) == 0.0


def test_shaping_terms_are_clamped():
    cfg = RewardConfig(progress_weight=5.0)
    assert compute_reward(1, 0.0, False, False, cfg, 16, progress=1.0) == 1.0


def test_reset_is_deterministic(default_cfg):
    a = RaceEnv(default_cfg).reset(seed=42)
    b = RaceEnv(default_cfg).reset(seed=42)
    assert a == b and np.array_equal(a.vector, b.vector)


def test_observation_variants(default_cfg):
    obs = RaceEnv(default_cfg, OBS_DQN).reset(seed=1)
    assert obs.raw[0] == pytest.approx(88.0) and obs.vector[0] == pytest.approx(1.0)
    base = RaceEnv(default_cfg, OBS_BASELINE).reset(seed=1)
    assert base.raw == (obs.raw[1], 0.0) and base.position == obs.position
    with pytest.raises(ValueError):
        RaceEnv(default_cfg, "other")


def test_pit_action_refuels_and_resets_tires(det_cfg):
    env = RaceEnv(det_cfg)
    env.reset(seed=0)
    for _ in range(3):
        env.step(0)
    before = env.state.agent.cond.fuel_mass
    res = env.step(1)
    after = env.state.agent.cond
    assert after.fuel_mass == pytest.approx(min(before - 11.0 + 44.0, 88.0))
    assert after.tire_age == 0 and res.info["last_pit"] == 4


def test_fuel_out_ends_episode(det_cfg):
    env = RaceEnv(det_cfg)
    env.reset(seed=0)
    rewards = []
    done = False
    while not done:
        res = env.step(0)
        rewards.append(res.reward)
        done = res.done
    assert res.info["retired"] and res.reward == -10.0
    assert len(rewards) == 9
    with pytest.raises(RuntimeError):
        env.step(0)


def test_full_race_ends_at_lap_25(det_cfg):
    env = RaceEnv(det_cfg)
    env.reset(seed=0)
    plan = {8: 3, 16: 2, 22: 1}
    for lap in range(1, 26):
        res = env.step(plan.get(lap, 0))
        assert res.done == (lap == 25)
    assert res.info["lap"] == 25 and not res.info["retired"]
    assert len(env.trajectory_csv().splitlines()) == 26


def test_same_actions_same_trajectory(default_cfg):
    def roll():
        env = RaceEnv(default_cfg)
        env.reset(seed=5)
        out = []
        for lap in range(1, 26):
            res = env.step(1 if lap % 5 == 0 else 0)
            out.append((res.reward, res.observation.raw, res.info["race_time"]))
        return out
    assert roll() == roll()


def test_invalid_action(det_cfg):
    env = RaceEnv(det_cfg)
    env.reset(seed=0)
    with pytest.raises(ValueError):
        env.step(N_ACTIONS)
