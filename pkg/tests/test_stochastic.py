import math

import numpy as np
import pytest

from nlsrace.model import ConfigError
from nlsrace.stochastic import (C60Event, C60Model, Fail, NoAttempt, OvertakeModel, Pass, RngStream, StartModel,
                                TrafficModel, attempt_overtake, derive_seed, per_sector, resolve_overtake,
                                roll_c60, sample_start_delay, sample_traffic_penalty, splitmix64)


def test_splitmix64_reference_values():
    # reference outputs of the SplitMix64 generator seeded with 0
    state, outs = 0, []
    for _ in range(3):
        outs.append(splitmix64(state))
        state = (state + 0x9E3779B97F4A7C15) & (2 ** 64 - 1)
    assert outs == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(7, 1) == derive_seed(7, 1)
    assert len({derive_seed(7, k) for k in range(100)}) == 100


def test_substreams_are_reproducible():
    a = RngStream.substream(42, 3).normal(size=5)
    b = RngStream.substream(42, 3).normal(size=5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, RngStream.substream(42, 4).normal(size=5))


def test_start_delay_degenerate():
    model = StartModel(((30.0, 0.0),))
    assert sample_start_delay(1, model, RngStream(0)) == 30.0


def test_start_delay_moments():
    model = StartModel(((30.0, 1.5),))
    rng = RngStream(123)
    draws = np.array([sample_start_delay(1, model, rng) for _ in range(10_000)])
    assert abs(draws.mean() - 30.0) < 0.05
    assert abs(draws.std(ddof=1) - 1.5) < 0.05


def test_start_delay_positive_and_slot_checked():
    model = StartModel(((0.1, 5.0),))
    rng = RngStream(1)
    assert all(sample_start_delay(1, model, rng) > 0 for _ in range(1000))
    with pytest.raises(ValueError):
        sample_start_delay(2, model, rng)


def test_start_model_validation():
    with pytest.raises(ConfigError):
        StartModel(((30.0, 1.0), (29.0, 1.0)))
    with pytest.raises(ConfigError):
        StartModel(((30.0, -1.0),))
    assert StartModel.linear(3, 96.0, 0.75, 0.5).per_grid_slot[2] == (97.5, 0.5)


def test_traffic_degenerate_and_clamped():
    rng = RngStream(5)
    assert sample_traffic_penalty(1, TrafficModel(((0.4, 0.0, 0.0),)), rng) == 0.4
    model = TrafficModel(((1.0, 5.0, 0.5),))
    assert min(sample_traffic_penalty(1, model, rng) for _ in range(2000)) >= 0.5
    with pytest.raises(ConfigError):
        TrafficModel(((0.1, 1.0, 0.5),))


def test_c60_sector_time_exact():
    assert C60Model((0.0,)).sector_time(4.8) == 288.0


def test_c60_probability_extremes():
    rng = RngStream(9)
    never = C60Model((0.0,))
    assert all(roll_c60(1, lap, never, rng) is None for lap in range(1, 10_001))
    always = C60Model((1.0,), min_duration_laps=2)
    ev = roll_c60(1, 4, always, rng)
    assert ev == C60Event(start_lap=4, sector=1, duration_laps=2)
    assert ev.covers(5, 1) and not ev.covers(6, 1) and not ev.covers(4, 2)


def test_overtake_outcomes():
    model = OvertakeModel(((1.2, 1.0, 0.7),))
    assert isinstance(attempt_overtake(5.0, 1, model, RngStream(0)), NoAttempt)
    assert isinstance(attempt_overtake(0.5, 1, model, RngStream(0)), Pass)
    never = OvertakeModel(((1.2, 0.0, 0.7),))
    assert attempt_overtake(0.5, 1, never, RngStream(0)) == Fail(0.7)
    with pytest.raises(ValueError):
        attempt_overtake(-0.1, 1, model, RngStream(0))


def test_resolve_overtake_threshold_uses_u():
    model = OvertakeModel(((1.0, 0.3, 0.5),))
    assert isinstance(resolve_overtake(0.2, 1, model, 0.29), Pass)
    assert isinstance(resolve_overtake(0.2, 1, model, 0.31), Fail)
    assert isinstance(resolve_overtake(1.0, 1, model, 0.0), Pass)  # gap equal to the threshold attempts


def test_overtake_frequency_matches_probability():
    model = OvertakeModel(((1.0, 0.6, 0.5),))
    rng = RngStream(77)
    wins = sum(isinstance(attempt_overtake(0.5, 1, model, rng), Pass) for _ in range(20_000))
    assert abs(wins / 20_000 - 0.6) < 0.015


def test_per_sector_broadcast():
    assert per_sector([0.5], 3, "x") == (0.5, 0.5, 0.5)
    assert per_sector(2.0, 2, "x") == (2.0, 2.0)
    with pytest.raises(ConfigError):
        per_sector([1.0, 2.0], 3, "x")
    assert not math.isnan(per_sector([1, 2, 3], 3, "x")[2])
