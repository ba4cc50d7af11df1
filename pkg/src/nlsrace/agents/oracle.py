"""Exhaustive pit-strategy search on a deterministic race.

With every stochastic model off, the agent's race time depends only on its
own action sequence, so the search can run on the agent alone. Sequences are
enumerated depth-first; subtrees reached with an identical car state are
solved once (memoized), which keeps the full 4**m tree tractable.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import replace
from functools import lru_cache
from typing import TYPE_CHECKING, Optional, Sequence

from ..engine import REFUEL_OPTIONS, action_to_request, apply_pit, run_race
from ..model import FUEL_EPS, CarCondition, LapTimer, advance_condition

if TYPE_CHECKING:
    from ..config import RaceConfig

MAX_ORACLE_LAPS = 30


def _check(config: "RaceConfig") -> None:
    if not config.is_deterministic:
        raise ValueError("strategy_oracle needs a deterministic configuration (profile 'deterministic')")
    if config.laps > MAX_ORACLE_LAPS:
        raise ValueError(f"oracle limited to {MAX_ORACLE_LAPS} laps, got {config.laps}")


def agent_lap(config: "RaceConfig", timer: LapTimer, cond: CarCondition, lap: int, action: int,
              pit_out_time: Optional[float], start_delay: float):
    """One deterministic lap for the agent, mirroring the engine's arithmetic.

    Returns (lap_time, new_condition, next_pit_out_time); lap_time is None when
    the car cannot complete the lap.
    """
    params = timer.params
    if cond.fuel_mass < params.fuel_per_lap - FUEL_EPS:
        return None, cond, None
    request = action_to_request(action) if lap < config.laps else None
    times = timer.sector_times(cond.fuel_mass, cond.tire_age)
    n = len(times)
    if lap == 1:
        times[0] = start_delay
    elif pit_out_time is not None:
        times[0] = pit_out_time
    if request is not None:
        times[n - 1] = config.regulation.travel_in
    new = advance_condition(cond, params)
    next_out = None
    if request is not None:
        result = apply_pit(replace(new, retired=False), params, request, config.regulation, lap)
        new, next_out = result.condition, result.next_first_sector_time
    if new.retired:
        return None, new, None
    return times, new, next_out


def strategy_oracle(config: "RaceConfig", prune: bool = True) -> tuple[list[int], float]:
    """Best agent action sequence and its race time.

    ``prune`` skips sequences that pit on two consecutive laps or refuel for
    more laps than remain; fuel infeasibility is always pruned.
    """
    _check(config)
    m = config.laps
    timer = LapTimer(config.track, config.car.__class__(**{**config.car.__dict__,
                                                          "base_lap_offset": config.agent_pace_offset}))
    start_delay = config.start.per_grid_slot[config.agent_grid_slot - 1][0]

    @lru_cache(maxsize=None)
    def best(lap: int, fuel: float, age: int, pit_out: Optional[float], pitted_last: bool):
        if lap > m:
            return 0.0, ()
        cond = CarCondition(fuel_mass=fuel, tire_age=age, tire_deg=age * timer.params.tire_deg_per_lap, lap=lap)
        result = (math.inf, ())
        for action in range(1 + len(REFUEL_OPTIONS)):
            if action and lap == m:
                continue
            if prune and action and pitted_last:
                continue
            if prune and action and REFUEL_OPTIONS[action - 1] > m - lap + 2 and action > 1:
                # a smaller refuel already covers the remaining distance
                if REFUEL_OPTIONS[action - 2] >= m - lap:
                    continue
            times, new, out = agent_lap(config, timer, cond, lap, action, pit_out, start_delay)
            if times is None:
                continue
            rest, seq = best(lap + 1, new.fuel_mass, new.tire_age, out, action != 0)
            total = math.fsum(times) + rest
            if total < result[0] - 1e-9:
                result = (total, (action,) + seq)
        return result

    total, seq = best(1, config.start_fuel, 0, None, False)
    if not math.isfinite(total):
        raise ValueError("no feasible strategy finishes the race")
    # report the time the engine itself produces for this sequence
    state = run_race(config.with_opponents(0), seed=config.seed, agent_actions=list(seq))
    return list(seq), state.agent.cumulative_time


def brute_force_oracle(config: "RaceConfig") -> tuple[list[int], float]:
    """Literal enumeration of all 4**m sequences through the engine (small m only)."""
    _check(config)
    if config.laps > 8:
        raise ValueError("brute force limited to 8 laps")
    solo = config.with_opponents(0)
    best_seq, best_time = None, math.inf
    for seq in itertools.product(range(1 + len(REFUEL_OPTIONS)), repeat=config.laps):
        state = run_race(solo, seed=config.seed, agent_actions=list(seq))
        agent = state.agent
        if agent.retired or agent.laps_completed < config.laps:
            continue
        if agent.cumulative_time < best_time - 1e-9:
            best_seq, best_time = list(seq), agent.cumulative_time
    if best_seq is None:
        raise ValueError("no feasible strategy finishes the race")
    return best_seq, best_time


def stop_laps(actions: Sequence[int], laps: Optional[int] = None) -> list[int]:
    """Laps at whose end the sequence pits."""
    m = len(actions) if laps is None else laps
    return [lap for lap, a in enumerate(actions, start=1) if a and lap < m]
