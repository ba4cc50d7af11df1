"""Greedy-policy evaluation over independently seeded races."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np


class FixedSequencePolicy:
    """Replays a precomputed action list, one entry per lap; 0 afterwards."""

    def __init__(self, actions: Sequence[int]):
        self.actions = [int(a) for a in actions]
        self._k = 0

    def reset(self) -> None:
        self._k = 0

    def __call__(self, obs) -> int:
        a = self.actions[self._k] if self._k < len(self.actions) else 0
        self._k += 1
        return a


class NeverPit:
    def __call__(self, obs) -> int:
        return 0


@dataclass(frozen=True)
class RaceRecord:
    seed: int
    final_position: int
    retired: bool
    race_time: float
    total_reward: float
    stop_laps: tuple


@dataclass(frozen=True)
class EvalStats:
    n_races: int
    mean_final_position: float
    win_rate: float
    retirement_rate: float
    mean_race_time: float
    races: tuple

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("races")
        return d


def run_episode(policy: Callable, env, seed: int) -> RaceRecord:
    if hasattr(policy, "reset"):
        policy.reset()
    obs = env.reset(seed=seed)
    done, total, info = False, 0.0, {}
    stops = []
    while not done:
        a = int(policy(obs))
        res = env.step(a)
        if a and not res.info.get("retired") and res.info.get("last_pit") == res.info.get("lap"):
            stops.append(res.info["lap"])
        total += res.reward
        obs, done, info = res.observation, res.done, res.info
    return RaceRecord(seed=seed, final_position=int(info.get("position", 0)), retired=bool(info.get("retired")),
                      race_time=float(info.get("race_time", np.nan)), total_reward=total, stop_laps=tuple(stops))


def _run_chunk(args):
    policy, env_factory, seeds = args
    env = env_factory()
    return [run_episode(policy, env, s) for s in seeds]


def evaluate(policy: Callable, env_factory: Callable, n_races: int, seed: int = 0, jobs: int = 1) -> EvalStats:
    """Run ``n_races`` races with seeds ``seed, seed+1, ...`` under a greedy policy.

    With ``jobs > 1`` the races are spread over worker processes (policy and
    factory must pickle); records are always returned in seed order.
    """
    if n_races < 1:
        raise ValueError("n_races must be >= 1")
    seeds = [seed + k for k in range(n_races)]
    if jobs <= 1:
        records = _run_chunk((policy, env_factory, seeds))
    else:
        chunks = [seeds[k::jobs] for k in range(jobs) if seeds[k::jobs]]
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(_run_chunk, [(policy, env_factory, c) for c in chunks]))
        by_seed = {r.seed: r for part in parts for r in part}
        records = [by_seed[s] for s in seeds]
    pos = np.array([r.final_position for r in records], dtype=float)
    finished = [r.race_time for r in records if not r.retired]
    return EvalStats(
        n_races=n_races,
        mean_final_position=float(pos.mean()),
        win_rate=float(np.mean([r.final_position == 1 and not r.retired for r in records])),
        retirement_rate=float(np.mean([r.retired for r in records])),
        mean_race_time=float(np.mean(finished)) if finished else float("nan"),
        races=tuple(records),
    )
