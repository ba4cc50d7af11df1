"""Seeded random models: rolling start, traffic, Code60 and overtakes.

Every car owns its own generator stream derived from the race seed and the
car id, so adding a car to the field never changes another car's draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .model import ConfigError, _require

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One step of the SplitMix64 output function (Steele, Lea & Flood)."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, stream_id: int) -> int:
    """Mix a master seed and a stream id into a decorrelated 64-bit seed."""
    return splitmix64((splitmix64(master & MASK64) ^ (stream_id & MASK64)) & MASK64)


class RngStream:
    """A single-owner random stream backed by numpy's PCG64."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    @classmethod
    def substream(cls, master: int, stream_id: int) -> "RngStream":
        return cls(derive_seed(master, stream_id))

    def normal(self, mu: float = 0.0, sigma: float = 1.0, size=None):
        return self.gen.normal(mu, sigma, size)

    def uniform(self, size=None):
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, n: int, size: int, replace: bool = True):
        return self.gen.choice(n, size=size, replace=replace)


@dataclass(frozen=True)
class StartModel:
    per_grid_slot: tuple[tuple[float, float], ...]

    def __post_init__(self):
        prev = -math.inf
        for slot, (mu, sigma) in enumerate(self.per_grid_slot, start=1):
            _require(sigma >= 0, "start.sigma", f"slot {slot}: sigma must be >= 0")
            _require(mu > prev, "start.mu", f"slot {slot}: mu must increase with grid slot")
            prev = mu

    @classmethod
    def linear(cls, n_slots: int, mu_first: float, mu_step: float, sigma: float) -> "StartModel":
        return cls(tuple((mu_first + mu_step * k, sigma) for k in range(n_slots)))

    @property
    def n_slots(self) -> int:
        return len(self.per_grid_slot)


@dataclass(frozen=True)
class TrafficModel:
    per_sector: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        for s, (mean, sd, lo) in enumerate(self.per_sector, start=1):
            _require(mean >= lo >= 0, "traffic.mean", f"sector {s}: need mean >= min >= 0")
            _require(sd >= 0, "traffic.stddev", f"sector {s}: stddev must be >= 0")

    @property
    def is_null(self) -> bool:
        return all(mean == 0 and sd == 0 and lo == 0 for mean, sd, lo in self.per_sector)


@dataclass(frozen=True)
class C60Model:
    per_sector_prob: tuple[float, ...]
    min_duration_laps: int = 2
    speed_limit_kmh: float = 60.0

    def __post_init__(self):
        for s, p in enumerate(self.per_sector_prob, start=1):
            _require(0.0 <= p <= 1.0, "c60.prob", f"sector {s}: probability must be in [0, 1]")
        _require(self.min_duration_laps >= 1, "c60.min_duration_laps", "must be >= 1")
        _require(self.speed_limit_kmh > 0, "c60.speed_limit_kmh", "must be > 0")

    def sector_time(self, length_km: float) -> float:
        """Time to cover a sector at the Code60 speed limit."""
        return length_km * 3600.0 / self.speed_limit_kmh


@dataclass(frozen=True)
class OvertakeModel:
    per_sector: tuple[tuple[float, float, float], ...]
    min_gap: float = 0.2

    def __post_init__(self):
        for s, (delta, prob, penalty) in enumerate(self.per_sector, start=1):
            _require(delta > 0, "overtake.delta_threshold", f"sector {s}: must be > 0")
            _require(0.0 <= prob <= 1.0, "overtake.success_prob", f"sector {s}: must be in [0, 1]")
            _require(penalty >= 0, "overtake.fail_penalty", f"sector {s}: must be >= 0")
        _require(self.min_gap >= 0, "overtake.min_gap", "must be >= 0")


@dataclass(frozen=True)
class C60Event:
    start_lap: int
    sector: int
    duration_laps: int

    @property
    def end_lap(self) -> int:
        return self.start_lap + self.duration_laps - 1

    def covers(self, lap: int, sector: int) -> bool:
        return sector == self.sector and self.start_lap <= lap <= self.end_lap


@dataclass(frozen=True)
class NoAttempt:
    pass


@dataclass(frozen=True)
class Pass:
    pass


@dataclass(frozen=True)
class Fail:
    penalty: float


Outcome = Union[NoAttempt, Pass, Fail]


def sample_start_delay(grid_slot: int, model: StartModel, rng: RngStream) -> float:
    if not 1 <= grid_slot <= model.n_slots:
        raise ValueError(f"grid_slot {grid_slot} outside 1..{model.n_slots}")
    mu, sigma = model.per_grid_slot[grid_slot - 1]
    if sigma == 0:
        return float(mu)
    value = float(rng.normal(mu, sigma))
    # a start delay cannot be zero or negative
    return value if value > 0 else math.ulp(0.0)


def clamp_traffic(z: Union[float, np.ndarray], mean: float, sd: float, lo: float):
    """Map standard-normal draws to clamped traffic penalties."""
    return np.maximum(mean + sd * np.asarray(z, dtype=float), lo)


def sample_traffic_penalty(sector_index: int, model: TrafficModel, rng: RngStream) -> float:
    mean, sd, lo = model.per_sector[sector_index - 1]
    if sd == 0:
        return float(max(mean, lo))
    return float(clamp_traffic(rng.normal(), mean, sd, lo))


def roll_c60(sector_index: int, lap: int, model: C60Model, rng: RngStream) -> Optional[C60Event]:
    """Maybe declare a Code60 in a sector; the caller guarantees none is active there."""
    p = model.per_sector_prob[sector_index - 1]
    u = float(rng.uniform())
    if u < p:
        return C60Event(start_lap=lap, sector=sector_index, duration_laps=model.min_duration_laps)
    return None


def resolve_overtake(gap: float, sector_index: int, model: OvertakeModel, u: float) -> Outcome:
    """Overtake outcome given a uniform draw ``u``; the engine pre-draws these."""
    delta, prob, penalty = model.per_sector[sector_index - 1]
    if gap > delta:
        return NoAttempt()
    if u < prob:
        return Pass()
    return Fail(penalty)


def attempt_overtake(gap: float, sector_index: int, model: OvertakeModel, rng: RngStream) -> Outcome:
    if gap < 0:
        raise ValueError(f"gap must be >= 0, got {gap}")
    delta = model.per_sector[sector_index - 1][0]
    if gap > delta:
        return NoAttempt()
    return resolve_overtake(gap, sector_index, model, float(rng.uniform()))


def per_sector(values: Sequence[float], n: int, key: str) -> tuple[float, ...]:
    """Broadcast a scalar or validate a per-sector list."""
    vals = list(values) if isinstance(values, (list, tuple)) else [values]
    if len(vals) == 1 and n > 1:
        vals = vals * n
    if len(vals) != n:
        raise ConfigError(key, f"expected {n} per-sector values, got {len(vals)}")
    return tuple(float(v) for v in vals)
