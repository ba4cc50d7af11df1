"""Deterministic lap-time mathematics.

A sector time is the sector's base time plus the penalties the car's current
condition costs it (tire wear, fuel load, and whatever the caller adds for
traffic or the race start). Lap and race times are plain sums of those.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence


# tolerance for fuel comparisons; refuel/burn arithmetic accumulates rounding
FUEL_EPS = 1e-9


class ConfigError(ValueError):
    """Raised when a configuration value violates its declared invariant."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _require(ok: bool, field_name: str, message: str) -> None:
    if not ok:
        raise ConfigError(field_name, message)


@dataclass(frozen=True)
class SectorProfile:
    index: int
    base_time: float
    length_fraction: float
    tire_factor: float
    fuel_factor: float
    length_km: float

    def __post_init__(self):
        _require(self.index >= 1, "sector.index", f"must be >= 1, got {self.index}")
        _require(self.base_time > 0, "sector.base_time", f"must be > 0, got {self.base_time}")
        _require(0 < self.length_fraction <= 1, "sector.length_fraction",
                 f"must be in (0, 1], got {self.length_fraction}")
        _require(self.tire_factor >= 0, "sector.tire_factor", "must be >= 0")
        _require(self.fuel_factor >= 0, "sector.fuel_factor", "must be >= 0")
        _require(self.length_km > 0, "sector.length_km", "must be > 0")


@dataclass(frozen=True)
class TrackConfig:
    sectors: tuple[SectorProfile, ...]
    name: str = "track"

    def __post_init__(self):
        _require(len(self.sectors) >= 1, "track.sectors", "at least one sector required")
        total = sum(s.length_fraction for s in self.sectors)
        _require(abs(total - 1.0) <= 1e-9, "track.sector_lengths_km",
                 f"length fractions must sum to 1, got {total!r}")
        for i, s in enumerate(self.sectors, start=1):
            _require(s.index == i, "sector.index", f"sectors must be numbered 1..n, got {s.index} at {i}")

    @classmethod
    def from_lists(cls, base_times, lengths_km, tire_factors, fuel_factors, name="track"):
        n = len(base_times)
        for key, seq in (("track.sector_lengths_km", lengths_km),
                         ("track.tire_factors", tire_factors),
                         ("track.fuel_factors", fuel_factors)):
            _require(len(seq) == n, key, f"expected {n} entries, got {len(seq)}")
        lap_km = float(sum(lengths_km))
        sectors = tuple(
            SectorProfile(index=i + 1, base_time=float(base_times[i]),
                          length_fraction=float(lengths_km[i]) / lap_km,
                          tire_factor=float(tire_factors[i]), fuel_factor=float(fuel_factors[i]),
                          length_km=float(lengths_km[i]))
            for i in range(n)
        )
        return cls(sectors=sectors, name=name)

    @property
    def n_sectors(self) -> int:
        return len(self.sectors)

    @property
    def lap_length_km(self) -> float:
        return sum(s.length_km for s in self.sectors)

    @property
    def base_lap_time(self) -> float:
        return sum(s.base_time for s in self.sectors)


@dataclass(frozen=True)
class CarModelParams:
    fuel_sensitivity: float = 0.03
    fuel_per_lap: float = 11.0
    tank_capacity: float = 88.0
    tire_log_coeff: float = 0.8
    tire_deg_per_lap: float = 5.0
    critical_tire_deg: float = 110.0
    base_lap_offset: float = 0.0

    def __post_init__(self):
        for name in ("fuel_sensitivity", "fuel_per_lap", "tank_capacity", "tire_log_coeff",
                     "tire_deg_per_lap", "critical_tire_deg", "base_lap_offset"):
            value = getattr(self, name)
            _require(math.isfinite(value) and value >= 0, f"car.{name}", f"must be finite and >= 0, got {value}")
        _require(self.tank_capacity >= self.fuel_per_lap, "car.tank_capacity",
                 "must hold at least one lap of fuel")
        _require(self.critical_tire_deg > 90, "car.critical_tire_deg", "must exceed 90")

    @property
    def tank_laps(self) -> float:
        return self.tank_capacity / self.fuel_per_lap if self.fuel_per_lap > 0 else math.inf


@dataclass(frozen=True)
class CarCondition:
    fuel_mass: float
    tire_age: int = 0
    tire_deg: float = 0.0
    position: int = 1
    lap: int = 1
    retired: bool = False

    def __post_init__(self):
        _require(self.fuel_mass >= 0, "condition.fuel_mass", "must be >= 0")
        _require(self.tire_age >= 0, "condition.tire_age", "must be >= 0")
        _require(self.position >= 1, "condition.position", "must be >= 1")
        _require(self.lap >= 1, "condition.lap", "must be >= 1")


def tire_penalty(cond: CarCondition, sector: SectorProfile, params: CarModelParams) -> float:
    """Logarithmic tire-wear time loss; zero on fresh tires."""
    return params.tire_log_coeff * sector.tire_factor * math.log1p(cond.tire_age)


def fuel_penalty(cond: CarCondition, sector: SectorProfile, params: CarModelParams) -> float:
    return params.fuel_sensitivity * cond.fuel_mass * sector.fuel_factor * sector.length_fraction


def sector_time(cond: CarCondition, sector: SectorProfile, params: CarModelParams,
                extra_penalty: float = 0.0) -> float:
    """Base time (with the car's pace offset) plus every penalty.

    ``extra_penalty`` carries traffic and start losses computed by the caller.
    """
    if extra_penalty < 0:
        raise ValueError(f"extra_penalty must be >= 0, got {extra_penalty}")
    base = sector.base_time + params.base_lap_offset * sector.length_fraction
    return base + tire_penalty(cond, sector, params) + fuel_penalty(cond, sector, params) + extra_penalty


def lap_time(sector_times: Sequence[float]) -> float:
    if len(sector_times) == 0:
        raise ValueError("lap_time needs at least one sector time")
    return math.fsum(sector_times)


def race_time(lap_times: Sequence[float]) -> float:
    if len(lap_times) == 0:
        raise ValueError("race_time needs at least one lap time")
    return math.fsum(lap_times)


def advance_condition(cond: CarCondition, params: CarModelParams) -> CarCondition:
    """Burn one lap of fuel and wear the tires by one lap."""
    if cond.retired:
        raise ValueError("cannot advance a retired car")
    out_of_fuel = cond.fuel_mass < params.fuel_per_lap - FUEL_EPS
    age = cond.tire_age + 1
    deg = age * params.tire_deg_per_lap
    return replace(
        cond,
        fuel_mass=max(cond.fuel_mass - params.fuel_per_lap, 0.0),
        tire_age=age,
        tire_deg=deg,
        lap=cond.lap + 1,
        retired=out_of_fuel or deg >= params.critical_tire_deg,
    )


@dataclass(frozen=True)
class LapTimer:
    """Precomputed per-sector constants so a whole lap is evaluated in one call.

    Produces exactly the values :func:`sector_time` would for each sector.
    """

    track: TrackConfig
    params: CarModelParams
    _base: tuple[float, ...] = field(init=False, repr=False)
    _tire: tuple[float, ...] = field(init=False, repr=False)
    _fuel: tuple[tuple[float, float], ...] = field(init=False, repr=False)

    def __post_init__(self):
        p = self.params
        object.__setattr__(self, "_base", tuple(
            s.base_time + p.base_lap_offset * s.length_fraction for s in self.track.sectors))
        object.__setattr__(self, "_tire", tuple(p.tire_log_coeff * s.tire_factor for s in self.track.sectors))
        object.__setattr__(self, "_fuel", tuple((s.fuel_factor, s.length_fraction) for s in self.track.sectors))

    def sector_times(self, fuel_mass: float, tire_age: int) -> list[float]:
        # same operation order as sector_time() so results are bit-identical
        wear = math.log1p(tire_age)
        load = self.params.fuel_sensitivity * fuel_mass
        return [b + t * wear + load * ff * lf for b, t, (ff, lf) in zip(self._base, self._tire, self._fuel)]
