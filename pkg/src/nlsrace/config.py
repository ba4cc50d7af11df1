"""Flat sectioned key-value configuration.

Grammar, one entry per line::

    section.key = value     # trailing comments allowed

Values are ints, floats, ``true``/``false``, comma separated lists, or
``a:b`` pairs (used for the pit standing-time schedule). Anything else is
kept as a string. Files are UTF-8.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from .engine import PitRegulation
from .env import RewardConfig
from .model import CarModelParams, ConfigError, TrackConfig
from .stochastic import C60Model, OvertakeModel, StartModel, TrafficModel, per_sector

PROFILES = ("default", "deterministic", "reduced")


def _scalar(text: str) -> Any:
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _value(text: str) -> Any:
    if "," in text:
        return [_value(part.strip()) for part in text.split(",") if part.strip()]
    if ":" in text:
        a, b = text.split(":", 1)
        return (_scalar(a.strip()), _scalar(b.strip()))
    return _scalar(text)


def parse_config_text(text: str, source: str = "<string>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'section.key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key or not value:
            raise ConfigError(f"{source}:{lineno}", f"malformed entry {raw.strip()!r}")
        out[key] = _value(value)
    return out


def format_config(flat: Mapping[str, Any]) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return f"{fmt(v[0])}:{fmt(v[1])}"
        if isinstance(v, list):
            return ", ".join(fmt(x) for x in v)
        return repr(v) if isinstance(v, float) else str(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in flat.items())


def _builtin(name: str) -> str:
    return resources.files("nlsrace").joinpath("data", f"{name}.cfg").read_text(encoding="utf-8")


def load_flat(path: Union[str, Path, None] = None, profile: str = "default",
              overrides: Optional[Mapping[str, Any]] = None) -> dict[str, Any]:
    """Default document, then the profile layer, then ``path``, then overrides."""
    if profile not in PROFILES:
        raise ConfigError("profile", f"unknown profile {profile!r}; choose from {PROFILES}")
    flat = parse_config_text(_builtin("default"), "default.cfg")
    if profile != "default":
        flat.update(parse_config_text(_builtin(profile), f"{profile}.cfg"))
    if path is not None:
        p = Path(path)
        flat.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    if overrides:
        flat.update(overrides)
    return flat


def _list(flat, key):
    v = flat[key]
    return v if isinstance(v, list) else [v]


def _schedule(flat, key):
    v = flat[key]
    items = v if isinstance(v, list) else [v]
    out = []
    for item in items:
        if not isinstance(item, tuple):
            raise ConfigError(key, f"expected from_lap:seconds pairs, got {item!r}")
        out.append((int(item[0]), float(item[1])))
    return tuple(out)


@dataclass(frozen=True)
class RaceConfig:
    """Everything needed to stage one race."""

    track: TrackConfig
    car: CarModelParams
    regulation: PitRegulation
    start: StartModel
    traffic: Optional[TrafficModel]
    c60: C60Model
    overtake: Optional[OvertakeModel]
    reward: RewardConfig = field(default_factory=RewardConfig)
    laps: int = 25
    n_opponents: int = 15
    agent_grid_slot: int = 1
    agent_pace_offset: float = 0.0
    start_fuel_laps: float = 8.0
    opponent_pace_mean: float = 0.0
    opponent_pace_sd: float = 0.0
    planned_stops: int = 4
    obs_max_tire_deg: float = 100.0
    seed: int = 0
    flat: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.laps < 1:
            raise ConfigError("race.laps", "must be >= 1")
        if self.n_opponents < 0:
            raise ConfigError("race.n_opponents", "must be >= 0")
        if not 1 <= self.agent_grid_slot <= self.field_size:
            raise ConfigError("race.agent_grid_slot", f"must be in 1..{self.field_size}")
        if self.start.n_slots < self.field_size:
            raise ConfigError("start.mu", f"start model covers {self.start.n_slots} slots, field has {self.field_size}")
        n = self.track.n_sectors
        for key, model in (("traffic", self.traffic), ("overtake", self.overtake)):
            if model is not None and len(model.per_sector) != n:
                raise ConfigError(f"{key}.per_sector", f"expected {n} sectors")
        if len(self.c60.per_sector_prob) != n:
            raise ConfigError("c60.prob", f"expected {n} sectors")
        if self.start_fuel_laps * self.car.fuel_per_lap > self.car.tank_capacity + 1e-9:
            raise ConfigError("race.start_fuel_laps", "starting fuel exceeds tank capacity")
        if self.planned_stops < 0:
            raise ConfigError("opponents.planned_stops", "must be >= 0")

    @property
    def field_size(self) -> int:
        return self.n_opponents + 1

    @property
    def start_fuel(self) -> float:
        return self.start_fuel_laps * self.car.fuel_per_lap

    @property
    def is_deterministic(self) -> bool:
        return (all(s == 0 for _, s in self.start.per_grid_slot)
                and (self.traffic is None or all(sd == 0 for _, sd, _ in self.traffic.per_sector))
                and all(p == 0 for p in self.c60.per_sector_prob)
                and self.overtake is None
                and self.opponent_pace_sd == 0)

    def with_opponents(self, n_opponents: int) -> "RaceConfig":
        """Resize the field, extending the start model along its last step."""
        slots = list(self.start.per_grid_slot)
        step = slots[-1][0] - slots[-2][0] if len(slots) > 1 else 1.0
        while len(slots) < n_opponents + 1:
            slots.append((slots[-1][0] + step, slots[-1][1]))
        grid = min(self.agent_grid_slot, n_opponents + 1)
        return dataclasses.replace(self, n_opponents=n_opponents, agent_grid_slot=grid,
                                   start=StartModel(tuple(slots[: max(n_opponents + 1, 1)])))

    def replace(self, **changes) -> "RaceConfig":
        return dataclasses.replace(self, **changes)


def build_config(flat: Mapping[str, Any]) -> RaceConfig:
    try:
        track = TrackConfig.from_lists(
            _list(flat, "track.sector_base_times"), _list(flat, "track.sector_lengths_km"),
            _list(flat, "track.tire_factors"), _list(flat, "track.fuel_factors"),
            name=str(flat.get("track.name", "track")))
        n = track.n_sectors
        car = CarModelParams(
            fuel_sensitivity=float(flat["car.fuel_sensitivity"]),
            fuel_per_lap=float(flat["car.fuel_per_lap"]),
            tank_capacity=float(flat["car.tank_capacity"]),
            tire_log_coeff=float(flat["car.tire_log_coeff"]),
            tire_deg_per_lap=float(flat["car.tire_deg_per_lap"]),
            critical_tire_deg=float(flat["car.critical_tire_deg"]),
        )
        regulation = PitRegulation(
            travel_in=float(flat["pit.travel_in"]), travel_out=float(flat["pit.travel_out"]),
            standing_schedule=_schedule(flat, "pit.standing_schedule"),
            free_service_time=float(flat["pit.free_service_time"]),
            refuel_rate=float(flat["pit.refuel_rate"]))
        n_opp = int(flat["race.n_opponents"])
        if "start.per_slot_mu" in flat:
            mus = _list(flat, "start.per_slot_mu")
            sds = per_sector(_list(flat, "start.per_slot_sigma"), len(mus), "start.per_slot_sigma")
            start = StartModel(tuple((float(m), float(s)) for m, s in zip(mus, sds)))
        else:
            start = StartModel.linear(n_opp + 1, float(flat["start.mu_first"]),
                                      float(flat["start.mu_step"]), float(flat["start.sigma"]))
        traffic = TrafficModel(tuple(zip(
            per_sector(_list(flat, "traffic.mean"), n, "traffic.mean"),
            per_sector(_list(flat, "traffic.stddev"), n, "traffic.stddev"),
            per_sector(_list(flat, "traffic.min"), n, "traffic.min"))))
        c60 = C60Model(per_sector(_list(flat, "c60.prob"), n, "c60.prob"),
                       min_duration_laps=int(flat["c60.min_duration_laps"]),
                       speed_limit_kmh=float(flat["c60.speed_limit_kmh"]))
        overtake = None
        if flat.get("overtake.enabled", True):
            overtake = OvertakeModel(tuple(zip(
                per_sector(_list(flat, "overtake.delta_threshold"), n, "overtake.delta_threshold"),
                per_sector(_list(flat, "overtake.success_prob"), n, "overtake.success_prob"),
                per_sector(_list(flat, "overtake.fail_penalty"), n, "overtake.fail_penalty"))),
                min_gap=float(flat["overtake.min_gap"]))
        reward = RewardConfig(
            good_position_threshold=int(flat["reward.good_position_threshold"]),
            position_reward=float(flat["reward.position_reward"]),
            tire_threshold=float(flat["reward.tire_threshold"]),
            tire_penalty_reward=float(flat["reward.tire_penalty_reward"]),
            retirement_reward=float(flat["reward.retirement_reward"]),
            terminal_max=float(flat["reward.terminal_max"]),
            progress_weight=float(flat.get("reward.progress_weight", 0.0)),
            leader_delta_weight=float(flat.get("reward.leader_delta_weight", 0.0)),
            fuel_level_weight=float(flat.get("reward.fuel_level_weight", 0.0)))
        return RaceConfig(
            track=track, car=car, regulation=regulation, start=start,
            traffic=None if traffic.is_null else traffic, c60=c60, overtake=overtake, reward=reward,
            laps=int(flat["race.laps"]), n_opponents=n_opp,
            agent_grid_slot=int(flat["race.agent_grid_slot"]),
            agent_pace_offset=float(flat["race.agent_pace_offset"]),
            start_fuel_laps=float(flat["race.start_fuel_laps"]),
            opponent_pace_mean=float(flat["opponents.pace_mean"]),
            opponent_pace_sd=float(flat["opponents.pace_sd"]),
            planned_stops=int(flat["opponents.planned_stops"]),
            obs_max_tire_deg=float(flat["observation.max_tire_deg"]),
            seed=int(flat.get("race.seed", 0)),
            flat=dict(flat))
    except KeyError as exc:
        raise ConfigError(str(exc.args[0]), "missing required key") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("config", str(exc)) from None


def load_config(path: Union[str, Path, None] = None, profile: str = "default",
                overrides: Optional[Mapping[str, Any]] = None) -> RaceConfig:
    return build_config(load_flat(path, profile, overrides))
