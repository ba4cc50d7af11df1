"""Lap-by-lap race orchestration.

A race is a mutable state machine stepped one lap at a time. Within a lap
every sector is simulated for the whole field: Code60 roll, sector times,
start and pit substitutions, then overtake resolution in running order.
Pit decisions are taken before a lap starts; a car that pits drives its
in-lap with the pit-lane entry replacing the last sector, and the pit exit
plus service time replaces the first sector of the following lap.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Mapping, Optional, Sequence

import numpy as np

from .model import FUEL_EPS, CarCondition, CarModelParams, ConfigError, LapTimer, advance_condition
from .stochastic import (C60Event, RngStream, derive_seed, resolve_overtake, sample_start_delay,
                         Pass, Fail)

if TYPE_CHECKING:
    from .config import RaceConfig

REFUEL_OPTIONS = (4, 6, 8)

# stream ids mixed with the race seed; car streams are CAR_STREAM_BASE + car index
C60_STREAM = 0xC60
CAR_STREAM_BASE = 1000


@dataclass(frozen=True)
class PitRegulation:
    travel_in: float
    travel_out: float
    standing_schedule: tuple[tuple[int, float], ...]
    free_service_time: float
    refuel_rate: float

    def __post_init__(self):
        if not (self.travel_in > 0 and self.travel_out > 0):
            raise ConfigError("pit.travel_in", "travel_in and travel_out must be > 0")
        if not self.standing_schedule:
            raise ConfigError("pit.standing_schedule", "at least one entry required")
        laps = [lap for lap, _ in self.standing_schedule]
        times = [t for _, t in self.standing_schedule]
        if any(b <= a for a, b in zip(laps, laps[1:])):
            raise ConfigError("pit.standing_schedule", "from_lap values must be strictly increasing")
        if any(b > a for a, b in zip(times, times[1:])):
            raise ConfigError("pit.standing_schedule", "mandatory standing must not increase")
        if times[-1] != 0:
            raise ConfigError("pit.standing_schedule", "the final entry must waive standing time (0 s)")
        if any(t < 0 for t in times):
            raise ConfigError("pit.standing_schedule", "standing times must be >= 0")
        if self.free_service_time < 0:
            raise ConfigError("pit.free_service_time", "must be >= 0")
        if self.refuel_rate <= 0:
            raise ConfigError("pit.refuel_rate", "must be > 0")

    def mandatory_standing(self, lap: int) -> float:
        value = self.standing_schedule[0][1]
        for from_lap, t in self.standing_schedule:
            if lap >= from_lap:
                value = t
        return value

    @property
    def free_window_start(self) -> int:
        """First lap whose stop carries no mandatory standing time."""
        for from_lap, t in self.standing_schedule:
            if t == 0:
                return from_lap
        return self.standing_schedule[-1][0]


@dataclass(frozen=True)
class PitRequest:
    refuel_laps: int
    fit_new_tires: bool = True

    def __post_init__(self):
        if self.refuel_laps not in REFUEL_OPTIONS:
            raise ValueError(f"refuel_laps must be one of {REFUEL_OPTIONS}, got {self.refuel_laps}")


@dataclass(frozen=True)
class PitResult:
    last_sector_time: float
    next_first_sector_time: float
    condition: CarCondition
    fuel_added: float
    service_time: float


def apply_pit(cond: CarCondition, params: CarModelParams, request: PitRequest,
              regulation: PitRegulation, lap: int) -> PitResult:
    """Three-phase stop: travel in, service, travel out.

    ``cond`` is the car's condition at the moment it reaches its box, i.e.
    after the in-lap's fuel has been burnt.
    """
    if cond.retired:
        raise ValueError("a retired car cannot pit")
    wanted = request.refuel_laps * params.fuel_per_lap
    added = min(wanted, max(params.tank_capacity - cond.fuel_mass, 0.0))
    refuel_time = added / regulation.refuel_rate
    standing = regulation.mandatory_standing(lap)
    if standing > 0:
        service = max(standing, refuel_time)
    else:
        service = regulation.free_service_time + refuel_time
    new = replace(cond, fuel_mass=min(cond.fuel_mass + added, params.tank_capacity),
                  tire_age=0, tire_deg=0.0)
    return PitResult(regulation.travel_in, regulation.travel_out + service, new, added, service)


def planned_stop_laps(total_laps: int, regulation: PitRegulation, stops: int = 4) -> tuple[int, ...]:
    """Evenly split the race into ``stops + 1`` stints; the last stop goes in the free window."""
    if stops <= 0:
        return ()
    plan = [max(1, round(k * total_laps / (stops + 1))) for k in range(1, stops + 1)]
    window = regulation.free_window_start
    if window < total_laps:
        plan[-1] = max(plan[-1], window)
    return tuple(sorted(set(min(p, total_laps - 1) for p in plan)))


def _laps_of_fuel(fuel: float, burn: float) -> int:
    return int(math.floor(fuel / burn + FUEL_EPS)) if burn > 0 else 10 ** 9


def smallest_refuel(deficit_laps: float) -> int:
    for option in REFUEL_OPTIONS:
        if option >= deficit_laps:
            return option
    return REFUEL_OPTIONS[-1]


def opponent_decide(cond: CarCondition, lap: int, total_laps: int, regulation: PitRegulation,
                    params: CarModelParams, planned_stops: int = 4) -> Optional[PitRequest]:
    """Fixed four-stop strategy with a splash-and-dash into the free window.

    The car pits at each planned stop and whenever its fuel would not reach
    the next planned stop (or the flag). The refuel covers the following
    stint with the smallest available amount.
    """
    if cond.retired or lap >= total_laps:
        return None
    fuel_laps = _laps_of_fuel(cond.fuel_mass, params.fuel_per_lap)
    if fuel_laps < 1:
        return None  # cannot reach the pit lane
    plan = planned_stop_laps(total_laps, regulation, planned_stops)
    target = next((p for p in plan if p >= lap), total_laps)
    if lap != target and fuel_laps >= target - lap + 1:
        return None
    after_stop = next((p for p in plan if p > lap), total_laps)
    remaining = fuel_laps - 1
    deficit = (after_stop - lap) - remaining
    if deficit <= 0:
        return None if lap != target else PitRequest(REFUEL_OPTIONS[0])
    return PitRequest(smallest_refuel(deficit))


@dataclass
class Car:
    idx: int
    car_id: str
    grid_slot: int
    params: CarModelParams
    cond: CarCondition
    is_agent: bool = False
    cumulative_time: float = 0.0
    laps_completed: int = 0
    start_delay: Optional[float] = None
    pit_out_time: Optional[float] = None
    last_pit_lap: Optional[int] = None
    stops: int = 0
    lap_times: list = field(default_factory=list)
    timer: LapTimer = None
    traffic: Optional[np.ndarray] = None
    overtake_u: Optional[np.ndarray] = None
    rng: Optional[RngStream] = None

    @property
    def retired(self) -> bool:
        return self.cond.retired


@dataclass(frozen=True)
class Event:
    lap: int
    sector: int
    car_id: str
    kind: str
    time_delta: float


@dataclass
class RaceState:
    config: "RaceConfig"
    seed: int
    cars: list
    order: list
    lap: int = 1
    started: bool = False
    active_c60s: list = field(default_factory=list)
    c60_history: list = field(default_factory=list)
    event_log: list = field(default_factory=list)
    sector_log: Optional[list] = None
    lap_positions: list = field(default_factory=list)
    c60_u: Optional[np.ndarray] = None

    @property
    def total_laps(self) -> int:
        return self.config.laps

    @property
    def finished(self) -> bool:
        return self.lap > self.config.laps or not self.order

    @property
    def agent(self) -> Car:
        return self.cars[0]

    def standings(self) -> list:
        """Cars in classification order (running cars first)."""
        running = sorted(self.order, key=lambda i: (self.cars[i].cumulative_time, self.order.index(i)))
        out = [self.cars[i] for i in running]
        retired = [c for c in self.cars if c.retired]
        retired.sort(key=lambda c: (-c.laps_completed, c.cumulative_time, c.grid_slot))
        return out + retired

    def positions(self) -> dict:
        """car idx -> position (1-based), retired cars ranked last."""
        return {car.idx: pos for pos, car in enumerate(self.standings(), start=1)}

    def position_of(self, idx: int) -> int:
        return self.positions()[idx]

    def log(self, lap, sector, car_id, kind, delta):
        self.event_log.append(Event(lap, sector, car_id, kind, float(delta)))


def init_race(config: "RaceConfig", seed: int, n_opponents: Optional[int] = None,
              record_sectors: bool = False, all_opponents: bool = False) -> RaceState:
    """Create the field on the grid with its random streams.

    Car 0 is the agent unless ``all_opponents`` is set, in which case every car
    follows the opponent strategy (synthetic data emission).
    """
    if n_opponents is not None and n_opponents != config.n_opponents:
        if n_opponents < 0:
            raise ConfigError("race.n_opponents", "must be >= 0")
        config = config.with_opponents(n_opponents)
    n_cars = config.field_size
    laps, n_sec = config.laps, config.track.n_sectors
    slots = [s for s in range(1, n_cars + 1) if s != config.agent_grid_slot]
    cars = []
    for idx in range(n_cars):
        rng = RngStream(derive_seed(seed, CAR_STREAM_BASE + idx))
        is_agent = idx == 0 and not all_opponents
        slot = config.agent_grid_slot if idx == 0 else slots[idx - 1]
        # draw order per car stream is fixed: pace, traffic block, overtake block
        z_pace = float(rng.normal())
        if is_agent:
            offset = config.agent_pace_offset
        else:
            offset = max(config.opponent_pace_mean + config.opponent_pace_sd * z_pace, 0.0)
        params = replace(config.car, base_lap_offset=offset)
        traffic = None
        if config.traffic is not None:
            z = rng.normal(size=(laps, n_sec))
            mean = np.array([m for m, _, _ in config.traffic.per_sector])
            sd = np.array([s for _, s, _ in config.traffic.per_sector])
            lo = np.array([l for _, _, l in config.traffic.per_sector])
            traffic = np.maximum(mean + sd * z, lo)
        overtake_u = rng.uniform(size=(laps, n_sec)) if config.overtake is not None else None
        cond = CarCondition(fuel_mass=config.start_fuel, position=slot)
        car_id = "agent" if is_agent else f"car{idx:02d}"
        cars.append(Car(idx=idx, car_id=car_id, grid_slot=slot, params=params, cond=cond,
                        is_agent=is_agent, timer=LapTimer(config.track, params),
                        traffic=traffic, overtake_u=overtake_u, rng=rng))
    order = sorted(range(n_cars), key=lambda i: cars[i].grid_slot)
    c60_u = RngStream(derive_seed(seed, C60_STREAM)).uniform(size=(laps, n_sec))
    return RaceState(config=config, seed=seed, cars=cars, order=order, c60_u=c60_u,
                     sector_log=[] if record_sectors else None)


def simulate_start(state: RaceState) -> RaceState:
    """Draw every car's time from the green flag to the end of sector 1."""
    if state.started or state.lap != 1:
        raise ValueError("the start can only be simulated once, before lap 1")
    for car in state.cars:
        car.start_delay = sample_start_delay(car.grid_slot, state.config.start, car.rng)
        state.log(1, 1, car.car_id, "start", car.start_delay)
    state.started = True
    return state


def _c60_active(state: RaceState, lap: int, sector: int) -> Optional[C60Event]:
    for ev in state.active_c60s:
        if ev.covers(lap, sector):
            return ev
    return None


def step_lap(state: RaceState, decisions: Optional[Mapping[int, Optional[PitRequest]]] = None) -> RaceState:
    """Simulate one lap for the whole field.

    ``decisions`` maps car index to a pit request (or None). Opponents that
    are missing from the map follow :func:`opponent_decide`; a missing agent
    stays out.
    """
    if state.finished:
        raise ValueError("race already finished")
    if not state.started:
        simulate_start(state)
    cfg = state.config
    lap, n_sec = state.lap, cfg.track.n_sectors
    sectors = cfg.track.sectors
    cars = state.cars
    decisions = dict(decisions or {})

    pitting = {}
    base_times = {}
    for i in list(state.order):
        car = cars[i]
        if i in decisions:
            req = decisions[i]
        elif car.is_agent:
            req = None
        else:
            req = opponent_decide(car.cond, lap, cfg.laps, cfg.regulation, car.params, cfg.planned_stops)
        if car.cond.fuel_mass < car.params.fuel_per_lap - FUEL_EPS:
            # cannot complete the lap, not even to reach the pit lane
            state.order.remove(i)
            car.cond = replace(car.cond, retired=True)
            state.log(lap, 1, car.car_id, "retire_fuel", 0.0)
            continue
        if req is not None and lap < cfg.laps:
            pitting[i] = req
        base_times[i] = car.timer.sector_times(car.cond.fuel_mass, car.cond.tire_age)

    lap_time = {i: 0.0 for i in state.order}
    for s in range(1, n_sec + 1):
        sector = sectors[s - 1]
        # Code60: expire old events, maybe declare a new one in this sector
        state.active_c60s = [ev for ev in state.active_c60s if ev.end_lap >= lap]
        c60 = _c60_active(state, lap, s)
        if c60 is None and state.c60_u[lap - 1, s - 1] < cfg.c60.per_sector_prob[s - 1]:
            c60 = C60Event(start_lap=lap, sector=s, duration_laps=cfg.c60.min_duration_laps)
            state.active_c60s.append(c60)
            state.c60_history.append(c60)
            state.log(lap, s, "", "c60", cfg.c60.sector_time(sector.length_km))
        c60_time = cfg.c60.sector_time(sector.length_km) if c60 is not None else None

        exit_time = {}
        duration = {}
        special = set()
        for i in state.order:
            car = cars[i]
            if lap == 1 and s == 1:
                t = car.start_delay
                special.add(i)
            elif s == 1 and car.pit_out_time is not None:
                t = car.pit_out_time
                special.add(i)
            elif s == n_sec and i in pitting:
                t = cfg.regulation.travel_in
                special.add(i)
            else:
                t = base_times[i][s - 1]
                if car.traffic is not None and c60_time is None:
                    t = t + float(car.traffic[lap - 1, s - 1])
            if c60_time is not None:
                t = max(t, c60_time) if i in special else c60_time
            duration[i] = t
            exit_time[i] = car.cumulative_time + t

        if lap == 1 and s == 1:
            new_order = sorted(state.order, key=lambda i: (exit_time[i], cars[i].grid_slot))
        elif c60_time is not None or cfg.overtake is None:
            rank = {i: k for k, i in enumerate(state.order)}
            new_order = sorted(state.order, key=lambda i: (exit_time[i], rank[i]))
        else:
            new_order = _resolve_overtakes(state, lap, s, exit_time, special)

        for i in state.order:
            car = cars[i]
            t = duration[i]
            if exit_time[i] != car.cumulative_time + t:
                # moved by an overtake resolution
                t = exit_time[i] - car.cumulative_time
            lap_time[i] += t
            car.cumulative_time = exit_time[i]
            if state.sector_log is not None:
                state.sector_log.append((lap, s, i, t))
        state.order = new_order

    # end of lap: burn fuel, wear tires, service pitting cars
    for i in list(state.order):
        car = cars[i]
        car.lap_times.append(lap_time[i])
        car.laps_completed = lap
        car.pit_out_time = None
        cond = advance_condition(car.cond, car.params)
        if i in pitting:
            result = apply_pit(replace(cond, retired=False), car.params, pitting[i], cfg.regulation, lap)
            cond = result.condition
            car.pit_out_time = result.next_first_sector_time
            car.last_pit_lap = lap
            car.stops += 1
            state.log(lap, n_sec, car.car_id, "pit_in", result.last_sector_time)
            state.log(lap + 1, 1, car.car_id, "pit_out", result.service_time)
        car.cond = cond
        if cond.retired:
            state.order.remove(i)
            state.log(lap, n_sec, car.car_id, "retire_tires", 0.0)
    positions = state.positions()
    for car in cars:
        car.cond = replace(car.cond, position=positions[car.idx])
    state.lap_positions.append([positions[c.idx] for c in cars])
    state.lap += 1
    return state


def _resolve_overtakes(state: RaceState, lap: int, s: int, exit_time: dict, special: set) -> list:
    """Front-to-back sweep: each running car gets one go at the car directly ahead."""
    model = state.config.overtake
    cars = state.cars
    entry = {i: cars[i].cumulative_time for i in state.order}
    racing = [i for i in state.order if i not in special]
    order: list = []
    for i in racing:
        if order:
            ahead = order[-1]
            if exit_time[i] < exit_time[ahead]:
                gap = max(entry[i] - entry[ahead], 0.0)
                outcome = resolve_overtake(gap, s, model, float(cars[i].overtake_u[lap - 1, s - 1]))
                if isinstance(outcome, Pass):
                    state.log(lap, s, cars[i].car_id, "pass", gap)
                    order.insert(len(order) - 1, i)
                    if len(order) >= 2:
                        # passed one car; cannot jump the next one without another attempt
                        front = order[-3] if len(order) >= 3 else None
                        if front is not None:
                            exit_time[i] = max(exit_time[i], exit_time[front] + model.min_gap)
                    continue
                if isinstance(outcome, Fail):
                    state.log(lap, s, cars[i].car_id, "fail", outcome.penalty)
                    exit_time[i] = exit_time[i] + outcome.penalty
            exit_time[i] = max(exit_time[i], exit_time[ahead] + model.min_gap)
        order.append(i)
    # pitting and starting cars do not interact; slot them in by time
    rank = {i: k for k, i in enumerate(order)}
    pit_rank = {i: k for k, i in enumerate(state.order)}
    everyone = order + [i for i in state.order if i in special]
    return sorted(everyone, key=lambda i: (exit_time[i], 0 if i in rank else 1, rank.get(i, pit_rank[i])))


def classify(state: RaceState) -> list:
    """Final standings as a list of dicts."""
    out = []
    for pos, car in enumerate(state.standings(), start=1):
        out.append({
            "position": pos,
            "car_id": car.car_id,
            "grid_slot": car.grid_slot,
            "laps_completed": car.laps_completed,
            "race_time_s": round(car.cumulative_time, 6),
            "retired": car.retired,
            "stops": car.stops,
            "pace_offset_s": round(car.params.base_lap_offset, 6),
        })
    return out


def event_log_csv(state: RaceState) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["lap", "sector", "car_id", "event", "time_delta_s"])
    for ev in state.event_log:
        writer.writerow([ev.lap, ev.sector, ev.car_id, ev.kind, f"{ev.time_delta:.6f}"])
    return buf.getvalue()


def lap_chart_csv(state: RaceState) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["lap"] + [c.car_id for c in state.cars])
    for lap, row in enumerate(state.lap_positions, start=1):
        writer.writerow([lap] + row)
    return buf.getvalue()


def standings_json(state: RaceState) -> str:
    return json.dumps({"seed": state.seed, "laps": state.config.laps, "standings": classify(state)},
                      indent=2, sort_keys=False) + "\n"


def run_race(config: "RaceConfig", seed: int, agent_actions: Optional[Sequence[int]] = None,
             record_sectors: bool = False, all_opponents: bool = False) -> RaceState:
    """Run a complete race with a fixed agent action list (0 = stay out)."""
    state = init_race(config, seed, record_sectors=record_sectors, all_opponents=all_opponents)
    simulate_start(state)
    while not state.finished:
        decisions = {}
        if not all_opponents:
            a = agent_actions[state.lap - 1] if agent_actions is not None and state.lap <= len(agent_actions) else 0
            decisions[0] = action_to_request(a)
        step_lap(state, decisions)
    return state


def action_to_request(action: int) -> Optional[PitRequest]:
    action = int(action)
    if action == 0:
        return None
    if 1 <= action <= len(REFUEL_OPTIONS):
        return PitRequest(REFUEL_OPTIONS[action - 1])
    raise ValueError(f"unknown action {action}")
