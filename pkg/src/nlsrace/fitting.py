"""Timing-data ingestion, Code60/traffic labelling, parameter fitting and a
synthetic data generator that runs the race engine in emission mode.

Records are sector times keyed by (race, car, lap, sector). Fitting works in
stages:

1. label every record by its ratio to the sector median (Normal, Traffic,
   C60) and mark a (race, lap, sector) cell as Code60 when most of its
   records are C60-labelled;
2. find pit stops from pit-out sector-1 times that stand out from the car's
   usual sector-1 time, which also splits each car's race into stints;
3. rebuild the running order at every sector boundary:
   records that start within passing range are set aside, and records that
   exit exactly the minimum gap behind another car are held-up upper bounds;
4. regress tire and fuel effects out of the remaining records with a level
   per (car, sector), treating held-up records as censored;
5. measure traffic over each car's base line (track base times plus its pace
   offset) with a censored Gaussian, Code60 onset rates from runs of Code60
   cells, start Gaussians from lap-1 sector-1 times, and overtake gates from
   order swaps. Start means and Code60 rates are pooled across slots or
   sectors when a homogeneity test does not reject.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence, Union

import numpy as np
from scipy import optimize, stats
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .engine import run_race, smallest_refuel
from .stochastic import C60Model, OvertakeModel, StartModel, TrafficModel, derive_seed

if TYPE_CHECKING:
    from .config import RaceConfig

log = logging.getLogger(__name__)

HEADER = ("race_id", "car_id", "class", "grid_slot", "lap", "sector", "sector_time_s")
NORMAL, TRAFFIC, C60 = "Normal", "Traffic", "C60"
MIN_CLASSIFY_RECORDS = 10


class TimingParseError(ValueError):
    def __init__(self, path, line: int, column: Optional[str], message: str):
        self.path, self.line, self.column = str(path), line, column
        where = f"{self.path}:{line}" + (f" column '{column}'" if column else "")
        super().__init__(f"{where}: {message}")


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class TimingRecord:
    race_id: str
    car_id: str
    class_tag: str
    grid_slot: int
    lap: int
    sector: int
    sector_time: float


class TimingDataset:
    """Immutable column store of sector-time records."""

    def __init__(self, records: Sequence[TimingRecord], skipped_class: int = 0, source: str = "<memory>"):
        self.source = source
        self.skipped_class = int(skipped_class)
        seen = {}
        for k, r in enumerate(records):
            if not r.sector_time > 0:
                raise ValueError(f"record {k}: sector_time must be > 0, got {r.sector_time}")
            key = (r.race_id, r.car_id, r.lap, r.sector)
            if key in seen:
                raise ValueError(f"record {k}: duplicate (race, car, lap, sector) {key}, first seen at record {seen[key]}")
            seen[key] = k
        n = len(records)
        self.race_id = np.array([r.race_id for r in records], dtype=object)
        self.car_id = np.array([r.car_id for r in records], dtype=object)
        self.class_tag = np.array([r.class_tag for r in records], dtype=object)
        self.grid_slot = np.fromiter((r.grid_slot for r in records), dtype=np.int64, count=n)
        self.lap = np.fromiter((r.lap for r in records), dtype=np.int64, count=n)
        self.sector = np.fromiter((r.sector for r in records), dtype=np.int64, count=n)
        self.sector_time = np.fromiter((r.sector_time for r in records), dtype=float, count=n)
        for a in (self.grid_slot, self.lap, self.sector, self.sector_time):
            a.setflags(write=False)

    def __len__(self) -> int:
        return len(self.sector_time)

    @property
    def records(self) -> list:
        return [TimingRecord(*row) for row in zip(self.race_id, self.car_id, self.class_tag, self.grid_slot.tolist(),
                                                  self.lap.tolist(), self.sector.tolist(), self.sector_time.tolist())]

    @property
    def n_sectors(self) -> int:
        return int(self.sector.max()) if len(self) else 0

    @property
    def races(self) -> list:
        return sorted(set(self.race_id.tolist()))

    def to_csv(self, path: Union[str, Path, None] = None) -> str:
        lines = [",".join(HEADER)]
        for r in self.records:
            lines.append(f"{r.race_id},{r.car_id},{r.class_tag},{r.grid_slot},{r.lap},{r.sector},{r.sector_time!r}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def parse_timing_csv(path: Union[str, Path], class_filter: Optional[str] = "SP9") -> TimingDataset:
    """Read the timing CSV; malformed rows raise with line and column.

    Rows of another class are skipped and counted when ``class_filter`` is set.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"timing file not found: {path}")
    records, seen, skipped = [], {}, 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != HEADER:
            raise TimingParseError(path, 1, None, f"expected header {','.join(HEADER)}, got {','.join(header or [])!r}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(HEADER):
                raise TimingParseError(path, line, None, f"expected {len(HEADER)} fields, got {len(row)}")
            race, car, cls, slot, lap, sector, t = (c.strip() for c in row)
            for name, value in (("race_id", race), ("car_id", car), ("class", cls)):
                if not value:
                    raise TimingParseError(path, line, name, "empty value")
            ints = {}
            for name, value in (("grid_slot", slot), ("lap", lap), ("sector", sector)):
                try:
                    ints[name] = int(value)
                except ValueError:
                    raise TimingParseError(path, line, name, f"not an integer: {value!r}") from None
                if ints[name] < 1:
                    raise TimingParseError(path, line, name, f"must be >= 1, got {ints[name]}")
            try:
                seconds = float(t)
            except ValueError:
                raise TimingParseError(path, line, "sector_time_s", f"not a number: {t!r}") from None
            if not (math.isfinite(seconds) and seconds > 0):
                raise TimingParseError(path, line, "sector_time_s", f"must be a positive finite time, got {t!r}")
            if class_filter is not None and cls != class_filter:
                skipped += 1
                continue
            key = (race, car, ints["lap"], ints["sector"])
            if key in seen:
                raise TimingParseError(path, line, None, f"duplicate record {key} (first at line {seen[key]})")
            seen[key] = line
            records.append(TimingRecord(race, car, cls, ints["grid_slot"], ints["lap"], ints["sector"], seconds))
    if skipped:
        log.warning("%s: skipped %d rows not in class %s", path, skipped, class_filter)
    return TimingDataset(records, skipped_class=skipped, source=str(path))


def classify_c60(ds: TimingDataset, sector: int, c60_ratio: float = 1.8, traffic_ratio: float = 1.02) -> np.ndarray:
    """Labels for the records of one sector, in dataset order."""
    if not 1 < traffic_ratio <= c60_ratio:
        raise ValueError("need 1 < traffic_ratio <= c60_ratio")
    times = ds.sector_time[ds.sector == sector]
    if len(times) < MIN_CLASSIFY_RECORDS:
        raise InsufficientDataError(f"sector {sector}: {len(times)} records, need >= {MIN_CLASSIFY_RECORDS}")
    return _labels(times, c60_ratio, traffic_ratio)


def _labels(times: np.ndarray, c60_ratio: float, traffic_ratio: float) -> np.ndarray:
    med = np.median(times)
    labels = np.full(len(times), NORMAL, dtype=object)
    labels[times > traffic_ratio * med] = TRAFFIC
    labels[times > c60_ratio * med] = C60
    return labels


def label_all(ds: TimingDataset, c60_ratio: float = 1.8, traffic_ratio: float = 1.02) -> np.ndarray:
    labels = np.empty(len(ds), dtype=object)
    for s in range(1, ds.n_sectors + 1):
        mask = ds.sector == s
        labels[mask] = classify_c60(ds, s, c60_ratio, traffic_ratio)
    return labels


@dataclass
class FittedParams:
    """Stochastic and empirical model parameters recovered from timing data."""

    start: tuple                      # (mu, sigma) per grid slot, slot 1 first
    traffic: tuple                    # (mean, stddev, min) per sector
    c60_prob: tuple                   # per sector
    c60_duration_laps: int
    overtake: tuple                   # (delta_threshold, success_prob) per sector
    tire_log_coeff: float
    fuel_sensitivity: float
    samples: dict = field(default_factory=dict)
    fallbacks: list = field(default_factory=list)

    @classmethod
    def from_config(cls, config: "RaceConfig") -> "FittedParams":
        n = config.track.n_sectors
        traffic = config.traffic.per_sector if config.traffic is not None else ((0.0, 0.0, 0.0),) * n
        if config.overtake is not None:
            overtake = tuple((d, p) for d, p, _ in config.overtake.per_sector)
        else:
            overtake = ((0.0, 0.0),) * n
        return cls(start=tuple(config.start.per_grid_slot), traffic=tuple(traffic),
                   c60_prob=tuple(config.c60.per_sector_prob), c60_duration_laps=config.c60.min_duration_laps,
                   overtake=overtake, tire_log_coeff=config.car.tire_log_coeff,
                   fuel_sensitivity=config.car.fuel_sensitivity)

    def apply(self, config: "RaceConfig") -> "RaceConfig":
        """Config with these parameters substituted; fail penalties and gaps stay."""
        n = config.track.n_sectors
        for name, values in (("traffic", self.traffic), ("c60_prob", self.c60_prob), ("overtake", self.overtake)):
            if len(values) != n:
                raise ValueError(f"{name}: {len(values)} sectors given, track has {n}")
        start = StartModel(tuple((float(m), float(s)) for m, s in self.start))
        traffic = TrafficModel(tuple((float(m), float(s), float(lo)) for m, s, lo in self.traffic))
        c60 = C60Model(tuple(float(p) for p in self.c60_prob), min_duration_laps=int(self.c60_duration_laps),
                       speed_limit_kmh=config.c60.speed_limit_kmh)
        overtake = config.overtake
        if overtake is not None:
            overtake = OvertakeModel(tuple((float(d), float(p), pen) for (d, p), (_, _, pen)
                                           in zip(self.overtake, overtake.per_sector)), min_gap=overtake.min_gap)
        car = replace(config.car, tire_log_coeff=float(self.tire_log_coeff),
                      fuel_sensitivity=float(self.fuel_sensitivity))
        cfg = replace(config, start=start, traffic=None if traffic.is_null else traffic, c60=c60,
                      overtake=overtake, car=car)
        if start.n_slots < cfg.field_size:
            cfg = cfg.with_opponents(cfg.n_opponents)
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("start", "traffic", "overtake"):
            d[key] = [list(row) for row in d[key]]
        d["c60_prob"] = list(d["c60_prob"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "FittedParams":
        try:
            return cls(start=tuple(tuple(r) for r in d["start"]), traffic=tuple(tuple(r) for r in d["traffic"]),
                       c60_prob=tuple(d["c60_prob"]), c60_duration_laps=int(d["c60_duration_laps"]),
                       overtake=tuple(tuple(r) for r in d["overtake"]), tire_log_coeff=float(d["tire_log_coeff"]),
                       fuel_sensitivity=float(d["fuel_sensitivity"]), samples=dict(d.get("samples", {})),
                       fallbacks=list(d.get("fallbacks", [])))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"parameter file is missing or has a malformed field: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "FittedParams":
        return cls.from_dict(json.loads(text))

    def report(self) -> str:
        lines = ["parameter fit report", ""]
        lines.append("samples:")
        for key in sorted(self.samples):
            lines.append(f"  {key}: {self.samples[key]}")
        lines.append("")
        if self.fallbacks:
            lines.append("fallbacks to configured defaults (fewer samples than required):")
            lines.extend(f"  {f}" for f in self.fallbacks)
        else:
            lines.append("fallbacks: none")
        lines.append("")
        for s, ((m, sd, lo), p, (d, q)) in enumerate(zip(self.traffic, self.c60_prob, self.overtake), start=1):
            lines.append(f"sector {s}: traffic mean {m:.3f} sd {sd:.3f} min {lo:.3f}; c60 prob {p:.4f}; "
                         f"overtake delta {d:.3f} prob {q:.3f}")
        lines.append(f"c60 duration laps: {self.c60_duration_laps}")
        lines.append(f"tire_log_coeff: {self.tire_log_coeff:.4f}")
        lines.append(f"fuel_sensitivity: {self.fuel_sensitivity:.5f}")
        for slot, (m, sd) in enumerate(self.start, start=1):
            lines.append(f"start slot {slot}: mu {m:.3f} sigma {sd:.3f}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class FitOptions:
    c60_ratio: float = 1.8
    traffic_ratio: float = 1.02
    pit_excess: float = 25.0
    pit_in_excess: float = 10.0
    atom_tolerance: float = 0.25
    min_samples: int = 5
    overtake_gate: str = "mean"
    pool_alpha: float = 0.01

    @classmethod
    def from_flat(cls, flat) -> "FitOptions":
        return cls(c60_ratio=float(flat.get("fit.c60_ratio", 1.8)),
                   traffic_ratio=float(flat.get("fit.traffic_ratio", 1.02)),
                   pit_excess=float(flat.get("fit.pit_excess", 25.0)),
                   pit_in_excess=float(flat.get("fit.pit_in_excess", 10.0)),
                   atom_tolerance=float(flat.get("fit.atom_tolerance", 0.25)),
                   min_samples=int(flat.get("fit.min_samples", 5)),
                   overtake_gate=str(flat.get("fit.overtake_gate", "mean")),
                   pool_alpha=float(flat.get("fit.pool_alpha", 0.01)))


def _group_codes(*cols) -> tuple[np.ndarray, int]:
    keys = np.rec.fromarrays([np.asarray(c) for c in cols])
    _, inverse = np.unique(keys, return_inverse=True)
    inverse = inverse.ravel()
    return inverse, int(inverse.max()) + 1 if len(inverse) else 0


def _vote(cell: np.ndarray, n_cells: int, is_c60: np.ndarray, voters: np.ndarray):
    votes = np.bincount(cell[voters], weights=is_c60[voters].astype(float), minlength=n_cells)
    counts = np.bincount(cell[voters], minlength=n_cells)
    frac = np.divide(votes, counts, out=np.zeros(n_cells), where=counts > 0)
    return frac > 0.5, counts == 0


def _cells_and_pits(ds, labels, car, n_cars, opts, c60_s1=None):
    """Code60 cells and pit stops, resolved together.

    Pit-in times stay below the Code60 ratio, so cells of sectors 2..n are
    voted on every record. A stop at the end of lap L shows as an excess in
    the last sector of L and in sector 1 of L+1 over the car's median times.
    When the in-lap's last sector sits in a Code60 cell the two causes cannot
    be told apart from sector 1 alone; such records are ambiguous and left out
    of the sector-1 vote, then settled by that vote where possible, or by
    ``c60_s1`` (the sector-1 time at the speed limit) when nobody else voted.
    A sector-1 cell without voters is unknown.
    Returns per-record flags (c60_cell, unknown_cell, pit_in, pit_out, ambiguous).
    """
    n_sec = ds.n_sectors
    cell, n_cells = _group_codes(ds.race_id.astype(str), ds.lap, ds.sector)
    is_c60 = labels == C60
    s1 = ds.sector == 1
    c60_cells, _ = _vote(cell, n_cells, is_c60, ~s1)
    c60_rec = c60_cells[cell]

    pit_in = np.zeros(len(ds), dtype=bool)
    pit_out = np.zeros(len(ds), dtype=bool)
    ambiguous = np.zeros(len(ds), dtype=bool)
    held = []
    for c in range(n_cars):
        mine = np.flatnonzero(car == c)
        first = mine[ds.sector[mine] == 1]
        last = mine[ds.sector[mine] == n_sec]
        if len(first) == 0 or len(last) == 0:
            continue
        later = first[ds.lap[first] >= 2]
        med_first = np.median(ds.sector_time[later]) if len(later) else np.inf
        calm = last[~c60_rec[last]]
        med_last = np.median(ds.sector_time[calm if len(calm) else last])
        last_by_lap = {int(ds.lap[k]): k for k in last}
        for k in later:
            prev = last_by_lap.get(int(ds.lap[k]) - 1)
            if prev is None or not ds.sector_time[k] > med_first + opts.pit_excess:
                continue
            if c60_rec[prev]:
                ambiguous[k] = True
                held.append((k, prev))
            elif ds.sector_time[prev] > med_last + opts.pit_in_excess:
                pit_in[prev] = True
                pit_out[k] = True

    s1_cells, s1_empty = _vote(cell, n_cells, is_c60, s1 & ~pit_out & ~ambiguous)
    # an ambiguous excess is a stop if the cell ran normally for everyone else,
    # or if it outlasts the cell's Code60 time by a pit margin
    c60_time = {}
    for k in np.flatnonzero(s1 & is_c60 & ~pit_out & ~ambiguous):
        c60_time.setdefault(int(cell[k]), []).append(ds.sector_time[k])
    for k, prev in held:
        ck = int(cell[k])
        t = ds.sector_time[k]
        if s1_empty[ck]:
            stop = c60_s1 is not None and abs(t - c60_s1) > opts.atom_tolerance
        else:
            stop = not s1_cells[ck] or t > np.median(c60_time[ck]) + opts.pit_excess
        if stop:
            ambiguous[k] = False
            pit_in[prev] = True
            pit_out[k] = True
    c60_rec = np.where(s1, s1_cells[cell], c60_rec)
    unknown = s1 & s1_empty[cell]
    c60_rec &= ~unknown
    return c60_rec, unknown, pit_in, pit_out, ambiguous


def _stints(ds, car, n_cars, pit_out):
    """Tire age at lap start, laps left in the stint, and a stint id, per record."""
    age = np.zeros(len(ds), dtype=np.int64)
    left = np.zeros(len(ds), dtype=np.int64)
    stint = np.zeros(len(ds), dtype=np.int64)
    next_id = 0
    for c in range(n_cars):
        idx = np.flatnonzero(car == c)
        laps = ds.lap[idx]
        max_lap = int(laps.max())
        outs = sorted(set(laps[pit_out[idx]].tolist()))
        starts = [1] + outs
        ends = [s - 1 for s in outs] + [max_lap]
        for st, en in zip(starts, ends):
            sel = idx[(laps >= st) & (laps <= en)]
            age[sel] = ds.lap[sel] - st
            left[sel] = en - ds.lap[sel] + 1
            stint[sel] = next_id
            next_id += 1
    return age, left, stint


def _stint_fuel(ds, car, n_cars, pit_out, start_laps, tank_laps):
    """Laps of fuel on board at lap start, per record.

    Timing data does not show refuel amounts, so each stop is assumed to add
    the smallest refuel option that reaches the next stop (or the flag),
    topped at the tank.
    """
    fuel = np.zeros(len(ds))
    for c in range(n_cars):
        idx = np.flatnonzero(car == c)
        laps = ds.lap[idx]
        outs = sorted(set(laps[pit_out[idx]].tolist()))
        starts = [1] + outs
        ends = [s - 1 for s in outs] + [int(laps.max())]
        on_board = float(start_laps)
        for k, (st, en) in enumerate(zip(starts, ends)):
            sel = idx[(laps >= st) & (laps <= en)]
            fuel[sel] = on_board - (ds.lap[sel] - st)
            if k + 1 < len(starts):
                leftover = on_board - (en - st + 1)
                nxt = ends[k + 1] - starts[k + 1] + 1
                on_board = min(leftover + smallest_refuel(nxt - leftover), tank_laps)
    return fuel


def _group_mean(a, grp, n_grp):
    return (np.bincount(grp, weights=a, minlength=n_grp) / np.bincount(grp, minlength=n_grp))[grp]


def _within_rank(X, grp, n_grp) -> int:
    Xd = X - np.column_stack([_group_mean(col, grp, n_grp) for col in X.T])
    return int(np.linalg.matrix_rank(Xd))


def _fe_tobit(X, y, grp, n_grp, upper, iters: int = 60):
    """Slopes of ``y`` on ``X`` with a free level per group, when ``upper`` rows only bound y from above.

    Censored rows are replaced by their conditional mean below the bound under
    a normal error, and the within-group least squares fit is repeated until
    it settles. Returns (coef, standard errors of the final fit).
    """
    def demean(a):
        return a - _group_mean(a, grp, n_grp)

    Xd = np.column_stack([demean(col) for col in X.T])
    work = y.astype(float).copy()
    sd = None
    for _ in range(iters if upper.any() else 1):
        coef, *_ = np.linalg.lstsq(Xd, demean(work), rcond=None)
        pred = X @ coef + _group_mean(work - X @ coef, grp, n_grp)
        sd = float(np.sqrt(np.mean((work - pred) ** 2))) if sd is None else sd
        a = (y[upper] - pred[upper]) / sd
        work[upper] = pred[upper] - sd * np.exp(stats.norm.logpdf(a) - stats.norm.logcdf(a))
        sd = float(np.sqrt(np.mean((work - pred) ** 2)))
    res = demean(work) - Xd @ coef
    cov = np.linalg.inv(Xd.T @ Xd) * (res @ res / max(len(y) - n_grp - X.shape[1], 1))
    return coef, np.sqrt(np.diag(cov))


def _censored_normal_fit(r: np.ndarray, tol: float, upper: Optional[np.ndarray] = None) -> tuple[float, float]:
    """MLE of N(mu, sigma) left-censored at ``tol``; ``upper`` marks values that only bound the draw from above."""
    upper = np.zeros(len(r), dtype=bool) if upper is None else upper
    cens = (r <= tol) | upper
    obs = r[~cens]
    bounds = np.maximum(r[cens], tol)
    m0 = float(np.mean(r))
    s0 = float(np.std(r)) or 1.0

    def nll(theta):
        mu, log_s = theta
        s = math.exp(log_s)
        ll = np.sum(stats.norm.logpdf(obs, mu, s))
        if len(bounds):
            ll += np.sum(stats.norm.logcdf(bounds, mu, s))
        return -ll

    res = optimize.minimize(nll, x0=[m0, math.log(s0)], method="Nelder-Mead",
                            options={"xatol": 1e-6, "fatol": 1e-8, "maxiter": 4000})
    return float(res.x[0]), float(math.exp(res.x[1]))


def _c60_rates(ds, c60_cell, unknown_cell, default_duration):
    """Onset probability per sector from runs of Code60 cells, plus the event duration.

    An event covers its sector for ``duration`` laps and no new one can start
    there meanwhile, so a run of r Code60 cells holds ceil(r / duration)
    onsets and r minus that many cells that could not have rolled. Unknown
    cells split runs and are left out; only runs bounded by normal cells (or
    the first lap) are used to estimate the duration, taken as their most
    common length so a stray misflagged cell cannot shorten it.
    """
    n_sec = ds.n_sectors
    runs = {s: [] for s in range(1, n_sec + 1)}   # (length, complete)
    known = {s: 0 for s in range(1, n_sec + 1)}
    race = ds.race_id.astype(str)
    for rid in sorted(set(race.tolist())):
        in_race = race == rid
        for s in range(1, n_sec + 1):
            sel = in_race & (ds.sector == s)
            laps = np.unique(ds.lap[sel]).tolist()
            flagged = set(ds.lap[sel & c60_cell].tolist())
            unknown = set(ds.lap[sel & unknown_cell].tolist())
            known[s] += len(laps) - len(unknown)
            run, open_start = 0, False
            prev_unknown = False
            for lap in laps:
                if lap in unknown:
                    if run:
                        runs[s].append((run, False))
                        run = 0
                    prev_unknown = True
                    continue
                if lap in flagged:
                    if run == 0:
                        open_start = prev_unknown
                    run += 1
                elif run:
                    runs[s].append((run, not open_start))
                    run = 0
                prev_unknown = False
            if run:
                runs[s].append((run, False))
    complete = [r for rs in runs.values() for r, ok in rs if ok]
    if complete:
        lengths, counts = np.unique(complete, return_counts=True)
        duration = int(lengths[np.argmax(counts)])
    else:
        duration = default_duration
    onsets, eligible = np.zeros(n_sec), np.zeros(n_sec)
    for s in range(1, n_sec + 1):
        covered = 0
        for r, _ in runs[s]:
            k = math.ceil(r / duration)
            onsets[s - 1] += k
            covered += r - k
        eligible[s - 1] = max(known[s] - covered, 0)
    probs = np.divide(onsets, eligible, out=np.zeros(n_sec), where=eligible > 0)
    return probs, onsets, eligible, int(duration)


def _pool_rates(probs, onsets, eligible, alpha):
    """One common rate for every sector unless a homogeneity test rejects it at ``alpha``."""
    ok = eligible > 0
    if onsets.sum() == 0 or ok.sum() < 2:
        return probs, False
    table = np.vstack([onsets[ok], eligible[ok] - onsets[ok]])
    if np.any(table.sum(axis=1) == 0):
        return probs, False
    p_value = stats.chi2_contingency(table, correction=False)[1]
    if p_value < alpha:
        return probs, False
    return np.where(ok, onsets.sum() / eligible.sum(), probs), True


def _pool_start(groups: dict, alpha: float):
    """Start means as a straight line in grid slot with one spread, if the data allow it.

    Accepted when neither a lack-of-fit F test on the slot means nor
    Bartlett's test for equal spreads rejects at ``alpha``; otherwise None.
    """
    slots = sorted(groups)
    if len(slots) < 3:
        return None
    x = np.concatenate([np.full(len(groups[k]), float(k)) for k in slots])
    y = np.concatenate([groups[k] for k in slots])
    n, k = len(y), len(slots)
    if n - k < 1:
        return None
    slope, intercept = np.polyfit(x, y, 1)
    sse_line = float(np.sum((y - (intercept + slope * x)) ** 2))
    sse_pure = float(sum(np.sum((groups[s] - groups[s].mean()) ** 2) for s in slots))
    if sse_pure <= 0:
        return None
    f = ((sse_line - sse_pure) / (k - 2)) / (sse_pure / (n - k))
    if stats.f.sf(f, k - 2, n - k) < alpha or stats.bartlett(*(groups[s] for s in slots)).pvalue < alpha:
        return None
    sd = math.sqrt(sse_line / (n - 2))
    return {s: (float(intercept + slope * s), sd) for s in slots}


def _interactions(ds, car, special, bad_cells, min_gap):
    """Per-record view of the car ahead at each sector boundary.

    Returns the entry gap to the car directly ahead (inf for the leader),
    whether the car was ahead of that car at the exit, and whether it exits
    exactly ``min_gap`` behind another car, the signature of being held up.
    Pitting, starting and Code60 records take no part.
    """
    n = len(ds)
    entry_gap = np.full(n, np.inf)
    passed = np.zeros(n, dtype=bool)
    blocked = np.zeros(n, dtype=bool)
    n_sec = ds.n_sectors
    race = ds.race_id.astype(str)
    tol = 1e-3
    for rid in sorted(set(race.tolist())):
        sel = np.flatnonzero(race == rid)
        cars = np.unique(car[sel])
        col = {c: k for k, c in enumerate(cars.tolist())}
        n_b = int(ds.lap[sel].max()) * n_sec
        times = np.full((len(cars), n_b), np.nan)
        bad = np.zeros((len(cars), n_b), dtype=bool)
        rec = np.full((len(cars), n_b), -1)
        b = (ds.lap[sel] - 1) * n_sec + (ds.sector[sel] - 1)
        rows = np.array([col[c] for c in car[sel].tolist()])
        times[rows, b] = ds.sector_time[sel]
        bad[rows, b] = special[sel] | bad_cells[sel]
        rec[rows, b] = sel
        cum = np.cumsum(times, axis=1)
        for k in range(1, n_b):
            before, after = cum[:, k - 1], cum[:, k]
            ids = np.flatnonzero(np.isfinite(before) & np.isfinite(after) & ~bad[:, k])
            if len(ids) < 2:
                continue
            order = ids[np.argsort(before[ids], kind="stable")]
            for ahead, follower in zip(order[:-1], order[1:]):
                r = rec[follower, k]
                entry_gap[r] = before[follower] - before[ahead]
                passed[r] = after[follower] < after[ahead]
            if min_gap is not None:
                exits = np.sort(after[ids])
                for i in ids:
                    j = np.searchsorted(exits, after[i] - min_gap - tol)
                    blocked[rec[i, k]] = j < len(exits) and abs(exits[j] - (after[i] - min_gap)) <= tol
    return entry_gap, passed, blocked


def _overtakes(ds, entry_gap, passed, blocked, gate):
    """Per sector: (delta, success prob, passes) from order swaps between boundaries.

    A follower that exits held up behind another car wanted to pass and did
    not, so it counts as a failed or withheld attempt when its entry gap was
    within ``delta``.
    """
    out = []
    for s in range(1, ds.n_sectors + 1):
        in_s = (ds.sector == s) & np.isfinite(entry_gap)
        g = entry_gap[in_s & passed]
        if len(g) == 0:
            out.append((None, None, 0))
            continue
        delta = float(g.max() if gate == "max" else g.mean())
        close = in_s & (entry_gap <= delta)
        wins = int((close & passed).sum())
        tries = wins + int((close & blocked & ~passed).sum())
        out.append((delta, wins / tries if tries else 0.0, len(g)))
    return out


def fit_all(ds: TimingDataset, config: Optional["RaceConfig"] = None,
            options: Optional[FitOptions] = None) -> FittedParams:
    """Fit every stochastic parameter; thin parameters fall back to ``config``."""
    from .config import load_config

    if config is None:
        config = load_config()
    opts = options or FitOptions.from_flat(config.flat)
    if len(ds) == 0:
        raise InsufficientDataError("empty dataset")
    n_sec = ds.n_sectors
    if n_sec != config.track.n_sectors:
        raise ValueError(f"data has {n_sec} sectors, track config has {config.track.n_sectors}")
    defaults = FittedParams.from_config(config)
    samples, fallbacks = {}, []

    labels = label_all(ds, opts.c60_ratio, opts.traffic_ratio)
    car, n_cars = _group_codes(ds.race_id.astype(str), ds.car_id.astype(str))
    c60_s1 = config.c60.sector_time(config.track.sectors[0].length_km)
    c60_cell, unknown_cell, pit_in_rec, pit_out_rec, ambiguous = _cells_and_pits(ds, labels, car, n_cars, opts, c60_s1)
    start_rec = (ds.lap == 1) & (ds.sector == 1)
    special = pit_out_rec | pit_in_rec | start_rec | ambiguous
    clean = ~special & ~c60_cell & ~unknown_cell
    samples["records"] = int(len(ds))
    samples["c60_cells_records"] = int(c60_cell.sum())
    samples["pit_stops"] = int(pit_out_rec.sum())

    # start model: per-slot samples, pooled into a line when consistent with one
    start_ok = start_rec & ~c60_cell & ~unknown_cell
    max_slot = max(int(ds.grid_slot.max()), len(defaults.start))
    groups = {}
    for slot in range(1, max_slot + 1):
        v = ds.sector_time[start_ok & (ds.grid_slot == slot)]
        samples[f"start.slot{slot}"] = int(len(v))
        if len(v) >= max(opts.min_samples, 2):
            groups[slot] = v
    line = _pool_start(groups, opts.pool_alpha)
    samples["start.pooled"] = line is not None
    start = []
    for slot in range(1, max_slot + 1):
        if line is not None and slot in line:
            start.append(line[slot])
        elif slot in groups:
            start.append((float(groups[slot].mean()), float(groups[slot].std(ddof=1))))
        else:
            fallbacks.append(f"start.slot{slot} ({samples[f'start.slot{slot}']} samples)")
            start.append(defaults.start[slot - 1] if slot <= len(defaults.start)
                         else (defaults.start[-1][0], defaults.start[-1][1]))

    # interactions: cars that start a sector within passing range may carry a
    # failed-attempt penalty and are left out (a choice made on entry state
    # only); cars held up behind another only bound their draw from above
    min_gap = config.overtake.min_gap if config.overtake is not None else None
    entry_gap, passed, blocked = _interactions(ds, car, special, c60_cell | unknown_cell, min_gap)
    reach = np.zeros(n_sec)
    for s in range(1, n_sec + 1):
        g = entry_gap[(ds.sector == s) & passed & np.isfinite(entry_gap)]
        reach[s - 1] = g.max() if len(g) else 0.0
    free = clean & ~(entry_gap <= reach[ds.sector - 1]) if min_gap is not None else clean

    # tire and fuel trends against each car's own sector level; a slope that
    # the data cannot tell from zero keeps its default
    track, params = config.track, config.car
    age, _, _ = _stints(ds, car, n_cars, pit_out_rec)
    tf = np.array([sec.tire_factor for sec in track.sectors])[ds.sector - 1]
    lf = np.array([sec.length_fraction for sec in track.sectors])[ds.sector - 1]
    ff = np.array([sec.fuel_factor for sec in track.sectors])[ds.sector - 1]
    fuel_laps = _stint_fuel(ds, car, n_cars, pit_out_rec, config.start_fuel_laps,
                            params.tank_capacity / params.fuel_per_lap)
    x_tire = tf * np.log1p(age)
    x_fuel = params.fuel_per_lap * ff * lf * fuel_laps
    tire_coeff, fuel_sens = defaults.tire_log_coeff, defaults.fuel_sensitivity
    grp, n_grp = _group_codes(car[free], ds.sector[free])
    samples["trend_records"] = int(free.sum())
    X = np.column_stack([x_tire[free], x_fuel[free]])
    if free.sum() >= max(opts.min_samples, 3) and n_grp + 2 < free.sum() and _within_rank(X, grp, n_grp) == 2:
        coef, se = _fe_tobit(X, ds.sector_time[free], grp, n_grp, blocked[free])
        for name, k in (("tire_log_coeff", 0), ("fuel_sensitivity", 1)):
            if coef[k] >= 2 * se[k]:
                if k == 0:
                    tire_coeff = float(coef[k])
                else:
                    fuel_sens = float(coef[k])
            else:
                fallbacks.append(f"{name} (slope {coef[k]:.3g} not significant)")
    else:
        fallbacks.append("tire_log_coeff, fuel_sensitivity (too few records or no variation)")

    # traffic: residuals over each car's base line, i.e. the track's sector
    # base times shifted by the car's pace offset, taken from its best record
    z = ds.sector_time - tire_coeff * x_tire - fuel_sens * x_fuel
    base = np.array([sec.base_time for sec in track.sectors])[ds.sector - 1]
    pace = np.full(n_cars, np.inf)
    np.minimum.at(pace, car[clean], ((z - base) / lf)[clean])
    pace = np.where(np.isfinite(pace), np.maximum(pace, 0.0), 0.0)
    resid = z - base - pace[car] * lf
    traffic = []
    for s in range(1, n_sec + 1):
        in_s = free & (ds.sector == s)
        r = resid[in_s]
        samples[f"traffic.sector{s}"] = int(len(r))
        if len(r) >= opts.min_samples and np.any(r > opts.atom_tolerance):
            mu, sd = _censored_normal_fit(r, opts.atom_tolerance, blocked[in_s])
            traffic.append((mu, sd, 0.0))
        else:
            fallbacks.append(f"traffic.sector{s} ({len(r)} samples)")
            traffic.append(defaults.traffic[s - 1])

    # Code60
    c60_prob, onsets, eligible, duration = _c60_rates(ds, c60_cell, unknown_cell, defaults.c60_duration_laps)
    c60_prob, pooled = _pool_rates(c60_prob, onsets, eligible, opts.pool_alpha)
    c60_prob = tuple(float(p) for p in c60_prob)
    samples["c60_events"] = int(onsets.sum())
    samples["c60.pooled"] = pooled

    # overtakes
    overtake = []
    for s, (delta, prob, n) in enumerate(_overtakes(ds, entry_gap, passed, blocked, opts.overtake_gate), start=1):
        samples[f"overtake.sector{s}"] = n
        if n >= opts.min_samples:
            overtake.append((delta, prob))
        else:
            fallbacks.append(f"overtake.sector{s} ({n} passes)")
            overtake.append(defaults.overtake[s - 1])

    return FittedParams(start=tuple(start), traffic=tuple(traffic), c60_prob=c60_prob,
                        c60_duration_laps=duration, overtake=tuple(overtake), tire_log_coeff=tire_coeff,
                        fuel_sensitivity=fuel_sens, samples=samples, fallbacks=fallbacks)


def generate_synthetic(params: FittedParams, races: int, seed: int,
                       config: Optional["RaceConfig"] = None, class_tag: str = "SP9") -> TimingDataset:
    """Sample ``races`` races from ``params`` through the race engine.

    Every car follows the opponent strategy; records stop where a car retires.
    """
    from .config import load_config

    if races < 0:
        raise ValueError("races must be >= 0")
    base = config if config is not None else load_config()
    cfg = params.apply(base)
    records = []
    for k in range(races):
        state = run_race(cfg, seed=derive_seed(seed, k) % (2 ** 62), record_sectors=True, all_opponents=True)
        rid = f"R{k + 1:03d}"
        for lap, s, idx, t in state.sector_log:
            c = state.cars[idx]
            records.append(TimingRecord(rid, c.car_id, class_tag, c.grid_slot, lap, s, float(t)))
    return TimingDataset(records, source=f"synthetic(seed={seed})")


class ParamFitter(BaseEstimator):
    """Estimator wrapper: ``fit`` on a TimingDataset, ``predict`` labels its records."""

    def __init__(self, c60_ratio=1.8, traffic_ratio=1.02, pit_excess=25.0, pit_in_excess=10.0,
                 atom_tolerance=0.25, min_samples=5, overtake_gate="mean", pool_alpha=0.01, config=None):
        self.c60_ratio = c60_ratio
        self.traffic_ratio = traffic_ratio
        self.pit_excess = pit_excess
        self.pit_in_excess = pit_in_excess
        self.atom_tolerance = atom_tolerance
        self.min_samples = min_samples
        self.overtake_gate = overtake_gate
        self.pool_alpha = pool_alpha
        self.config = config

    def _options(self) -> FitOptions:
        if self.overtake_gate not in ("mean", "max"):
            raise ValueError("overtake_gate must be 'mean' or 'max'")
        if not 1 < self.traffic_ratio <= self.c60_ratio:
            raise ValueError("need 1 < traffic_ratio <= c60_ratio")
        if not 0 <= self.pool_alpha <= 1:
            raise ValueError("pool_alpha must be in [0, 1]")
        return FitOptions(self.c60_ratio, self.traffic_ratio, self.pit_excess, self.pit_in_excess,
                          self.atom_tolerance, self.min_samples, self.overtake_gate, self.pool_alpha)

    def fit(self, X: TimingDataset, y=None):
        if not isinstance(X, TimingDataset):
            raise TypeError("ParamFitter.fit expects a TimingDataset")
        self.params_ = fit_all(X, self.config, self._options())
        self.n_records_ = len(X)
        return self

    def predict(self, X: TimingDataset) -> np.ndarray:
        """Normal/Traffic/C60 label per record."""
        check_is_fitted(self, "params_")
        opts = self._options()
        return label_all(X, opts.c60_ratio, opts.traffic_ratio)

    def report(self) -> str:
        check_is_fitted(self, "params_")
        return self.params_.report()
