"""Shrinking-window scans and the positive/negative confidence indicators."""
from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import hashlib
import json
import multiprocessing as mp
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .calibrator import CalibrationConfig, SearchSpace, calibrate
from .market_data import PriceSeries
from .qualifiers import FilterConditions, is_qualified, qualify

INDICATOR_COLUMNS = ("date", "positive_confidence", "negative_confidence",
                     "n_qualified_pos", "n_qualified_neg", "n_windows", "n_failed")


@dataclass(frozen=True)
class WindowSchedule:
    """Windows [t2 - dt, t2] for dt = dt_max, dt_max - dt_step, ..., >= dt_min.

    Pseudo-present times t2 step back from ``t2_end`` (default: last index)
    by ``t2_step`` while t2 >= ``t2_start`` (default: ``dt_max``, the first
    t2 with complete history). Windows reaching before index 0 are dropped.
    """

    dt_max: int = 750
    dt_min: int = 50
    dt_step: int = 5
    t2_step: int = 5
    t2_start: int | None = None
    t2_end: int | None = None

    def __post_init__(self) -> None:
        if self.dt_min < 1 or self.dt_max < self.dt_min:
            raise ValueError(f"need 1 <= dt_min <= dt_max, got {self.dt_min}, {self.dt_max}")
        if self.dt_step < 1 or self.t2_step < 1:
            raise ValueError("dt_step and t2_step must be positive")

    @property
    def window_lengths(self) -> np.ndarray:
        return np.arange(self.dt_max, self.dt_min - 1, -self.dt_step)

    @property
    def windows_per_t2(self) -> int:
        return len(self.window_lengths)


@dataclass(frozen=True)
class Lattice:
    """Concrete (t1, t2) pairs of a schedule applied to a series of length n."""

    schedule: WindowSchedule
    n: int
    t2_values: tuple[int, ...]

    def windows(self, t2: int) -> list[tuple[int, int]]:
        return [(t2 - int(d), t2) for d in self.schedule.window_lengths if t2 - d >= 0]

    def pairs(self) -> Iterable[tuple[int, int]]:
        for t2 in self.t2_values:
            yield from self.windows(t2)

    @property
    def n_windows(self) -> int:
        return sum(len(self.windows(t2)) for t2 in self.t2_values)


def build_schedule(series: PriceSeries | int, schedule: WindowSchedule | None = None) -> Lattice:
    """Enumerate pseudo-present times and their windows."""
    schedule = schedule or WindowSchedule()
    n = series if isinstance(series, int) else len(series)
    end = n - 1 if schedule.t2_end is None else schedule.t2_end
    start = schedule.dt_max if schedule.t2_start is None else schedule.t2_start
    if not 0 <= end < n:
        raise ValueError(f"t2_end={end} outside the series (length {n})")
    start = max(start, schedule.dt_min)
    if end < start:
        raise ValueError(
            f"empty schedule: no t2 in [{start}, {end}] (series length {n}, dt_min {schedule.dt_min})")
    t2 = np.arange(end, start - 1, -schedule.t2_step)[::-1]
    return Lattice(schedule, n, tuple(int(v) for v in t2))


@dataclass(frozen=True)
class ScanConfig:
    """Everything a scan depends on besides the data.

    ``seed`` is the master seed; each window's optimiser seed is derived from
    (seed, t1, t2), which overrides ``calibration.seed``.
    """

    schedule: WindowSchedule = field(default_factory=WindowSchedule)
    search: SearchSpace = field(default_factory=SearchSpace)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    filters: FilterConditions = field(default_factory=FilterConditions)
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class IndicatorPoint:
    t2: int
    date: dt.date
    positive_confidence: float
    negative_confidence: float
    n_windows: int
    n_qualified_pos: int
    n_qualified_neg: int
    n_failed: int

    def row(self) -> list[str]:
        return [self.date.isoformat(), repr(self.positive_confidence), repr(self.negative_confidence),
                str(self.n_qualified_pos), str(self.n_qualified_neg), str(self.n_windows), str(self.n_failed)]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["date"] = self.date.isoformat()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IndicatorPoint":
        d = dict(d)
        d["date"] = dt.date.fromisoformat(d["date"])
        return cls(**d)


@dataclass
class ScanResult:
    points: list[IndicatorPoint]
    fits: list[dict]
    n_windows: int
    resumed_t2: int = 0


def window_seed(master: int, t1: int, t2: int) -> int:
    """Stable per-window seed, independent of scheduling order."""
    return int(np.random.SeedSequence([int(master), int(t1), int(t2)]).generate_state(1)[0])


def evaluate_window(series: PriceSeries, window: tuple[int, int], cfg: ScanConfig,
                    keep_fit: bool = True) -> tuple:
    """Calibrate and qualify one window.

    Returns (t1, t2, failed, sign, record) where sign is the bubble sign of a
    qualified fit (else None) and record is the fit with its filter report
    when qualified and ``keep_fit``.
    """
    t1, t2 = window
    ccfg = dataclasses.replace(cfg.calibration, seed=window_seed(cfg.seed, t1, t2))
    fit = calibrate(series, window, cfg.search, ccfg)
    if not fit:
        return t1, t2, True, None, None
    if not is_qualified(series, fit, cfg.filters):
        return t1, t2, False, None, None
    sign = fit.bubble_sign
    record = fit_record(series, fit, qualify(series, fit, cfg.filters).to_dict()) if keep_fit else None
    return t1, t2, False, sign, record


def fit_record(series: PriceSeries, fit, report: dict | None = None) -> dict:
    d = fit.to_dict()
    d["date_t1"] = series.date_of(fit.t1).isoformat()
    d["date_t2"] = series.date_of(fit.t2).isoformat()
    d["date_tc"] = series.date_at(fit.nonlinear.tc).isoformat()
    if report is not None:
        d["report"] = report
    return d


def _reduce(series: PriceSeries, t2: int, outcomes: list[tuple]) -> tuple[IndicatorPoint, list[dict]]:
    n = len(outcomes)
    failed = sum(1 for o in outcomes if o[2])
    pos = sum(1 for o in outcomes if o[3] == "positive")
    neg = sum(1 for o in outcomes if o[3] == "negative")
    fits = [o[4] for o in outcomes if o[4] is not None]
    point = IndicatorPoint(t2, series.date_of(t2), pos / n, neg / n, n, pos, neg, failed)
    return point, fits


def confidence_at(series: PriceSeries, t2: int, cfg: ScanConfig | None = None) -> IndicatorPoint:
    """Indicator value at one pseudo-present, using only data up to t2."""
    cfg = cfg or ScanConfig()
    lattice = Lattice(cfg.schedule, len(series), (int(t2),))
    windows = lattice.windows(int(t2))
    if not windows:
        raise ValueError(f"no window of length >= {cfg.schedule.dt_min} ends at t2={t2}")
    outcomes = [evaluate_window(series, w, cfg, keep_fit=False) for w in windows]
    return _reduce(series, int(t2), outcomes)[0]


# worker-side state, installed once per process
_WORKER: dict = {}


def _init_worker(series: PriceSeries, cfg: ScanConfig) -> None:
    _WORKER["series"] = series
    _WORKER["cfg"] = cfg


def _work(window: tuple[int, int]) -> tuple:
    return evaluate_window(_WORKER["series"], window, _WORKER["cfg"])


def fingerprint(series: PriceSeries, cfg: ScanConfig) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    h.update("|".join(d.isoformat() for d in series.dates).encode())
    h.update(np.ascontiguousarray(series.closes, dtype="<f8").tobytes())
    return h.hexdigest()


class Checkpoint:
    """Append-only JSON-lines log with one record per finished t2."""

    def __init__(self, path: str | os.PathLike, key: str):
        self.path = os.fspath(path)
        self.key = key

    def load(self) -> dict[int, tuple[IndicatorPoint, list[dict]]]:
        done: dict[int, tuple[IndicatorPoint, list[dict]]] = {}
        if not os.path.exists(self.path):
            return done
        with open(self.path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if not lines or not lines[0]:
            return done
        head = json.loads(lines[0])
        if head.get("fingerprint") != self.key:
            raise ValueError(f"checkpoint {self.path} belongs to a different data/config combination")
        for line in lines[1:]:
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                break  # torn final write
            done[int(rec["t2"])] = (IndicatorPoint.from_dict(rec["point"]), rec["fits"])
        return done

    def start(self) -> None:
        if os.path.exists(self.path) and os.path.getsize(self.path) > 0:
            self._trim()
            return
        with open(self.path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"fingerprint": self.key}) + "\n")

    def _trim(self) -> None:
        # drop an incomplete last line so appends start on a fresh record
        with open(self.path, "rb+") as fh:
            data = fh.read()
            cut = data.rfind(b"\n") + 1
            if cut != len(data):
                fh.truncate(cut)

    def append(self, point: IndicatorPoint, fits: list[dict]) -> None:
        rec = {"t2": point.t2, "point": point.to_dict(), "fits": fits}
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())


def scan(series: PriceSeries, cfg: ScanConfig | None = None, parallelism: int = 1,
         checkpoint: str | os.PathLike | None = None,
         progress: Callable[[IndicatorPoint], None] | None = None) -> ScanResult:
    """Indicator points for every t2 of the schedule, in chronological order.

    Windows are farmed out to ``parallelism`` processes and reassembled in
    schedule order, so the output does not depend on the degree of
    parallelism. With ``checkpoint`` each finished t2 is appended to that file
    and t2 values already present there are not recomputed.
    """
    cfg = cfg or ScanConfig()
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    lattice = build_schedule(series, cfg.schedule)
    ckpt = Checkpoint(checkpoint, fingerprint(series, cfg)) if checkpoint is not None else None
    done = ckpt.load() if ckpt else {}
    if ckpt:
        ckpt.start()
    todo = [t2 for t2 in lattice.t2_values if t2 not in done]
    tasks = [w for t2 in todo for w in lattice.windows(t2)]
    results = dict(done)

    def consume(outcomes: Iterable[tuple]) -> None:
        pending: list[tuple] = []
        it = iter(todo)
        current = next(it, None)
        need = len(lattice.windows(current)) if current is not None else 0
        for o in outcomes:
            pending.append(o)
            if len(pending) == need:
                point, fits = _reduce(series, current, pending)
                results[current] = (point, fits)
                if ckpt:
                    ckpt.append(point, fits)
                if progress:
                    progress(point)
                pending = []
                current = next(it, None)
                need = len(lattice.windows(current)) if current is not None else 0

    if parallelism == 1 or len(tasks) <= 1:
        consume(evaluate_window(series, w, cfg) for w in tasks)
    else:
        chunk = max(1, min(32, len(tasks) // (parallelism * 8)))
        ctx = mp.get_context("fork")
        with ctx.Pool(parallelism, initializer=_init_worker, initargs=(series, cfg)) as pool:
            consume(pool.imap(_work, tasks, chunksize=chunk))

    points, fits = [], []
    for t2 in lattice.t2_values:
        point, f = results[t2]
        points.append(point)
        fits.extend(f)
    return ScanResult(points, fits, lattice.n_windows, len(done))


def write_indicator_csv(points: Iterable[IndicatorPoint], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDICATOR_COLUMNS)
        for p in points:
            w.writerow(p.row())


def read_indicator_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_fits_json(result: ScanResult, path: str | os.PathLike, metadata: dict | None = None) -> None:
    doc = {"metadata": dict(metadata or {}), "fits": result.fits}
    doc["metadata"].update({"n_t2": len(result.points), "n_windows": result.n_windows,
                            "n_qualified": len(result.fits)})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_fits_json(path: str | os.PathLike) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
