"""Distributions of bubble start (t1) and critical time (tc) over qualified fits."""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .lppls import LpplsFit
from .market_data import PriceSeries

FIELDS = ("t1", "tc")
METHODS = ("histogram", "kde")
DENSITY_COLUMNS = ("date", "pdf_t1", "pdf_tc", "cdf_t1", "cdf_tc")
# cumulative mass is compared with this slack so 0.8 is reached despite rounding
_CDF_EPS = 1e-12


@dataclass(frozen=True)
class DensityEstimate:
    """Probability mass on consecutive trading-day ordinals."""

    ordinals: np.ndarray
    mass: np.ndarray
    source_count: int
    field: str
    method: str
    dates: tuple[dt.date, ...] | None = None

    @property
    def support(self) -> tuple:
        return self.dates if self.dates is not None else tuple(int(o) for o in self.ordinals)

    @property
    def cdf(self) -> np.ndarray:
        return np.cumsum(self.mass)

    @property
    def mode(self):
        return self.support[int(np.argmax(self.mass))]


def _to_index(series: PriceSeries | None, v) -> int:
    if isinstance(v, (int, np.integer)):
        return int(v)
    if series is None:
        raise ValueError("dates need a series to resolve")
    return series.index_on_or_before(v if isinstance(v, dt.date) else dt.date.fromisoformat(str(v)))


def collect_fits(records: Iterable[dict | LpplsFit], episode: tuple, series: PriceSeries | None = None,
                 sign: str | None = "positive") -> list[LpplsFit]:
    """Qualified fits whose t2 lies in the closed episode range.

    ``episode`` bounds may be indices or dates (resolved against ``series``).
    Records are fit dicts as written by a scan, or :class:`LpplsFit`. A dict
    carrying a filter report is kept only when it qualified. ``sign``
    restricts to one bubble direction; None keeps both.
    """
    lo, hi = (_to_index(series, v) for v in episode)
    if lo > hi:
        raise ValueError(f"episode start {episode[0]} is after its end {episode[1]}")
    out = []
    for rec in records:
        if isinstance(rec, dict):
            report = rec.get("report")
            if report is not None and not report.get("qualified", False):
                continue
            fit = LpplsFit.from_dict(rec)
        else:
            fit = rec
        if lo <= fit.t2 <= hi and (sign is None or fit.bubble_sign == sign):
            out.append(fit)
    return out


def field_values(fits: Sequence[LpplsFit], field: str) -> np.ndarray:
    if field == "t1":
        return np.array([f.t1 for f in fits], dtype=float)
    if field == "tc":
        return np.array([f.nonlinear.tc for f in fits], dtype=float)
    raise ValueError(f"field must be one of {FIELDS}, got {field!r}")


def silverman_bandwidth(v: np.ndarray) -> float:
    n = len(v)
    if n < 2:
        return 0.0
    sd = float(np.std(v, ddof=1))
    q75, q25 = np.percentile(v, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * n ** (-0.2)


def density(fits: Sequence[LpplsFit], field: str, method: str = "kde",
            bounds: tuple[int, int] | None = None, series: PriceSeries | None = None,
            bandwidth: float | None = None) -> DensityEstimate:
    """Distribution of t1 or tc over ``fits`` on the daily trading grid.

    ``histogram`` rounds each value to its trading day. ``kde`` smooths with
    a Gaussian kernel (Silverman bandwidth unless given) evaluated on the
    grid from 3 bandwidths below the smallest value to 3 above the largest,
    clipped to ``bounds`` and renormalised. With a series, the support is
    also reported as dates.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if len(fits) == 0:
        raise ValueError("density needs at least one fit")
    v = np.sort(field_values(fits, field))
    h = silverman_bandwidth(v) if bandwidth is None else float(bandwidth)
    if method == "histogram" or h <= 0:
        idx = np.floor(v + 0.5).astype(np.int64)
        lo, hi = int(idx[0]), int(idx[-1])
        if bounds is not None:
            lo, hi = max(lo, bounds[0]), min(hi, bounds[1])
            idx = np.clip(idx, lo, hi)
        grid = np.arange(lo, hi + 1)
        mass = np.bincount(idx - lo, minlength=len(grid)).astype(float)
    else:
        lo = int(math.floor(v[0] - 3 * h))
        hi = int(math.ceil(v[-1] + 3 * h))
        if bounds is not None:
            lo, hi = max(lo, bounds[0]), min(hi, bounds[1])
        grid = np.arange(lo, hi + 1)
        z = (grid[:, None] - v[None, :]) / h
        mass = np.exp(-0.5 * z * z).sum(axis=1)
        if not mass.sum() > 0:
            # everything clipped away: fall back to the rounded values
            return density(fits, field, "histogram", bounds, series)
    mass = mass / mass.sum()
    dates = tuple(series.date_at(int(g)) for g in grid) if series is not None else None
    return DensityEstimate(grid, mass, len(fits), field, method, dates)


def quantile_range(d: DensityEstimate, lo: float, hi: float):
    """First support points where the cumulative mass reaches ``lo`` and ``hi``."""
    if not 0 <= lo < hi <= 1:
        raise ValueError(f"need 0 <= lo < hi <= 1, got {lo}, {hi}")
    cdf = d.cdf
    i = int(np.searchsorted(cdf, lo - _CDF_EPS, side="left"))
    j = int(np.searchsorted(cdf, hi - _CDF_EPS, side="left"))
    n = len(cdf) - 1
    sup = d.support
    return sup[min(i, n)], sup[min(j, n)]


def support_bounds(series: PriceSeries, fits: Sequence[LpplsFit], field: str,
                   tc_frac: float = 0.2) -> tuple[int, int]:
    """Admissible ordinal range: the series for t1; up to the farthest allowed tc for tc."""
    if field == "t1":
        return 0, len(series) - 1
    far = max(math.ceil(f.t2 + tc_frac * (f.t2 - f.t1)) for f in fits)
    return 0, max(far, len(series) - 1)


@dataclass
class PostMortem:
    fits: list[LpplsFit]
    densities: dict[tuple[str, str], DensityEstimate]

    @property
    def empty(self) -> bool:
        return not self.fits


def analyse(series: PriceSeries, fits: Sequence[LpplsFit], tc_frac: float = 0.2) -> PostMortem:
    """Histogram and kernel densities of t1 and tc for a collection of fits."""
    dens = {}
    if fits:
        for field in FIELDS:
            b = support_bounds(series, fits, field, tc_frac)
            for method in METHODS:
                dens[(field, method)] = density(fits, field, method, b, series)
    return PostMortem(list(fits), dens)


def summary(pm: PostMortem, episode: tuple | None = None) -> dict:
    out: dict = {"n_fits": len(pm.fits), "empty": pm.empty}
    if episode is not None:
        out["episode"] = [str(e) for e in episode]
    for (field, method), d in sorted(pm.densities.items()):
        key = f"{field}_{method}"
        out[key] = {
            "mode": _iso(d.mode),
            "q20_80": [_iso(x) for x in quantile_range(d, 0.2, 0.8)],
            "q05_95": [_iso(x) for x in quantile_range(d, 0.05, 0.95)],
        }
        if d.method == "kde":
            out[key]["bandwidth_days"] = silverman_bandwidth(np.sort(field_values(pm.fits, field)))
    return out


def _iso(x) -> str | int:
    return x.isoformat() if isinstance(x, dt.date) else int(x)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_density_csv(pm: PostMortem, method: str, path: str | os.PathLike, series: PriceSeries) -> None:
    """One row per trading day covering both supports; pdf is mass per day."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DENSITY_COLUMNS)
        if pm.empty:
            return
        d1, dc = pm.densities[("t1", method)], pm.densities[("tc", method)]
        lo = int(min(d1.ordinals[0], dc.ordinals[0]))
        hi = int(max(d1.ordinals[-1], dc.ordinals[-1]))
        grid = np.arange(lo, hi + 1)
        cols = []
        for d in (d1, dc):
            pdf = np.zeros(len(grid))
            pdf[d.ordinals - lo] = d.mass
            cols.append(pdf)
        cdfs = [np.minimum(np.cumsum(p), 1.0) for p in cols]
        for k, g in enumerate(grid):
            w.writerow([series.date_at(int(g)).isoformat(), _fmt(cols[0][k]), _fmt(cols[1][k]),
                        _fmt(cdfs[0][k]), _fmt(cdfs[1][k])])


def write_summary_json(doc: dict, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
