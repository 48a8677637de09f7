"""Filter battery deciding whether a calibrated fit counts toward the indicator."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import stat_tests
from .lppls import LpplsFit, lppls_eval, residuals
from .market_data import PriceSeries

# coefficient k in k * omega * ln((tc - t1) / (tc - t2))
OSCILLATION_CONVENTIONS = {
    "omega/2pi": 1.0 / (2.0 * math.pi),
    "omega/pi": 1.0 / math.pi,
    "omega/2": 0.5,
}

# residuals below this fraction of the log-price level count as an exact fit
ROUNDOFF_RESIDUAL = 1e-10

CONDITION_NAMES = ("m_range", "omega_range", "tc_range", "oscillations",
                   "max_rel_error", "lomb", "dickey_fuller", "phillips_perron")


@dataclass(frozen=True)
class FilterConditions:
    """Thresholds a fit must meet. tc must lie in [t2, t2 + tc_frac (t2 - t1)]."""

    m_range: tuple[float, float] = (0.01, 0.99)
    omega_range: tuple[float, float] = (2.0, 25.0)
    tc_frac: float = 0.2
    min_oscillations: float = 2.5
    oscillation_convention: str = "omega/2pi"
    max_rel_error: float = 0.15
    alpha_sig: float = 0.05
    unit_root_level: float = 0.10
    lomb_abscissa: str = "log"

    def __post_init__(self) -> None:
        for name in ("m_range", "omega_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must be increasing, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.oscillation_convention not in OSCILLATION_CONVENTIONS:
            raise ValueError(f"oscillation_convention must be one of {sorted(OSCILLATION_CONVENTIONS)}")
        if self.unit_root_level not in stat_tests.LEVELS:
            raise ValueError(f"unit_root_level must be one of {stat_tests.LEVELS}")
        if self.lomb_abscissa not in ("log", "time"):
            raise ValueError("lomb_abscissa must be 'log' or 'time'")
        if not 0 <= self.alpha_sig <= 1:
            raise ValueError("alpha_sig must lie in [0, 1]")
        if self.tc_frac < 0 or self.max_rel_error < 0:
            raise ValueError("tc_frac and max_rel_error must be non-negative")

    def tc_range(self, t1: int, t2: int) -> tuple[float, float]:
        return float(t2), t2 + self.tc_frac * (t2 - t1)


@dataclass(frozen=True)
class ConditionResult:
    name: str
    statistic: float
    threshold: object
    passed: bool
    reason: str = ""


@dataclass(frozen=True)
class FilterReport:
    conditions: tuple[ConditionResult, ...]
    qualified: bool
    bubble_sign: str | None

    def __getitem__(self, name: str) -> ConditionResult:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def failed(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.conditions if not c.passed)

    def to_dict(self) -> dict:
        return {
            "qualified": self.qualified,
            "bubble_sign": self.bubble_sign,
            "conditions": [_json_safe(asdict(c)) for c in self.conditions],
        }


def _json_safe(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, float) and not math.isfinite(v):
            v = None if math.isnan(v) else ("inf" if v > 0 else "-inf")
        elif isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


def oscillation_count(fit: LpplsFit, convention: str = "omega/2pi") -> float:
    """Number of log-periodic oscillations between t1 and t2."""
    p = fit.nonlinear
    if not p.tc > fit.t2:
        raise ValueError(f"tc={p.tc} must exceed t2={fit.t2}")
    k = OSCILLATION_CONVENTIONS[convention]
    return k * p.omega * math.log((p.tc - fit.t1) / (p.tc - fit.t2))


def max_relative_error(series: PriceSeries, fit: LpplsFit) -> float:
    """max |p_hat - p| / p over the window, p_hat = exp of the fitted log-price."""
    t = np.arange(fit.t1, fit.t2 + 1)
    p = series.closes[fit.t1:fit.t2 + 1]
    p_hat = np.exp(lppls_eval(fit.nonlinear, fit.linear, t))
    return float(np.max(np.abs(p_hat - p) / p))


def _in_range(name, x, lo, hi) -> ConditionResult:
    return ConditionResult(name, float(x), (lo, hi), bool(lo <= x <= hi))


class _Battery:
    """Lazily evaluated conditions so callers can stop at the first failure."""

    def __init__(self, series: PriceSeries, fit: LpplsFit, cfg: FilterConditions):
        self.series, self.fit, self.cfg = series, fit, cfg
        self._res = None

    def _residuals(self):
        if self._res is None:
            self._res = residuals(self.series, self.fit)
        return self._res

    def m_range(self):
        return _in_range("m_range", self.fit.nonlinear.m, *self.cfg.m_range)

    def omega_range(self):
        return _in_range("omega_range", self.fit.nonlinear.omega, *self.cfg.omega_range)

    def tc_range(self):
        return _in_range("tc_range", self.fit.nonlinear.tc, *self.cfg.tc_range(self.fit.t1, self.fit.t2))

    def oscillations(self):
        thr = self.cfg.min_oscillations
        try:
            n = oscillation_count(self.fit, self.cfg.oscillation_convention)
        except ValueError as exc:
            return ConditionResult("oscillations", math.nan, thr, False, str(exc))
        return ConditionResult("oscillations", n, thr, n >= thr)

    def max_rel_error(self):
        e = max_relative_error(self.series, self.fit)
        return ConditionResult("max_rel_error", e, self.cfg.max_rel_error, e <= self.cfg.max_rel_error)

    def lomb(self):
        thr = self.cfg.alpha_sig
        try:
            x, r = stat_tests.detrended_residual(self.series, self.fit, abscissa=self.cfg.lomb_abscissa)
            res = stat_tests.lomb_test(x, r)
        except ValueError as exc:
            return ConditionResult("lomb", math.nan, thr, False, str(exc))
        return ConditionResult("lomb", res.p_value, thr, res.p_value <= thr)

    def _unit_root(self, name, test):
        level = self.cfg.unit_root_level
        res_ = self._residuals()
        try:
            res = test(res_)
        except ValueError as exc:
            return ConditionResult(name, math.nan, math.nan, False, str(exc))
        cv = stat_tests.critical_values(res.nobs)[stat_tests.LEVELS.index(level)]
        # residuals at round-off level of the log-prices: the fit is exact
        floor = ROUNDOFF_RESIDUAL * max(1.0, float(np.max(np.abs(self.series.window(self.fit.t1, self.fit.t2)))))
        if res.degenerate or float(np.max(np.abs(res_))) <= floor:
            return ConditionResult(name, res.statistic, cv, False, "degenerate residuals")
        return ConditionResult(name, res.statistic, cv, bool(res.statistic < cv))

    def dickey_fuller(self):
        return self._unit_root("dickey_fuller", stat_tests.dickey_fuller)

    def phillips_perron(self):
        return self._unit_root("phillips_perron", stat_tests.phillips_perron)


def qualify(series: PriceSeries, fit: LpplsFit, cfg: FilterConditions | None = None) -> FilterReport:
    """Evaluate every condition; the fit qualifies when all of them pass."""
    b = _Battery(series, fit, cfg or FilterConditions())
    conds = tuple(getattr(b, name)() for name in CONDITION_NAMES)
    return FilterReport(conds, all(c.passed for c in conds), fit.bubble_sign)


# cheapest first; the Lomb scan dominates the cost
_FAST_ORDER = ("m_range", "omega_range", "tc_range", "oscillations",
               "max_rel_error", "dickey_fuller", "phillips_perron", "lomb")


def is_qualified(series: PriceSeries, fit: LpplsFit, cfg: FilterConditions | None = None) -> bool:
    """Same verdict as ``qualify(...).qualified`` but stops at the first failure."""
    b = _Battery(series, fit, cfg or FilterConditions())
    return all(getattr(b, name)().passed for name in _FAST_ORDER)
