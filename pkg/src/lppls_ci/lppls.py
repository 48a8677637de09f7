"""LPPLS model: evaluation, linear sub-problem, residuals, synthetic data.

Times are trading-day ordinals of the series. The model for the expected
log-price is

    A + B (tc - t)^m + C1 (tc - t)^m cos(w ln(tc - t)) + C2 (tc - t)^m sin(w ln(tc - t))

with three nonlinear parameters (tc, m, w) and four linear ones.
"""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .market_data import PriceSeries, weekday_calendar

#: condition-number threshold on the (column-equilibrated) design matrix
COND_MAX = 1e12


class SingularSystemError(np.linalg.LinAlgError):
    """The linear sub-problem has a (numerically) rank-deficient basis."""


@dataclass(frozen=True)
class NonlinearParams:
    tc: float
    m: float
    omega: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.tc) and math.isfinite(self.m) and math.isfinite(self.omega)):
            raise ValueError(f"non-finite nonlinear parameters {self}")
        if self.omega < 0:
            raise ValueError(f"omega must be >= 0, got {self.omega}")


@dataclass(frozen=True)
class LinearParams:
    A: float
    B: float
    C1: float
    C2: float

    @property
    def C(self) -> float:
        """Oscillation amplitude sqrt(C1^2 + C2^2)."""
        return math.hypot(self.C1, self.C2)

    @property
    def phi(self) -> float:
        """Phase atan2(C2, C1), so that C1 = C cos(phi), C2 = C sin(phi)."""
        return math.atan2(self.C2, self.C1)


@dataclass(frozen=True)
class LpplsFit:
    nonlinear: NonlinearParams
    linear: LinearParams
    t1: int
    t2: int
    rss: float

    def __post_init__(self) -> None:
        if not self.t1 < self.t2:
            raise ValueError(f"window must have t1 < t2, got ({self.t1}, {self.t2})")

    @property
    def window(self) -> tuple[int, int]:
        return self.t1, self.t2

    @property
    def n_points(self) -> int:
        return self.t2 - self.t1 + 1

    @property
    def bubble_sign(self) -> str | None:
        """'positive' for B < 0 (accelerating rise), 'negative' for B > 0."""
        if self.linear.B < 0:
            return "positive"
        if self.linear.B > 0:
            return "negative"
        return None

    def to_dict(self) -> dict:
        d = {"t1": self.t1, "t2": self.t2, "rss": self.rss, "n_points": self.n_points}
        d.update(asdict(self.nonlinear))
        d.update(asdict(self.linear))
        d["C"] = self.linear.C
        d["phi"] = self.linear.phi
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LpplsFit":
        return cls(
            NonlinearParams(d["tc"], d["m"], d["omega"]),
            LinearParams(d["A"], d["B"], d["C1"], d["C2"]),
            int(d["t1"]), int(d["t2"]), float(d["rss"]),
        )


def _dt(tc: float, t) -> np.ndarray:
    return tc - np.asarray(t, dtype=float)


def lppls_eval(p: NonlinearParams, q: LinearParams, t):
    """Expected log-price at time(s) ``t``; requires t < tc."""
    d = _dt(p.tc, t)
    if np.any(d <= 0):
        raise ValueError(f"t must be strictly before tc={p.tc}")
    fm = np.power(d, p.m)
    ln = np.log(d)
    out = q.A + fm * (q.B + q.C1 * np.cos(p.omega * ln) + q.C2 * np.sin(p.omega * ln))
    return float(out) if np.ndim(out) == 0 else out


def lppls_eval_polar(p: NonlinearParams, A: float, B: float, C: float, phi: float, t):
    """The same curve written as A + B (tc-t)^m [1 + C' cos(w ln(tc-t) + phi)].

    Here ``C`` is the absolute amplitude sqrt(C1^2 + C2^2) of the cosine
    term (not relative to B), which is how :class:`LinearParams` reports it.
    """
    d = _dt(p.tc, t)
    if np.any(d <= 0):
        raise ValueError(f"t must be strictly before tc={p.tc}")
    fm = np.power(d, p.m)
    out = A + B * fm + C * fm * np.cos(p.omega * np.log(d) - phi)
    return float(out) if np.ndim(out) == 0 else out


def _window(series: PriceSeries, window: tuple[int, int]) -> tuple[int, int, np.ndarray]:
    t1, t2 = int(window[0]), int(window[1])
    if not t1 < t2:
        raise ValueError(f"window must have t1 < t2, got {window}")
    return t1, t2, series.window(t1, t2)


def _profile(y: np.ndarray, t1: int, p: NonlinearParams) -> tuple[float, LinearParams]:
    if len(y) < 4:
        raise ValueError("the linear sub-problem needs at least 4 points")
    if p.tc <= t1 + len(y) - 1:
        raise ValueError(f"tc={p.tc} must exceed the window end {t1 + len(y) - 1}")
    y = np.ascontiguousarray(y, dtype=float)
    work = np.empty((_kernels.N_WORK, len(y)))
    coef = np.empty(4)
    rss, cond = _kernels.lppls_cost(y, p.tc - t1, p.m, p.omega, work, coef)
    if not np.isfinite(rss) or not cond <= COND_MAX:
        raise SingularSystemError(
            f"degenerate LPPLS basis at {p} (condition estimate {cond:.3g})")
    return float(rss), LinearParams(*map(float, coef))


def solve_linear(series: PriceSeries, window: tuple[int, int], p: NonlinearParams) -> LinearParams:
    """Least-squares (A, B, C1, C2) for fixed (tc, m, omega) over ``window``.

    Raises :class:`SingularSystemError` when the basis is rank deficient.
    """
    t1, _, y = _window(series, window)
    return _profile(y, t1, p)[1]


def cost(series: PriceSeries, window: tuple[int, int], p: NonlinearParams) -> tuple[float, LinearParams]:
    """Residual sum of squares minimised over the linear parameters."""
    t1, _, y = _window(series, window)
    return _profile(y, t1, p)


def cost_or_inf(series: PriceSeries, window: tuple[int, int], p: NonlinearParams) -> float:
    """:func:`cost` with a singular basis mapped to +inf (optimiser sentinel)."""
    try:
        return cost(series, window, p)[0]
    except SingularSystemError:
        return math.inf


def fitted_log_prices(fit: LpplsFit) -> np.ndarray:
    return lppls_eval(fit.nonlinear, fit.linear, np.arange(fit.t1, fit.t2 + 1))


def residuals(series: PriceSeries, fit: LpplsFit) -> np.ndarray:
    """ln p_hat - ln p over the fit window, in time order."""
    return fitted_log_prices(fit) - series.window(fit.t1, fit.t2)


def make_fit(series: PriceSeries, window: tuple[int, int], p: NonlinearParams) -> LpplsFit:
    rss, q = cost(series, window, p)
    return LpplsFit(p, q, int(window[0]), int(window[1]), rss)


def synthesize(
    p: NonlinearParams,
    q: LinearParams,
    n: int,
    noise_sigma: float = 0.0,
    seed: int = 0,
    start: dt.date = dt.date(2000, 1, 3),
) -> PriceSeries:
    """Prices exp(LPPLS(t) + eps) for t = 0..n-1 on consecutive weekdays.

    eps is i.i.d. N(0, noise_sigma^2) from ``numpy.random.default_rng(seed)``.
    """
    if p.tc <= n - 1:
        raise ValueError(f"tc={p.tc} must exceed the last sample time {n - 1}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    logp = lppls_eval(p, q, np.arange(n, dtype=float))
    if noise_sigma > 0:
        logp = logp + np.random.default_rng(seed).normal(0.0, noise_sigma, n)
    return PriceSeries(weekday_calendar(start, n), np.exp(logp))
