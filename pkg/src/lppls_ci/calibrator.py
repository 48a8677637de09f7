"""Window calibration: CMA-ES over (tc, m, omega) with restarts."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .lppls import COND_MAX, LinearParams, LpplsFit, NonlinearParams
from .market_data import PriceSeries

MIN_WINDOW = 30


@dataclass(frozen=True)
class SearchSpace:
    """Box for (m, omega) plus tc in [t2, t2 + tc_frac * (t2 - t1)], and the damping floor."""

    m_range: tuple[float, float] = (0.0, 1.0)
    omega_range: tuple[float, float] = (1.0, 50.0)
    tc_frac: float = 1.0 / 3.0
    damping_min: float = 1.0

    def __post_init__(self) -> None:
        for name in ("m_range", "omega_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be increasing, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.omega_range[0] < 0:
            raise ValueError("omega_range must be non-negative")
        if not self.tc_frac > 0:
            raise ValueError("tc_frac must be positive")

    def tc_range(self, t1: int, t2: int) -> tuple[float, float]:
        return float(t2), t2 + self.tc_frac * (t2 - t1)

    def bounds(self, t1: int, t2: int) -> tuple[np.ndarray, np.ndarray]:
        """Lower bounds and spans of (tc, m, omega), tc relative to t1.

        The tc floor sits ``MIN_DT`` past t2 so every candidate is strictly
        after the last sample.
        """
        tlo, thi = self.tc_range(t1, t2)
        tlo += _kernels.MIN_DT
        lo = np.array([tlo - t1, self.m_range[0], self.omega_range[0]])
        span = np.array([thi - tlo, self.m_range[1] - self.m_range[0],
                         self.omega_range[1] - self.omega_range[0]])
        return lo, span


@dataclass(frozen=True)
class CalibrationConfig:
    """CMA-ES settings.

    ``initial_sigma`` is relative to the unit cube the box is mapped onto.
    ``tol_x`` (unit-cube step size) and ``tol_fun`` (fitness spread relative
    to the window's total sum of squares) end a run early.
    """

    population_size: int = 7
    max_evaluations: int = 2000
    restarts: int = 3
    seed: int = 0
    initial_sigma: float = 0.3
    tol_x: float = 1e-7
    tol_fun: float = 1e-12

    def __post_init__(self) -> None:
        if self.population_size < 4:
            raise ValueError("population_size must be >= 4")
        if self.max_evaluations < self.population_size:
            raise ValueError("max_evaluations must cover at least one generation")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if not 0 < self.initial_sigma <= 1:
            raise ValueError("initial_sigma must lie in (0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class NoFit:
    """Calibration produced no feasible candidate."""

    t1: int
    t2: int
    reason: str
    evaluations: int = 0

    def __bool__(self) -> bool:
        return False


@dataclass
class RunResult:
    """Outcome of a single CMA-ES run (one restart)."""

    rss: float
    params: NonlinearParams | None
    linear: LinearParams | None
    evaluations: int
    generations: int
    trace: np.ndarray = field(repr=False)


def feasibility_penalty(p: NonlinearParams, q: LinearParams, space: SearchSpace,
                        window: tuple[int, int] | None = None, scale: float = 1.0) -> float:
    """Zero inside the feasible set, else ``scale`` times the total violation.

    Box excursions are measured as fractions of each range; the damping
    shortfall as (damping_min - ratio) / damping_min. The tc box is only
    checked when ``window`` is given.
    """
    v = 0.0
    for x, (lo, hi) in ((p.m, space.m_range), (p.omega, space.omega_range)):
        width = hi - lo
        v += max(0.0, lo - x) / width + max(0.0, x - hi) / width
    if window is not None:
        lo, hi = space.tc_range(*window)
        v += max(0.0, lo - p.tc) / (hi - lo) + max(0.0, p.tc - hi) / (hi - lo)
    v += _kernels.damping_violation(p.m, p.omega, q.B, q.C1, q.C2, space.damping_min)
    return scale * v


def damping_ratio(p: NonlinearParams, q: LinearParams) -> float:
    den = p.omega * q.C
    num = p.m * abs(q.B)
    if den == 0.0:
        return math.inf if num > 0 else math.nan
    return num / den


def restart_seed(seed: int, restart: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(restart)])


def _prepare(series: PriceSeries, window: tuple[int, int]) -> np.ndarray:
    t1, t2 = int(window[0]), int(window[1])
    if not t1 < t2:
        raise ValueError(f"window must have t1 < t2, got {window}")
    if t2 - t1 + 1 < MIN_WINDOW:
        raise ValueError(f"window has {t2 - t1 + 1} points; at least {MIN_WINDOW} required")
    return np.ascontiguousarray(series.window(t1, t2))


def run_restart(series: PriceSeries, window: tuple[int, int], space: SearchSpace,
                cfg: CalibrationConfig, restart: int) -> RunResult:
    """Run the CMA-ES restart number ``restart`` of :func:`calibrate` on its own."""
    y = _prepare(series, window)
    return _run(y, window, space, cfg, restart)


def _run(y: np.ndarray, window, space: SearchSpace, cfg: CalibrationConfig, restart: int) -> RunResult:
    t1, t2 = int(window[0]), int(window[1])
    lo, span = space.bounds(t1, t2)
    tss = float(np.sum((y - y.mean()) ** 2))
    lam = cfg.population_size
    n_gen = cfg.max_evaluations // lam
    z = np.random.default_rng(restart_seed(cfg.seed, restart)).standard_normal((n_gen, lam, 3))
    best_u = np.full(3, np.inf)
    best_coef = np.zeros(4)
    trace = np.empty(n_gen)
    rss, evals, gens = _kernels.cmaes_run(
        y, lo, span, space.damping_min, tss, COND_MAX, z, cfg.initial_sigma,
        cfg.max_evaluations, cfg.tol_x, cfg.tol_fun * tss, best_u, best_coef, trace)
    if not np.isfinite(rss):
        return RunResult(math.inf, None, None, int(evals), int(gens), trace[:gens])
    x = lo + best_u * span
    p = NonlinearParams(float(x[0] + t1), float(x[1]), float(x[2]))
    return RunResult(float(rss), p, LinearParams(*map(float, best_coef)), int(evals), int(gens), trace[:gens])


def calibrate(series: PriceSeries, window: tuple[int, int], space: SearchSpace | None = None,
              cfg: CalibrationConfig | None = None) -> LpplsFit | NoFit:
    """Best feasible LPPLS fit of ``series`` on the closed index range ``window``.

    Runs ``cfg.restarts`` independent CMA-ES runs (restart r draws from
    ``SeedSequence([cfg.seed, r])``) and keeps the lowest rss, ties going to
    the smaller tc. Damping is steered by a penalty during the search and
    enforced exactly on the result; when no run ever evaluated a feasible
    point the result is a :class:`NoFit`.
    """
    space = space or SearchSpace()
    cfg = cfg or CalibrationConfig()
    y = _prepare(series, window)
    t1, t2 = int(window[0]), int(window[1])
    if np.ptp(y) == 0.0:
        return NoFit(t1, t2, "degenerate series: constant prices")
    best: RunResult | None = None
    evals = 0
    for r in range(cfg.restarts):
        res = _run(y, window, space, cfg, r)
        evals += res.evaluations
        if res.params is None:
            continue
        if (best is None or res.rss < best.rss
                or (res.rss == best.rss and res.params.tc < best.params.tc)):
            best = res
    if best is None:
        return NoFit(t1, t2, "no feasible candidate (damping or singular basis)", evals)
    fit = LpplsFit(best.params, best.linear, t1, t2, best.rss)
    if not _satisfies_space(fit, space):
        return NoFit(t1, t2, "best candidate violates the search space", evals)
    return fit


def _satisfies_space(fit: LpplsFit, space: SearchSpace) -> bool:
    p = fit.nonlinear
    tlo, thi = space.tc_range(fit.t1, fit.t2)
    return (space.m_range[0] <= p.m <= space.m_range[1]
            and space.omega_range[0] <= p.omega <= space.omega_range[1]
            and tlo <= p.tc <= thi
            and _kernels.damping_violation(p.m, p.omega, fit.linear.B, fit.linear.C1,
                                           fit.linear.C2, space.damping_min) == 0.0)
