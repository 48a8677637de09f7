"""Synthetic inputs shared by the test modules."""
import datetime as dt
import math

import numpy as np

from lppls_ci.lppls import LinearParams, NonlinearParams, lppls_eval, synthesize
from lppls_ci.market_data import PriceSeries, weekday_calendar

# one line per acceptance criterion, printed at the end of the pytest run
ACCEPTANCE: list[str] = []

# log-price rise over a recovery window: ln(4.143), a 314% run-up
BUBBLE_RISE = float(np.log(4.143))
DAMPING_RATIO = 1.1


def bubble_params(rng, n, rise=BUBBLE_RISE, ratio=DAMPING_RATIO, t0=0,
                  m_range=(0.2, 0.8), omega_range=(5.0, 15.0), dtc_range=(10.0, 30.0)):
    """Random positive-bubble parameters whose critical time lies dtc after t0 + n - 1.

    B is set so the power law accounts for ``rise`` between t0 and tc; the
    oscillation amplitude sits at damping ratio ``ratio``.
    """
    m = rng.uniform(*m_range)
    w = rng.uniform(*omega_range)
    dtc = rng.uniform(*dtc_range)
    phi = rng.uniform(0, 2 * np.pi)
    tc = t0 + n - 1 + dtc
    b = -rise / (tc - t0) ** m
    c = m * abs(b) / (w * ratio)
    p = NonlinearParams(tc, m, w)
    q = LinearParams(np.log(100.0) + rise, b, c * np.cos(phi), c * np.sin(phi))
    return p, q


def recovery_case(seed, n=400, noise=0.01):
    """Bubble used for parameter-recovery checks: parameters and noisy prices."""
    p, q = bubble_params(np.random.default_rng(1000 + seed), n)
    return p, q, synthesize(p, q, n, noise, seed)


def gbm_series(seed, n=1500, mu=0.05, sigma=0.20, start=dt.date(2000, 1, 3)):
    """Geometric Brownian motion with annualised drift/volatility, 252 days a year."""
    rng = np.random.default_rng(seed)
    m, s = mu / 252, sigma / np.sqrt(252)
    lp = np.log(100.0) + np.cumsum(rng.normal(m - 0.5 * s * s, s, n))
    return PriceSeries(weekday_calendar(start, n), np.exp(lp))


def episode_series(seed=0, n=2000, k=1400, length=500, dtc=10.0, m=0.5, omega=9.0,
                   crash=0.25, sigma=0.01, start=dt.date(2000, 1, 3)):
    """Random walk with one positive bubble on [k - length, k] followed by a crash.

    Inside the bubble the log-price follows an LPPLS path (critical time
    k + dtc) plus white noise of size ``sigma``; outside it moves as a
    driftless random walk with daily volatility ``sigma``. Returns the series
    and the true critical time.
    """
    rng = np.random.default_rng(seed)
    t0 = k - length
    tc = k + dtc
    b = -BUBBLE_RISE / (tc - t0) ** m
    c = m * abs(b) / (omega * DAMPING_RATIO)
    phi = rng.uniform(0, 2 * np.pi)
    lp = np.empty(n)
    lp[: t0 + 1] = np.log(100.0) + np.concatenate([[0.0], np.cumsum(rng.normal(0, sigma, t0))])
    p = NonlinearParams(tc, m, omega)
    q = LinearParams(0.0, b, c * np.cos(phi), c * np.sin(phi))
    path = lppls_eval(p, q, np.arange(t0, k + 1))
    lp[t0: k + 1] = lp[t0] + path - path[0] + np.r_[0.0, rng.normal(0, sigma, length)]
    drop = np.linspace(0, -crash, 11)[1:]
    lp[k + 1: k + 11] = lp[k] + drop + rng.normal(0, sigma, 10)
    lp[k + 11:] = lp[k + 10] + np.cumsum(rng.normal(0, sigma, n - k - 11))
    return PriceSeries(weekday_calendar(start, n), np.exp(lp)), tc


# -- filter cases: a base fit passing every condition and one-condition flips --

FLIP_N = 400
FLIP_BASE = NonlinearParams(420.0, 0.5, 9.0)


def flip_series(p, noise, rise=math.log(4.0), ratio=1.1, phi=0.7, scale=100.0):
    """LPPLS prices on t = 0..FLIP_N-1 with additive log-price ``noise``."""
    b = -rise / p.tc ** p.m
    c = p.m * abs(b) / (p.omega * ratio)
    q = LinearParams(math.log(scale) + rise, b, c * math.cos(phi), c * math.sin(phi))
    lp = lppls_eval(p, q, np.arange(FLIP_N))
    return PriceSeries(weekday_calendar(dt.date(2000, 1, 3), FLIP_N), np.exp(lp + noise))


def flip_white(seed=0, sigma=0.01):
    return sigma * np.random.default_rng(seed).standard_normal(FLIP_N)


def integrated_ma(seed, ma, scale=0.002):
    """Random walk whose increments are MA(1)."""
    e = np.random.default_rng(seed).standard_normal(FLIP_N + 1)
    return scale * np.cumsum(e[1:] + ma * e[:-1])


def _spike():
    x = flip_white()
    x[0] += 0.2
    return x


def filter_flip_cases():
    """name -> (nonlinear params, noise factory, flip_series kwargs).

    Fitting the window [0, FLIP_N - 1] at those parameters fails exactly the
    named condition. The unit-root cases use seeds where one test rejects the
    unit root and the other does not.
    """
    return {
        "m_range": (NonlinearParams(420.0, 0.995, 9.0), flip_white, {}),
        "omega_range": (NonlinearParams(420.0, 0.5, 26.0), flip_white, {}),
        "tc_range": (NonlinearParams(490.0, 0.5, 12.0), flip_white, {}),
        "oscillations": (NonlinearParams(420.0, 0.5, 4.0), flip_white, {}),
        "max_rel_error": (FLIP_BASE, _spike, {}),
        "lomb": (FLIP_BASE, flip_white, {"ratio": 1e9}),
        "dickey_fuller": (FLIP_BASE, lambda: integrated_ma(3, 0.5), {}),
        "phillips_perron": (FLIP_BASE, lambda: integrated_ma(4, -0.5), {}),
    }


RECOVERY_COLUMNS = ("seed", "tc_true", "m_true", "omega_true", "tc", "m", "omega", "rss", "recovered")


def recovery_row(seed):
    """Calibrate one recovery case on its full window; a CSV row of strings."""
    from lppls_ci.calibrator import CalibrationConfig, calibrate
    p, _, s = recovery_case(seed)
    fit = calibrate(s, (0, len(s) - 1), cfg=CalibrationConfig(seed=seed))
    if not fit:
        return [str(seed), repr(p.tc), repr(p.m), repr(p.omega), "", "", "", "", "False"]
    f = fit.nonlinear
    ok = abs(f.tc - p.tc) <= 3 and abs(f.m - p.m) <= 0.1 and abs(f.omega - p.omega) <= 1.0
    return [str(seed), repr(p.tc), repr(p.m), repr(p.omega), repr(f.tc), repr(f.m), repr(f.omega),
            repr(fit.rss), str(ok)]
