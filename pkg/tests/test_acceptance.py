"""Acceptance criteria, one test per criterion.

Each test appends a PASS/FAIL line to ``helpers.ACCEPTANCE``; conftest prints
them at the end of the run. Criteria 5 and 6 scan full series and take hours
on a single core; criterion 7 needs a CSI 300 CSV named by the
``LPPLS_CSI300_CSV`` environment variable and is skipped without one.
"""
import csv
import datetime as dt
import io
import multiprocessing as mp
import os
import time

import numpy as np
import pytest

from helpers import (ACCEPTANCE, FLIP_N, RECOVERY_COLUMNS, episode_series, filter_flip_cases, flip_series,
                     gbm_series, recovery_row)
from lppls_ci import market_data
from lppls_ci.indicator import ScanConfig, WindowSchedule, build_schedule, scan, write_indicator_csv
from lppls_ci.lppls import make_fit
from lppls_ci.postmortem import collect_fits, density, quantile_range
from lppls_ci.qualifiers import CONDITION_NAMES, qualify
from lppls_ci.stat_tests import dickey_fuller, lomb_test, phillips_perron

CPUS = os.cpu_count() or 1


def record(n, passed, detail):
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    line = f"criterion {n}: {status} | {detail}"
    ACCEPTANCE.append(line)
    print(line)


def _csv_bytes(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode()


def _indicator_bytes(points, tmp_path, name):
    path = tmp_path / name
    write_indicator_csv(points, path)
    return path.read_bytes()


# -- 1: lattice counts ---------------------------------------------------------

def test_criterion_1_window_lattice():
    t = time.perf_counter()
    per_t2 = WindowSchedule().windows_per_t2
    # 638 t2 in steps of 5 ending at the last index 3938 start at index 753
    lat = build_schedule(3939, WindowSchedule(t2_start=753))
    elapsed = time.perf_counter() - t
    n_t2, n_win = len(lat.t2_values), lat.n_windows
    ok = per_t2 == 141 and abs(n_t2 - 638) <= 2 and n_win == 141 * n_t2 and elapsed < 1.0
    record(1, ok, f"{per_t2} windows per t2; {n_t2} t2 (first index {lat.t2_values[0]}, anchored at the "
                  f"last index {lat.t2_values[-1]}), {n_win} windows; {elapsed * 1e3:.1f} ms")
    assert per_t2 == 141
    assert abs(n_t2 - 638) <= 2 and n_win == 141 * n_t2
    assert elapsed < 1.0


# -- 2: synthetic recovery ------------------------------------------------------

def _recovery_rows(parallelism):
    if parallelism == 1:
        return [recovery_row(s) for s in range(20)]
    with mp.get_context("fork").Pool(parallelism) as pool:
        return list(pool.imap(recovery_row, range(20)))


@pytest.fixture(scope="module")
def recovery():
    t = time.perf_counter()
    rows = _recovery_rows(1)
    return rows, time.perf_counter() - t


def test_criterion_2_synthetic_recovery(recovery):
    rows, elapsed = recovery
    hits = sum(r[-1] == "True" for r in rows)
    missed = [r[0] for r in rows if r[-1] != "True"]
    ok = hits >= 18 and elapsed < 300
    record(2, ok, f"{hits}/20 recovered (tc +-3, m +-0.1, omega +-1.0); missed seeds {missed}; {elapsed:.1f} s")
    assert hits >= 18
    assert elapsed < 300


# -- 3: filter battery ------------------------------------------------------------

def test_criterion_3_filter_battery():
    t = time.perf_counter()
    flips = filter_flip_cases()
    results = {}
    for name in CONDITION_NAMES:
        p, noise, kw = flips[name]
        s = flip_series(p, noise(), **kw)
        rep = qualify(s, make_fit(s, (0, FLIP_N - 1), p))
        results[name] = rep.failed
    good = [n for n in CONDITION_NAMES if results[n] == (n,)]
    elapsed = time.perf_counter() - t
    ok = len(good) == 8 and elapsed < 60
    bad = {n: results[n] for n in CONDITION_NAMES if n not in good}
    record(3, ok, f"{len(good)}/8 cases fail exactly their own condition{'' if not bad else f'; off: {bad}'}; "
                  f"{elapsed:.1f} s")
    assert len(good) == 8
    assert elapsed < 60


# -- 4: statistical-test calibration ------------------------------------------------

def _ar1(phi, seed, n=300):
    e = np.random.default_rng(seed).standard_normal(n)
    x = np.zeros(n)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    return x


def test_criterion_4_statistical_tests():
    t = time.perf_counter()
    rates = {}
    for label, phi in (("random walk", 1.0), ("AR(0.5)", 0.5)):
        df = pp = 0
        for s in range(500):
            y = _ar1(phi, s)
            df += dickey_fuller(y).rejects_unit_root
            pp += phillips_perron(y).rejects_unit_root
        rates[label] = (df / 500, pp / 500)
    lomb = {}
    for label, x in (("log-time", np.log(np.arange(200)[::-1] + 15.0)), ("even", np.arange(200.0))):
        p = [lomb_test(x, np.random.default_rng(s).standard_normal(len(x))).p_value for s in range(500)]
        lomb[label] = float(np.mean(np.array(p) <= 0.05))
    elapsed = time.perf_counter() - t
    ok_rw = max(rates["random walk"]) <= 0.15
    ok_ar = min(rates["AR(0.5)"]) >= 0.95
    ok_lomb = all(abs(v - 0.05) <= 0.03 for v in lomb.values())
    ok = ok_rw and ok_ar and ok_lomb and elapsed < 120
    record(4, ok, f"random walk rejected DF {rates['random walk'][0]:.3f} PP {rates['random walk'][1]:.3f}; "
                  f"AR(0.5) rejected DF {rates['AR(0.5)'][0]:.3f} PP {rates['AR(0.5)'][1]:.3f}; "
                  f"Lomb P(p<=0.05) " + ", ".join(f"{k} {v:.3f}" for k, v in lomb.items())
                  + f"; {elapsed:.1f} s")
    assert ok_rw and ok_ar and ok_lomb
    assert elapsed < 120


# -- 5: false positives on geometric Brownian motion ----------------------------------

def test_criterion_5_false_positive_control():
    # series are scanned until the verdict is settled: 19 clean passes, 2 dirty fail
    workers = min(8, CPUS)
    t = time.perf_counter()
    clean, worst = 0, []
    for seed in range(20):
        res = scan(gbm_series(seed), ScanConfig(seed=seed), parallelism=workers)
        pos = max(p.positive_confidence for p in res.points)
        neg = max(p.negative_confidence for p in res.points)
        worst.append((seed, round(pos, 3), round(neg, 3)))
        clean += pos < 0.05 and neg < 0.05
        if clean >= 19 or len(worst) - clean >= 2:
            break
    elapsed = time.perf_counter() - t
    dirty = [w for w in worst if max(w[1:]) >= 0.05]
    runtime_ok = elapsed < 1800 or CPUS < 8
    ok = clean >= 19 and runtime_ok
    record(5, ok, f"{clean} of {len(worst)} scanned series below 0.05 at every t2 (need 19/20); "
                  f"(seed, max pos, max neg) over: {dirty}; {elapsed / 60:.1f} min with {workers} worker(s) "
                  f"on {CPUS} CPU(s)")
    assert clean >= 19
    assert runtime_ok


# -- 6: end-to-end episode detection ---------------------------------------------------

EPISODE_K = 1400


@pytest.fixture(scope="module")
def episode():
    series, tc = episode_series(k=EPISODE_K)
    t = time.perf_counter()
    res = scan(series, ScanConfig(seed=0), parallelism=1)
    return series, tc, res, time.perf_counter() - t


def _cluster(points, i, level):
    """Contiguous run of t2 around index i with positive confidence >= level."""
    lo = hi = i
    while lo > 0 and points[lo - 1].positive_confidence >= level:
        lo -= 1
    while hi + 1 < len(points) and points[hi + 1].positive_confidence >= level:
        hi += 1
    return points[lo].t2, points[hi].t2


def test_criterion_6_episode_detection(episode):
    series, tc, res, elapsed = episode
    conf = np.array([p.positive_confidence for p in res.points])
    i = int(np.argmax(conf))
    peak_t2 = res.points[i].t2
    episode_t2 = _cluster(res.points, i, 0.05)
    fits = collect_fits(res.fits, episode_t2, series)
    q20, q80 = quantile_range(density(fits, "tc", "histogram"), 0.2, 0.8)
    ok_peak = abs(peak_t2 - EPISODE_K) <= 20
    ok_tc = q20 <= tc <= q80
    ok = ok_peak and ok_tc and elapsed < 1800
    record(6, ok, f"peak positive confidence {conf[i]:.3f} at t2={peak_t2} (k={EPISODE_K}); episode t2 "
                  f"{episode_t2[0]}..{episode_t2[1]}, {len(fits)} fits, tc 20/80 range {q20}..{q80} "
                  f"(true tc {tc:g}); {elapsed / 60:.1f} min")
    assert ok_peak and ok_tc
    assert elapsed < 1800


# -- 7: historical reproduction (needs user data) -----------------------------------------

CSI300 = os.environ.get("LPPLS_CSI300_CSV")

POSITIVE = [("2007-01", "2007-10"), ("2009-03", "2009-08"), ("2014-11", "2015-01"), ("2015-04", "2015-06")]
NEGATIVE = [("2005-01", "2005-12"), ("2008-01", "2008-12"), ("2011-01", "2012-12"), ("2015-08", "2015-09")]
PAPER_TC = {
    "2007": (("2007-08-23", "2007-10-11"), ("2007-09-21", "2007-10-22")),
    "2015": (("2015-04-22", "2015-06-11"), ("2015-06-10", "2015-07-22")),
}


def _month_span(a, b, slack_days=31):
    lo = dt.date.fromisoformat(a + "-01") - dt.timedelta(days=slack_days)
    y, m = (int(v) for v in b.split("-"))
    end = dt.date(y + m // 12, m % 12 + 1, 1) - dt.timedelta(days=1)
    return lo, end + dt.timedelta(days=slack_days)


def _has_cluster(points, lo, hi, attr):
    """At least two consecutive t2 with non-zero confidence inside [lo, hi]."""
    vals = [getattr(p, attr) > 0 for p in points if lo <= p.date <= hi]
    return any(a and b for a, b in zip(vals, vals[1:])), max(
        [getattr(p, attr) for p in points if lo <= p.date <= hi], default=0.0)


def _overlap(ours, paper):
    a, b = max(ours[0], paper[0]), min(ours[1], paper[1])
    return max(0, (b - a).days) / max(1, (paper[1] - paper[0]).days)


@pytest.mark.slow
@pytest.mark.skipif(not CSI300, reason="set LPPLS_CSI300_CSV to a CSI 300 daily CSV (date, close)")
def test_criterion_7_historical_reproduction():
    series = market_data.load_csv(CSI300)
    start = series.index_on_or_before(dt.date(2005, 3, 1))
    if series.dates[start] < dt.date(2005, 3, 1):
        start += 1
    res = scan(series, ScanConfig(schedule=WindowSchedule(t2_start=start)), parallelism=CPUS)
    checks, notes = [], []
    for attr, spans in (("positive_confidence", POSITIVE), ("negative_confidence", NEGATIVE)):
        for a, b in spans:
            found, peak = _has_cluster(res.points, *_month_span(a, b), attr)
            if (a, attr) == ("2007-01", "positive_confidence"):
                found = found and peak >= 0.15
            checks.append(found)
            notes.append(f"{attr.split('_')[0]} {a}..{b} {'yes' if found else 'no'} (peak {peak:.2f})")
    for year, (t2_range, paper) in PAPER_TC.items():
        fits = collect_fits(res.fits, t2_range, series)
        if not fits:
            checks.append(False)
            notes.append(f"{year} post-mortem: no fits")
            continue
        q = quantile_range(density(fits, "tc", "histogram", series=series), 0.2, 0.8)
        frac = _overlap(q, tuple(dt.date.fromisoformat(d) for d in paper))
        checks.append(frac >= 0.5)
        notes.append(f"{year} tc 20/80 {q[0]}..{q[1]}: {len(fits)} fits, overlap {frac:.0%}")
    ok = all(checks)
    record(7, ok, "; ".join(notes))
    assert ok


def test_criterion_7_marker():
    if not CSI300:
        record(7, None, "no CSI 300 data (set LPPLS_CSI300_CSV); not evaluated")


# -- 8: determinism ---------------------------------------------------------------------

def test_criterion_8_determinism(recovery, episode, tmp_path):
    rows1, _ = recovery
    rows16 = _recovery_rows(16)
    same2 = _csv_bytes(rows1, RECOVERY_COLUMNS) == _csv_bytes(rows16, RECOVERY_COLUMNS)
    series, _, res1, _ = episode
    res16 = scan(series, ScanConfig(seed=0), parallelism=16)
    same6 = (_indicator_bytes(res1.points, tmp_path, "p1.csv")
             == _indicator_bytes(res16.points, tmp_path, "p16.csv"))
    ok = same2 and same6 and res1.fits == res16.fits
    record(8, ok, f"criterion-2 CSV identical at parallelism 1 and 16: {same2}; criterion-6 indicator CSV "
                  f"identical: {same6}")
    assert ok
