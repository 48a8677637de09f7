"""Command-line interface: ``lppls-ci {fit,scan,postmortem,synth}``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 calibration found no feasible fit (``fit`` only).
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import indicator, lppls, market_data, postmortem, stat_tests
from .calibrator import CalibrationConfig, SearchSpace, calibrate
from .indicator import ScanConfig, WindowSchedule
from .lppls import LinearParams, NonlinearParams
from .market_data import DataError
from .qualifiers import FilterConditions, qualify

log = logging.getLogger("lppls_ci")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NOFIT = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str | None = None
    date_column: str = "date"
    price_column: str = "close"
    date_format: str | None = None


@dataclass
class ScheduleConfig:
    """Window schedule; t2_start / t2_end accept an index or an ISO date."""

    dt_max: int = 750
    dt_min: int = 50
    dt_step: int = 5
    t2_step: int = 5
    t2_start: int | str | None = None
    t2_end: int | str | None = None


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    search: SearchSpace = field(default_factory=SearchSpace)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    filters: FilterConditions = field(default_factory=FilterConditions)
    output_dir: str = "lppls_out"
    seed: int = 0
    parallelism: int = 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return _plain(d)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, dt.date):
        return x.isoformat()
    return x


_SECTIONS = {"data": DataConfig, "schedule": ScheduleConfig, "search": SearchSpace,
             "calibration": CalibrationConfig, "filters": FilterConditions}


def _section(cls, values: dict, name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(sorted(unknown))}")
    vals = {}
    for k, v in values.items():
        if isinstance(v, list):
            v = tuple(v)
        if isinstance(v, dt.date):
            v = v.isoformat()
        vals[k] = v
    try:
        return cls(**vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def config_from_dict(doc: dict | None) -> RunConfig:
    doc = dict(doc or {})
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in doc:
            kwargs[name] = _section(cls, doc.pop(name) or {}, name)
    for key in ("output_dir", "seed", "parallelism"):
        if key in doc:
            kwargs[key] = doc.pop(key)
    if doc:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(doc))}")
    cfg = RunConfig(**kwargs)
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not isinstance(cfg.parallelism, int) or cfg.parallelism < 1:
        raise ConfigError("parallelism must be a positive integer")
    return cfg


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError("config file must contain a mapping")
    return config_from_dict(doc)


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    data = cfg.data
    for attr in ("date_column", "price_column", "date_format"):
        v = getattr(args, attr, None)
        if v is not None:
            data = dataclasses.replace(data, **{attr: v})
    if getattr(args, "data", None) is not None:
        data = dataclasses.replace(data, path=args.data)
    cfg = dataclasses.replace(cfg, data=data)
    sched = cfg.schedule
    for attr in ("t2_start", "t2_end"):
        v = getattr(args, attr, None)
        if v is not None:
            sched = dataclasses.replace(sched, **{attr: v})
    cfg = dataclasses.replace(cfg, schedule=sched)
    for attr in ("output_dir", "seed", "parallelism"):
        v = getattr(args, attr, None)
        if v is not None:
            cfg = dataclasses.replace(cfg, **{attr: v})
    return config_from_dict(cfg.to_dict())


def dump_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True, default_flow_style=False)


def load_series(cfg: RunConfig) -> market_data.PriceSeries:
    if not cfg.data.path:
        raise ConfigError("no data file given (--data or data.path)")
    return market_data.load_csv(cfg.data.path, cfg.data.date_column, cfg.data.price_column,
                                cfg.data.date_format)


def _resolve_index(series, v, name: str) -> int | None:
    if v is None:
        return None
    if isinstance(v, int):
        if not 0 <= v < len(series):
            raise ConfigError(f"{name}={v} outside the series (length {len(series)})")
        return v
    try:
        d = dt.date.fromisoformat(str(v))
    except ValueError as exc:
        raise ConfigError(f"{name} must be an index or ISO date, got {v!r}") from exc
    try:
        return series.index_on_or_before(d)
    except (KeyError, IndexError, ValueError) as exc:
        raise ConfigError(f"{name}={d} precedes the first observation") from exc


def scan_config(cfg: RunConfig, series) -> ScanConfig:
    s = cfg.schedule
    try:
        schedule = WindowSchedule(s.dt_max, s.dt_min, s.dt_step, s.t2_step,
                                  _resolve_index(series, s.t2_start, "t2_start"),
                                  _resolve_index(series, s.t2_end, "t2_end"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return ScanConfig(schedule, cfg.search, cfg.calibration, cfg.filters, cfg.seed)


def _parse_date(s: str) -> dt.date:
    try:
        return dt.date.fromisoformat(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {s!r}") from None


def _date_or_index(s: str):
    return int(s) if s.lstrip("-").isdigit() else _parse_date(s).isoformat()


def _write_json(doc, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1, allow_nan=False)
        fh.write("\n")


def _finite(x):
    x = float(x)
    return x if np.isfinite(x) else None


def cmd_fit(args, cfg: RunConfig) -> int:
    series = load_series(cfg)
    try:
        t1 = series.index_on_or_before(args.t1) if args.t1 >= series.dates[0] else -1
        t2 = series.index_on_or_before(args.t2)
    except (KeyError, IndexError, ValueError) as exc:
        raise ConfigError(f"window dates outside the series: {exc}") from exc
    if t1 < 0 or not t1 < t2:
        raise ConfigError(f"need t1 < t2 inside the series, got {args.t1} .. {args.t2}")
    try:
        ccfg = dataclasses.replace(cfg.calibration, seed=cfg.seed)
        fit = calibrate(series, (t1, t2), cfg.search, ccfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = args.out or os.path.join(cfg.output_dir, "fit.json")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    window = {"t1": t1, "t2": t2, "date_t1": series.date_of(t1).isoformat(),
              "date_t2": series.date_of(t2).isoformat()}
    if not fit:
        _write_json({"status": "no_fit", "window": window, "reason": fit.reason,
                     "evaluations": fit.evaluations}, out)
        print(f"no feasible fit on {window['date_t1']}..{window['date_t2']}: {fit.reason}")
        return EXIT_NOFIT
    report = qualify(series, fit, cfg.filters)
    t = np.arange(t1, t2 + 1)
    fitted = lppls.fitted_log_prices(fit)
    x, r = stat_tests.detrended_residual(series, fit, abscissa=cfg.filters.lomb_abscissa)
    doc = {
        "status": "ok",
        "window": window,
        "fit": indicator.fit_record(series, fit),
        "report": report.to_dict(),
        "curve": [{"date": series.date_of(int(i)).isoformat(), "log_price": float(series.log_price(int(i))),
                   "fitted_log_price": float(f)} for i, f in zip(t, fitted)],
        "detrended_residual": [{"date": series.date_of(int(i)).isoformat(), "x": float(a), "r": float(b)}
                               for i, a, b in zip(t, x, r)],
    }
    _write_json(json.loads(json.dumps(doc, default=_finite)), out)
    p = fit.nonlinear
    print(f"tc={p.tc:.2f} ({series.date_at(p.tc)}) m={p.m:.4f} omega={p.omega:.4f} "
          f"rss={fit.rss:.6g} qualified={report.qualified} sign={fit.bubble_sign}")
    return EXIT_OK


def cmd_scan(args, cfg: RunConfig) -> int:
    series = load_series(cfg)
    scfg = scan_config(cfg, series)
    try:
        lattice = indicator.build_schedule(series, scfg.schedule)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    dump_config(cfg, os.path.join(out, "resolved_config.yaml"))
    ckpt = args.checkpoint or os.path.join(out, "checkpoint.jsonl")
    if args.fresh and os.path.exists(ckpt):
        os.remove(ckpt)
    log.info("scanning %d t2 values, %d windows", len(lattice.t2_values), lattice.n_windows)
    t0 = time.perf_counter()
    res = indicator.scan(series, scfg, cfg.parallelism, checkpoint=ckpt,
                         progress=lambda p: log.debug("t2=%s pos=%.3f neg=%.3f", p.date,
                                                      p.positive_confidence, p.negative_confidence))
    indicator.write_indicator_csv(res.points, os.path.join(out, "indicator.csv"))
    meta = {"t2_first": series.date_of(lattice.t2_values[0]).isoformat(),
            "t2_last": series.date_of(lattice.t2_values[-1]).isoformat(),
            "windows_per_t2": scfg.schedule.windows_per_t2,
            "calendar_note": "t2 values are anchored at the last t2 and step back; counts depend "
                             "on the trading calendar of the input"}
    indicator.write_fits_json(res, os.path.join(out, "fits.json"), meta)
    elapsed = time.perf_counter() - t0
    pos = max(p.positive_confidence for p in res.points)
    neg = max(p.negative_confidence for p in res.points)
    print(f"{len(res.points)} t2 values, {res.n_windows} windows, {len(res.fits)} qualified fits, "
          f"{sum(p.n_failed for p in res.points)} failed; max positive {pos:.3f}, max negative {neg:.3f}; "
          f"{res.resumed_t2} t2 from checkpoint; {elapsed:.1f}s")
    return EXIT_OK


def cmd_postmortem(args, cfg: RunConfig) -> int:
    series = load_series(cfg)
    fits_path = args.fits or os.path.join(cfg.output_dir, "fits.json")
    if not os.path.exists(fits_path):
        raise DataError(f"scan output {fits_path} not found; run 'scan' first")
    try:
        doc = indicator.read_fits_json(fits_path)
        records = doc["fits"]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read scan output {fits_path}: {exc}") from exc
    sign = None if args.sign == "both" else args.sign
    try:
        fits = postmortem.collect_fits(records, (args.start, args.end), series, sign)
    except (KeyError, IndexError, ValueError) as exc:
        raise ConfigError(f"invalid episode: {exc}") from exc
    pm = postmortem.analyse(series, fits, cfg.filters.tc_frac)
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    for method in postmortem.METHODS:
        postmortem.write_density_csv(pm, method, os.path.join(out, f"density_{method}.csv"), series)
    summ = postmortem.summary(pm, (args.start.isoformat(), args.end.isoformat()))
    summ["sign"] = args.sign
    postmortem.write_summary_json(summ, os.path.join(out, "postmortem_summary.json"))
    if pm.empty:
        print("no qualified fits in the episode")
    else:
        q = summ["tc_histogram"]["q20_80"]
        print(f"{len(fits)} fits; tc 20%-80% range {q[0]} .. {q[1]}")
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    try:
        p = NonlinearParams(args.tc, args.m, args.omega)
        q = LinearParams(args.A, args.B, args.C1, args.C2)
        series = lppls.synthesize(p, q, args.n, args.noise, args.seed, args.start)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    market_data.write_csv(series, args.out)
    print(f"wrote {len(series)} rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lppls-ci", description="LPPLS bubble fits, confidence indicators and post-mortem densities.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="YAML run configuration")
        if data:
            p.add_argument("--data", help="price CSV (overrides data.path)")
            p.add_argument("--date-column", dest="date_column")
            p.add_argument("--price-column", dest="price_column")
            p.add_argument("--date-format", dest="date_format")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("fit", help="calibrate and qualify one window")
    common(p)
    p.add_argument("--t1", type=_parse_date, required=True)
    p.add_argument("--t2", type=_parse_date, required=True)
    p.add_argument("--out", help="output JSON (default <output_dir>/fit.json)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("scan", help="confidence indicators over a range of t2")
    common(p)
    p.add_argument("--parallelism", "-j", type=int)
    p.add_argument("--t2-start", dest="t2_start", type=_date_or_index)
    p.add_argument("--t2-end", dest="t2_end", type=_date_or_index)
    p.add_argument("--checkpoint", help="checkpoint file (default <output_dir>/checkpoint.jsonl)")
    p.add_argument("--fresh", action="store_true", help="discard an existing checkpoint")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("postmortem", help="t1 / tc densities for one episode")
    common(p)
    p.add_argument("--fits", help="fits JSON from scan (default <output_dir>/fits.json)")
    p.add_argument("--start", type=_parse_date, required=True, help="first t2 of the episode")
    p.add_argument("--end", type=_parse_date, required=True, help="last t2 of the episode")
    p.add_argument("--sign", choices=("positive", "negative", "both"), default="positive")
    p.set_defaults(func=cmd_postmortem)

    p = sub.add_parser("synth", help="write a synthetic LPPLS price series")
    common(p, data=False)
    p.add_argument("--tc", type=float, required=True)
    p.add_argument("--m", type=float, required=True)
    p.add_argument("--omega", type=float, required=True)
    p.add_argument("--A", type=float, required=True)
    p.add_argument("--B", type=float, required=True)
    p.add_argument("--C1", type=float, required=True)
    p.add_argument("--C2", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--start", type=_parse_date, default=dt.date(2000, 1, 3))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "synth":
            args.seed = cfg.seed if args.seed is None else args.seed
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
