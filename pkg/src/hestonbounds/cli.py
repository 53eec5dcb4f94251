"""Command-line pipeline: ingest price/variance data, estimate the model
and its uncertainty set, price quote panels three ways (analytic, formula
min/max, controlled bounds), and report coverage statistics.

Exit codes: 0 success, 1 input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from . import config as cfg
from .analytic import OptionSpec, formula_optimal_bounds, heston_price, implied_vol, to_zero_dividend_price
from .bsde import BsdeScheme, KnnSpec, MarsSpec, SchemeBase, SimConfig, ZSource, pricing_bounds
from .errors import InputError, NumericalError
from .estimate import VarianceSeries, confidence_ellipse, decimate, fit_mle, realized_correlation
from .model import HestonParams, ParamMapMode

DAYS_PER_YEAR = 365.25


@dataclass(frozen=True)
class QuoteRecord:
    date: dt.date
    strike: float
    expiry: dt.date
    bid: float
    ask: float
    rate: float
    dividend_yield: float
    spot: float
    v0: float

    def __post_init__(self):
        if self.bid > self.ask:
            raise InputError(f"bid {self.bid} > ask {self.ask} on {self.date}")
        if self.expiry <= self.date:
            raise InputError(f"expiry {self.expiry} not after quote date {self.date}")
        if self.spot <= 0 or self.strike <= 0 or self.v0 < 0:
            raise InputError(f"bad quote fields on {self.date}")

    @property
    def maturity(self) -> float:
        return (self.expiry - self.date).days / DAYS_PER_YEAR

    @property
    def group(self) -> str:
        return f"K{self.strike:g}-{self.expiry.isoformat()}"


def _parse_date(text: str, where: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError as exc:
        raise InputError(f"{where}: bad ISO date {text!r}") from exc


def _parse_float(text: str, where: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise InputError(f"{where}: not a number: {text!r}") from exc


def read_data_csv(path):
    """`date, close, rv` rows; rv may be empty for price-only rows. Returns
    (dates, closes, rvs) with rv nan where missing."""
    dates, closes, rvs = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty file")
        cols = [c.strip().lower() for c in header]
        if cols[:2] != ["date", "close"]:
            raise InputError(f"{path}: expected header 'date,close,rv', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            where = f"{path}:{lineno}"
            if len(row) < 2:
                raise InputError(f"{where}: expected at least 2 columns")
            dates.append(_parse_date(row[0], where))
            closes.append(_parse_float(row[1], where))
            rv = row[2].strip() if len(row) > 2 else ""
            rvs.append(_parse_float(rv, where) if rv else float("nan"))
    if len(dates) < 2:
        raise InputError(f"{path}: need at least two data rows")
    if any(dates[i] >= dates[i + 1] for i in range(len(dates) - 1)):
        raise InputError(f"{path}: dates must be strictly increasing")
    return dates, np.array(closes), np.array(rvs)


QUOTE_COLS = ["date", "strike", "expiry", "bid", "ask", "rate", "dividend_yield", "spot", "v0"]


def read_quotes_csv(path) -> list[QuoteRecord]:
    quotes = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty file")
        cols = [c.strip().lower() for c in header]
        if cols != QUOTE_COLS:
            raise InputError(f"{path}: expected header {','.join(QUOTE_COLS)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            where = f"{path}:{lineno}"
            if len(row) != len(QUOTE_COLS):
                raise InputError(f"{where}: expected {len(QUOTE_COLS)} columns, got {len(row)}")
            quotes.append(
                QuoteRecord(
                    date=_parse_date(row[0], where),
                    strike=_parse_float(row[1], where),
                    expiry=_parse_date(row[2], where),
                    bid=_parse_float(row[3], where),
                    ask=_parse_float(row[4], where),
                    rate=_parse_float(row[5], where),
                    dividend_yield=_parse_float(row[6], where),
                    spot=_parse_float(row[7], where),
                    v0=_parse_float(row[8], where),
                )
            )
    return quotes


def quote_seed(master_seed: int, q: QuoteRecord) -> int:
    """Stable per-quote seed so panel order never changes results."""
    key = f"{master_seed}|{q.date.isoformat()}|{q.strike!r}|{q.expiry.isoformat()}"
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big") % (2**63)


def scheme_from_config(conf: dict, override: str | None = None) -> BsdeScheme:
    name = override or conf.get("scheme.base", "recursive")
    try:
        base = SchemeBase(name)
    except ValueError as exc:
        raise InputError(f"unknown scheme {name!r}") from exc
    kind = conf.get("scheme.regressor", "mars")
    if kind == "knn":
        regressor = KnnSpec(k=cfg.get_int(conf, "scheme.knn_k", 5))
    elif kind == "mars":
        knots_raw = conf.get("scheme.mars_knots", "all")
        knots = "all" if knots_raw == "all" else int(knots_raw)
        sub = cfg.get_int(conf, "scheme.mars_subsample", 25_000)
        regressor = MarsSpec(
            degree=cfg.get_int(conf, "scheme.mars_degree", 2),
            max_terms=cfg.get_int(conf, "scheme.mars_max_terms", 21),
            knots=knots,
            fit_subsample=sub if sub > 0 else None,
        )
    else:
        raise InputError(f"unknown regressor {kind!r}")
    return BsdeScheme(
        base=base,
        regressor=regressor,
        fixed_point_iters=cfg.get_int(conf, "scheme.fixed_point_iters", 2 if base is SchemeBase.IMPLICIT_BT else 0),
        variance_reduction=cfg.get_bool(conf, "scheme.variance_reduction", True),
        z_source=ZSource(conf.get("scheme.z_source", "regression")),
    )


def sim_from_config(conf: dict, args) -> SimConfig:
    return SimConfig(
        n_paths=args.paths or cfg.get_int(conf, "sim.paths", 100_000),
        n_steps=args.steps or cfg.get_int(conf, "sim.steps", 25),
        fine_steps=args.fine_steps or cfg.get_int(conf, "sim.fine_steps", 1000),
        seed=args.seed if args.seed is not None else cfg.get_int(conf, "sim.seed", 0),
    )


def _load_conf(args) -> dict:
    return cfg.read_config(args.config) if args.config else {}


def _write_rows(path, header, rows):
    out = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        writer = csv.writer(out)
        writer.writerow(header)
        for row in rows:
            writer.writerow([cfg.format_value(v) for v in row])
    finally:
        if out is not sys.stdout:
            out.close()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_estimate(args) -> int:
    conf = _load_conf(args)
    dates, closes, rvs = read_data_csv(args.data)
    keep = ~np.isnan(rvs)
    if keep.sum() < 10:
        raise InputError("need at least 10 rows with realized variance")
    times = np.array([(d - dates[0]).days for d in dates], dtype=float) / DAYS_PER_YEAR
    t = times[keep]
    deltas = np.diff(np.concatenate(([t[0] - 1.0 / 252.0], t)))
    daily = VarianceSeries(t, rvs[keep] / deltas)
    period = cfg.get_int(conf, "estimate.decimate", 5)
    series = decimate(daily, period)

    likelihood = conf.get("estimate.likelihood", "euler")
    result = fit_mle(series, likelihood=likelihood,
                     covariance=conf.get("estimate.covariance", "hessian"))
    closes_dec = closes[keep][period - 1 :: period][: len(series)]
    vals = series.values
    n_corr = min(len(closes_dec), len(vals))
    rho = realized_correlation(closes_dec[:n_corr], np.maximum(vals[:n_corr], 1e-12))
    rho = min(max(rho, -0.999), 0.999)

    rate = cfg.get_float(conf, "estimate.rate", 0.0)
    alpha = cfg.get_float(conf, "estimate.alpha", 0.05)
    rate_sd = cfg.get_float(conf, "estimate.rate_sd", 0.00005)
    ell = confidence_ellipse(result, rate_sd=rate_sd, alpha=alpha, rate=rate)
    params = HestonParams(r=rate, kappa=result.kappa, theta=result.theta,
                          sigma=result.sigma, rho=rho, lam=0.0)

    mapping = cfg.model_to_mapping(params, ell)
    out = args.out or "-"
    if out == "-":
        for k, v in mapping.items():
            print(f"{k} = {cfg.format_value(v)}")
    else:
        cfg.write_config(mapping, out)

    se = result.std_errors
    print(f"# n_obs={result.n_obs} likelihood={result.likelihood} loglik={result.loglik:.3f}",
          file=sys.stderr)
    print(f"# kappa={result.kappa:.4g} theta={result.theta:.4g} sigma={result.sigma:.4g} rho={rho:.4g}",
          file=sys.stderr)
    print(f"# se(kappa)={se[0]:.4g} se(beta)={se[1]:.4g} se(sigma)={se[2]:.4g}", file=sys.stderr)
    return 0


def _load_model(path):
    mapping = cfg.read_config(path)
    return cfg.model_from_mapping(mapping)


def cmd_price(args) -> int:
    params, _ = _load_model(args.params)
    opt = OptionSpec(strike=args.strike, maturity=args.maturity, rate=params.r)
    spot = args.spot
    v0 = args.v0 if args.v0 is not None else params.theta
    price = heston_price(params, spot, v0, opt)
    vol = implied_vol(price, spot, opt)
    print(f"price {float(price)!r}")
    print(f"implied_vol {float(vol)!r}")
    return 0


def _per_quote_model(params: HestonParams, ell, q: QuoteRecord):
    p_q = replace(params, r=q.rate)
    ell_q = ell.with_center(p_q.center_control()) if ell is not None else None
    return p_q, ell_q


def _converted_quote(q: QuoteRecord):
    opt_q = OptionSpec(strike=q.strike, maturity=q.maturity, rate=q.rate,
                       dividend_yield=q.dividend_yield)
    bid_zd = to_zero_dividend_price(q.bid, q.spot, opt_q)
    ask_zd = to_zero_dividend_price(q.ask, q.spot, opt_q)
    return bid_zd, ask_zd


BOUNDS_HEADER = ["date", "strike", "expiry", "bid_zd", "ask_zd", "lower", "upper",
                 "lower_se", "upper_se", "seed", "runtime"]


def _bounds_row(task):
    """One quote's bound computation; module-level so worker pools can run it."""
    params, ell, q, scheme, sim, mode, master = task
    started = time.perf_counter()
    try:
        bid_zd, ask_zd = _converted_quote(q)
        p_q, ell_q = _per_quote_model(params, ell, q)
        seed = quote_seed(master, q)
        opt = OptionSpec(strike=q.strike, maturity=q.maturity, rate=q.rate)
        interval, (lo, hi) = pricing_bounds(
            p_q, ell_q, q.spot, q.v0, opt, replace(sim, seed=seed), scheme, mode=mode
        )
        return None, [q.date.isoformat(), q.strike, q.expiry.isoformat(), bid_zd, ask_zd,
                      interval.lower, interval.upper, lo.y0_se, hi.y0_se, seed,
                      round(time.perf_counter() - started, 3)]
    except (InputError, NumericalError) as exc:
        return f"# quote {q.date} K={q.strike}: {exc}", None


def cmd_bounds(args) -> int:
    conf = _load_conf(args)
    params, ell = _load_model(args.params)
    if ell is None:
        raise InputError("params file carries no uncertainty set (chi missing)")
    quotes = read_quotes_csv(args.quotes)
    scheme = scheme_from_config(conf, args.scheme)
    sim = sim_from_config(conf, args)
    mode = ParamMapMode(conf.get("model.map", "statistical"))
    workers = getattr(args, "workers", None) or cfg.get_int(conf, "sim.workers", 1)

    tasks = [(params, ell, q, scheme, sim, mode, sim.seed) for q in quotes]
    if workers > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_bounds_row, tasks))  # input order preserved
    else:
        results = [_bounds_row(t) for t in tasks]

    rows = []
    for err, row in results:
        if err is not None:
            print(err, file=sys.stderr)
        else:
            rows.append(row)
    _write_rows(args.out, BOUNDS_HEADER, rows)
    return 0


FORMULA_HEADER = ["date", "strike", "expiry", "bid_zd", "ask_zd", "lower", "upper",
                  "lower_se", "upper_se", "seed", "runtime"]


def cmd_formula_bounds(args) -> int:
    conf = _load_conf(args)
    params, ell = _load_model(args.params)
    if ell is None:
        raise InputError("params file carries no uncertainty set (chi missing)")
    quotes = read_quotes_csv(args.quotes)
    mode = ParamMapMode(conf.get("model.map", "statistical"))
    rows = []
    for q in quotes:
        started = time.perf_counter()
        try:
            bid_zd, ask_zd = _converted_quote(q)
            p_q, ell_q = _per_quote_model(params, ell, q)
            opt = OptionSpec(strike=q.strike, maturity=q.maturity, rate=q.rate)
            interval = formula_optimal_bounds(p_q, ell_q, q.spot, q.v0, opt, mode=mode)
            rows.append([q.date.isoformat(), q.strike, q.expiry.isoformat(), bid_zd, ask_zd,
                         interval.lower, interval.upper, 0.0, 0.0, 0,
                         round(time.perf_counter() - started, 3)])
        except (InputError, NumericalError) as exc:
            print(f"# quote {q.date} K={q.strike}: {exc}", file=sys.stderr)
    _write_rows(args.out, FORMULA_HEADER, rows)
    return 0


def _read_bounds_csv(path):
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            key = (row["date"], float(row["strike"]), row["expiry"])
            rows[key] = {k: float(row[k]) for k in ("bid_zd", "ask_zd", "lower", "upper")}
    return rows


def build_report(bounds_rows: dict, formula_rows: dict | None):
    """Coverage statistics per (strike, expiry) group and in aggregate.

    A quote is in bounds when both converted sides lie inside the interval;
    side-level counts are also kept. Ratios use exact integer counts."""
    groups: dict[str, dict] = {}
    for (date, strike, expiry), row in sorted(bounds_rows.items()):
        g = groups.setdefault(f"K{strike:g}-{expiry}", {
            "n": 0, "in_bounds": 0, "bid_in": 0, "ask_in": 0,
            "spread_sum": 0.0, "mid_sum": 0.0, "width_sum": 0.0,
            "n_formula": 0, "in_interval": 0, "fwidth_sum": 0.0,
        })
        bid, ask = row["bid_zd"], row["ask_zd"]
        lo, hi = row["lower"], row["upper"]
        g["n"] += 1
        g["spread_sum"] += ask - bid
        g["mid_sum"] += 0.5 * (ask + bid)
        g["width_sum"] += hi - lo
        bid_in = lo <= bid <= hi
        ask_in = lo <= ask <= hi
        g["bid_in"] += bid_in
        g["ask_in"] += ask_in
        g["in_bounds"] += bid_in and ask_in
        if formula_rows and (date, strike, expiry) in formula_rows:
            fr = formula_rows[(date, strike, expiry)]
            g["n_formula"] += 1
            g["fwidth_sum"] += fr["upper"] - fr["lower"]
            g["in_interval"] += fr["lower"] <= bid <= fr["upper"] and fr["lower"] <= ask <= fr["upper"]

    def finalize(g):
        n = g["n"]
        mean_spread = g["spread_sum"] / n
        out = {
            "n": n,
            "spread_to_price": mean_spread / (g["mid_sum"] / n),
            "bounds_to_spread": (g["width_sum"] / n) / mean_spread if mean_spread > 0 else float("inf"),
            "in_bounds": g["in_bounds"],
            "in_bounds_fraction": g["in_bounds"] / n,
            "bid_in_fraction": g["bid_in"] / n,
            "ask_in_fraction": g["ask_in"] / n,
        }
        if g["n_formula"]:
            out["optim_spread"] = (g["fwidth_sum"] / g["n_formula"]) / mean_spread if mean_spread > 0 else float("inf")
            out["in_interval"] = g["in_interval"]
            out["in_interval_fraction"] = g["in_interval"] / g["n_formula"]
        return out

    report = {"groups": {name: finalize(g) for name, g in groups.items()}}
    total = {
        "n": sum(g["n"] for g in groups.values()),
        "in_bounds": sum(g["in_bounds"] for g in groups.values()),
        "in_interval": sum(g.get("in_interval", 0) for g in groups.values()),
        "n_formula": sum(g.get("n_formula", 0) for g in groups.values()),
    }
    total["in_bounds_fraction"] = total["in_bounds"] / total["n"] if total["n"] else 0.0
    if total["n_formula"]:
        total["in_interval_fraction"] = total["in_interval"] / total["n_formula"]
    report["total"] = total
    return report


def cmd_report(args) -> int:
    bounds_rows = _read_bounds_csv(args.bounds)
    if not bounds_rows:
        raise InputError(f"{args.bounds}: no rows")
    formula_rows = _read_bounds_csv(args.formula) if args.formula else None
    report = build_report(bounds_rows, formula_rows)

    print(f"{'group':>24} {'n':>5} {'spread:price':>13} {'bounds:spread':>14} {'in bounds':>10}"
          f" {'optim:spread':>13} {'in interval':>12}")
    for name, g in report["groups"].items():
        opt_s = f"{g['optim_spread']:.1f}" if "optim_spread" in g else "-"
        in_i = f"{100 * g['in_interval_fraction']:.1f}%" if "in_interval_fraction" in g else "-"
        print(f"{name:>24} {g['n']:>5} {100 * g['spread_to_price']:>12.1f}% {g['bounds_to_spread']:>14.1f}"
              f" {100 * g['in_bounds_fraction']:>9.1f}% {opt_s:>13} {in_i:>12}")
    tot = report["total"]
    frac = 100 * tot["in_bounds_fraction"]
    print(f"{'total':>24} {tot['n']:>5} {'':>13} {'':>14} {frac:>9.1f}%")

    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_backtest(args) -> int:
    conf = _load_conf(args)
    prefix = args.out or "backtest"
    est_args = argparse.Namespace(config=args.config, data=args.data, out=f"{prefix}.params")
    cmd_estimate(est_args)
    base = argparse.Namespace(
        config=args.config, params=f"{prefix}.params", quotes=args.quotes,
        scheme=args.scheme, seed=args.seed, paths=args.paths, steps=args.steps,
        fine_steps=args.fine_steps, workers=getattr(args, "workers", None),
    )
    cmd_bounds(argparse.Namespace(**vars(base), out=f"{prefix}.bounds.csv"))
    cmd_formula_bounds(argparse.Namespace(**vars(base), out=f"{prefix}.formula.csv"))
    return cmd_report(argparse.Namespace(
        bounds=f"{prefix}.bounds.csv", formula=f"{prefix}.formula.csv", out=f"{prefix}.report.json"
    ))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hestonbounds",
                                     description="Conservative option price bounds under parameter uncertainty")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, sim_flags=True):
        p.add_argument("--config", default=None)
        p.add_argument("--out", default=None)
        if sim_flags:
            p.add_argument("--seed", type=int, default=None)
            p.add_argument("--paths", type=int, default=None)
            p.add_argument("--steps", type=int, default=None)
            p.add_argument("--fine-steps", dest="fine_steps", type=int, default=None)
            p.add_argument("--scheme", default=None)
            p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("estimate", help="fit the variance model and emit a params file")
    p.add_argument("data")
    common(p, sim_flags=False)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("price", help="single analytic call price")
    p.add_argument("params")
    p.add_argument("--strike", type=float, required=True)
    p.add_argument("--maturity", type=float, required=True)
    p.add_argument("--spot", type=float, required=True)
    p.add_argument("--v0", type=float, default=None)
    common(p, sim_flags=False)
    p.set_defaults(func=cmd_price)

    p = sub.add_parser("formula-bounds", help="min/max of the pricing formula per quote")
    p.add_argument("params")
    p.add_argument("quotes")
    common(p, sim_flags=False)
    p.set_defaults(func=cmd_formula_bounds)

    p = sub.add_parser("bounds", help="controlled value-process bounds per quote")
    p.add_argument("params")
    p.add_argument("quotes")
    common(p)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("report", help="coverage statistics from bounds output")
    p.add_argument("bounds")
    p.add_argument("--formula", default=None)
    common(p, sim_flags=False)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("backtest", help="estimate, bounds, formula bounds and report")
    p.add_argument("data")
    p.add_argument("quotes")
    common(p)
    p.set_defaults(func=cmd_backtest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
