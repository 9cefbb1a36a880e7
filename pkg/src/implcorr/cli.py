"""Command-line entry point: generate, fit, forecast, backtest and report.

Runs are described by a JSON configuration file. Relative paths inside it are
resolved against the directory holding the file. Command-line flags override
the matching configuration scalars.

Exit codes: 0 on success, 1 when a pipeline stage fails (the message names the
stage), 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import datetime as dt
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from implcorr.correlation import (
    FISHER_CUTOFF,
    BasketSpec,
    Breakpoint,
    atm_index_vol,
    fisher_z,
    implied_correlation_points,
    regime_correct,
    write_ics_csv,
)
from implcorr.dsfm import DSFM, FactorModel
from implcorr.marketdata import (
    DataError,
    SurfacePanel,
    SurfacePoint,
    filter_and_prepare,
    parse_snapshots,
    parse_trades,
    parse_varswaps,
    screen_implied_vols,
)
from implcorr.strategy import (
    LEDGER_HEADER,
    REPORT_TENORS,
    BacktestLedger,
    DsfmForecaster,
    MarketPanel,
    OracleForecaster,
    hedge_error_table,
    run_backtest,
    strategy_table,
    write_ledger_csv,
)
from implcorr.synth import INDEX_TICKER, SynthConfig, generate_market, write_market
from implcorr.timeseries import ADF_CRITICAL_5PCT, FactorDynamics
from implcorr.vol import OK, TRADING_DAYS, implied_vols

log = logging.getLogger("implcorr")

INPUT_NAMES = ("trades", "snapshots", "rates", "dividends", "varswaps")


class ConfigError(Exception):
    """Invalid or inconsistent run configuration (exit code 2)."""


class StageError(Exception):
    """A pipeline stage failed at run time (exit code 1)."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str):
    """Re-raise any failure inside the block as a :class:`StageError` naming ``name``."""
    try:
        yield
    except (StageError, ConfigError):
        raise
    except Exception as exc:  # noqa: BLE001 - every failure is reported with its stage
        raise StageError(name, str(exc) or type(exc).__name__) from exc


def _date_range(d: dict | None, key: str):
    if d is None:
        return None
    try:
        start, end = dt.date.fromisoformat(d["start"]), dt.date.fromisoformat(d["end"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{key} needs ISO 'start' and 'end' dates ({exc})") from None
    if end < start:
        raise ConfigError(f"{key} ends before it starts")
    return start, end


@dataclass
class RunConfig:
    """Resolved run settings."""

    base_dir: Path
    data_dir: Path
    output_dir: Path
    inputs: dict
    index_ticker: str = INDEX_TICKER
    seed: int | None = None
    threads: int | None = None
    basket: BasketSpec | None = None
    estimation: tuple | None = None
    backtest: tuple | None = None
    synth: dict = field(default_factory=dict)
    dsfm: dict = field(default_factory=dict)
    var: dict = field(default_factory=dict)
    tenors: tuple = REPORT_TENORS
    dt_years: float = 1.0 / TRADING_DAYS
    notional: float = 1.0
    tree_steps: int = 200
    regime: dict | None = None
    forecast_horizon: int = 1

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path) -> "RunConfig":
        known = {"data_dir", "output_dir", "inputs", "index_ticker", "seed", "threads", "basket",
                 "estimation", "backtest", "synth", "dsfm", "var", "strategy", "iv", "regime",
                 "forecast"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")

        def path(p):
            p = Path(p)
            return p if p.is_absolute() else base_dir / p

        data_dir = path(raw.get("data_dir", "data"))
        inputs = {n: data_dir / f"{n}.csv" for n in INPUT_NAMES}
        for n, p in (raw.get("inputs") or {}).items():
            if n not in INPUT_NAMES:
                raise ConfigError(f"unknown input '{n}'")
            inputs[n] = path(p)
        basket = None
        if raw.get("basket") is not None:
            try:
                b = raw["basket"]
                basket = BasketSpec(tuple(b["tickers"]), tuple(float(w) for w in b["weights"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"invalid basket: {exc}") from None
        est = _date_range(raw.get("estimation"), "estimation")
        bt = _date_range(raw.get("backtest"), "backtest")
        if est and bt and not est[1] < bt[0]:
            raise ConfigError("the estimation range must end before the backtest range starts")
        strat = raw.get("strategy") or {}
        cfg = cls(
            base_dir=base_dir, data_dir=data_dir, output_dir=path(raw.get("output_dir", "out")),
            inputs=inputs, index_ticker=str(raw.get("index_ticker", INDEX_TICKER)), basket=basket,
            estimation=est, backtest=bt, synth=dict(raw.get("synth") or {}),
            dsfm=dict(raw.get("dsfm") or {}), var=dict(raw.get("var") or {}),
            tenors=tuple(float(t) for t in strat.get("tenors", REPORT_TENORS)),
            dt_years=float(strat.get("dt_years", 1.0 / TRADING_DAYS)),
            notional=float(strat.get("notional", 1.0)),
            tree_steps=int((raw.get("iv") or {}).get("tree_steps", 200)),
            regime=raw.get("regime"),
            forecast_horizon=int((raw.get("forecast") or {}).get("horizon", 1)),
        )
        cfg.set_seed(raw.get("seed"))
        cfg.set_threads(raw.get("threads"))
        cfg._check()
        return cfg

    def set_seed(self, seed) -> None:
        if seed is None:
            return
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
        self.seed = seed

    def set_threads(self, threads) -> None:
        if threads is None:
            return
        if isinstance(threads, bool) or not isinstance(threads, int) or threads < 1:
            raise ConfigError(f"threads must be a positive integer, got {threads!r}")
        self.threads = threads

    def _check(self) -> None:
        if not self.tenors or any(not 0 < t <= 5 for t in self.tenors):
            raise ConfigError("strategy tenors must lie in (0, 5] years")
        if not self.dt_years > 0 or not self.notional > 0:
            raise ConfigError("dt_years and notional must be positive")
        if self.tree_steps < 1 or self.forecast_horizon < 1:
            raise ConfigError("tree_steps and forecast horizon must be positive")
        if self.regime is not None and not {"threshold", "slope_high"} <= set(self.regime):
            raise ConfigError("regime needs 'threshold' and 'slope_high'")
        p = self.var.get("p", "auto")
        if p != "auto" and not (isinstance(p, int) and p >= 1):
            raise ConfigError("var.p must be 'auto' or a positive integer")

    @property
    def n_threads(self) -> int:
        return self.threads or os.cpu_count() or 1

    def synth_config(self) -> SynthConfig:
        d = dict(self.synth)
        if self.seed is not None:
            d["seed"] = self.seed
        try:
            return SynthConfig.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid synth settings: {exc}") from None

    def dsfm_estimator(self) -> DSFM:
        d = self.dsfm
        unknown = set(d) - {"grid_size", "bandwidth", "bandwidth_phi", "candidates", "n_factors_max",
                            "variance_threshold", "h_star"}
        if unknown:
            raise ConfigError(f"unknown dsfm settings: {sorted(unknown)}")
        bw = d.get("bandwidth", "auto")
        return DSFM(grid_size=tuple(d.get("grid_size", (25, 25))),
                    bandwidth=bw if isinstance(bw, str) else tuple(bw),
                    bandwidth_phi=None if d.get("bandwidth_phi") is None else tuple(d["bandwidth_phi"]),
                    candidate_bandwidths=d.get("candidates"),
                    n_factors_max=int(d.get("n_factors_max", 3)),
                    variance_threshold=float(d.get("variance_threshold", 0.99)),
                    h_star=None if d.get("h_star") is None else tuple(d["h_star"]))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(raw, path.resolve().parent)


def _in_range(d, rng) -> bool:
    return rng is None or rng[0] <= d <= rng[1]


# ---------------------------------------------------------------- generate

def cmd_generate(cfg: RunConfig) -> dict:
    """Write a synthetic market into ``cfg.data_dir``."""
    synth_cfg = cfg.synth_config()
    with stage("synth"):
        market = generate_market(synth_cfg)
        paths = write_market(market, cfg.data_dir)
    log.info("wrote %d option trades over %d days to %s", len(market.trades), len(market.dates),
             cfg.data_dir)
    return paths


# ---------------------------------------------------------------- fit

def _read_inputs(cfg: RunConfig, need_trades: bool = True):
    with stage("marketdata"):
        for n in INPUT_NAMES:
            if (need_trades or n != "trades") and n != "varswaps" and not cfg.inputs[n].exists():
                raise FileNotFoundError(f"missing input {cfg.inputs[n]}")
        trades = None
        try:
            if need_trades:
                current = cfg.inputs["trades"]
                with open(current, newline="") as fh:
                    trades = parse_trades(fh)
            current = cfg.inputs["snapshots"]
            with open(cfg.inputs["snapshots"], newline="") as s, \
                    open(cfg.inputs["rates"], newline="") as r, \
                    open(cfg.inputs["dividends"], newline="") as d:
                snaps = parse_snapshots(s, r, d, cfg.index_ticker)
        except DataError as exc:
            raise DataError(f"{current.name}: {exc}") from None
    return trades, snaps


def _basket_weights(cfg: RunConfig, snap) -> dict:
    if cfg.basket is not None:
        return dict(zip(cfg.basket.tickers, cfg.basket.weights))
    if not snap.weights:
        raise ValueError(f"no basket weights on {snap.date}")
    return dict(snap.weights)


def _invert_day(frame, steps: int):
    """Implied vols of one day's options; European by Black-Scholes, American on the tree."""
    vols = np.full(len(frame), np.nan)
    status = np.full(len(frame), OK)
    for style in ("european", "american"):
        mask = (frame["style"] == style).to_numpy()
        if not mask.any():
            continue
        sub = frame[mask]
        v, s = implied_vols(sub["price"].to_numpy(), sub["spot"].to_numpy(), sub["strike"].to_numpy(),
                            sub["rate"].to_numpy(), sub["tau"].to_numpy(),
                            (sub["right"] == "call").to_numpy(), american=style == "american",
                            dividends=list(sub["dividends"]), steps=steps)
        vols[mask], status[mask] = v, s
    return vols, status


def compute_implied_vols(prepared, steps: int, threads: int):
    """Per-day implied vols; days are independent, results are assembled in date order."""
    prepared = prepared.sort_values(["trade_date", "underlying", "expiry_date", "strike", "right"],
                                    kind="mergesort").reset_index(drop=True)
    days = [g for _, g in prepared.groupby("trade_date", sort=True)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(lambda g: _invert_day(g, steps), days))
    iv = np.concatenate([r[0] for r in results]) if results else np.empty(0)
    status = np.concatenate([r[1] for r in results]) if results else np.empty(0, int)
    out = prepared.copy()
    out["iv"] = iv
    out["status"] = status
    return out


def build_ics(cfg: RunConfig, iv_frame, snaps):
    """Implied correlation points per day plus the ATM index vol (in percent) per day."""
    converged = iv_frame[iv_frame["status"] == OK]
    ok = screen_implied_vols(converged)
    points, atm = [], {}
    diag = {"uncovered_expiry": 0, "extrapolation": 0, "kept": 0, "no_atm": 0,
            "high_iv": len(converged) - len(ok)}
    for d, g in ok.groupby("trade_date", sort=True):
        surf = {tk: [SurfacePoint(r.kappa, r.tau, r.iv, r.expiry_date) for r in sub.itertuples()]
                for tk, sub in g.groupby("underlying", sort=True)}
        idx = surf.pop(cfg.index_ticker, [])
        if not idx:
            continue
        weights = _basket_weights(cfg, snaps[d])
        pts, dd = implied_correlation_points(idx, surf, weights, d)
        for k in ("uncovered_expiry", "extrapolation", "kept"):
            diag[k] += dd[k]
        points.extend(pts)
        try:
            atm[d] = 100.0 * atm_index_vol(idx)
        except ValueError:
            diag["no_atm"] += 1
    return points, atm, diag


def _panel_from_points(points, dates_filter=None) -> SurfacePanel:
    days = {}
    for p in points:
        if abs(p.rho) >= FISHER_CUTOFF or not _in_range(p.date, dates_filter):
            continue
        days.setdefault(p.date, []).append(SurfacePoint(p.kappa, p.tau, fisher_z(p.rho)))
    return SurfacePanel([(d, days[d]) for d in sorted(days)])


def _fmt_table(header, rows) -> str:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(header)]
    lines = ["  ".join(f"{h:>{w}}" for h, w in zip(header, widths))]
    lines.append("-" * len(lines[0]))
    lines += ["  ".join(f"{c:>{w}}" for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def fit_report(model: FactorModel, dynamics: FactorDynamics, dsfm: DSFM) -> str:
    """Explained variance, ADF, lag-order and VAR coefficient tables as plain text."""
    parts = []
    L = model.n_factors
    ev = model.eigenvalues
    total = ev.sum()
    rows = [(f"m{l + 1}", f"{ev[l]:.6g}", f"{ev[l] / total:.4f}", f"{ev[:l + 1].sum() / total:.4f}")
            for l in range(L)]
    parts.append("Explained variance\n" + _fmt_table(("factor", "eigenvalue", "share", "cumulative"), rows)
                 + f"in-sample explained variance of the factor part: {model.explained_variance:.4f}\n"
                 + f"bandwidth (mean, second moment): {tuple(model.bandwidth_mean)}, "
                   f"{tuple(model.bandwidth_phi)}\n")
    if dsfm.bandwidth_scores_:
        rows = [(f"({h.h1:g}, {h.h2:g})", f"{s:.6g}") for h, s in dsfm.bandwidth_scores_.items()]
        parts.append("Bandwidth criterion\n" + _fmt_table(("h", "criterion"), rows))
    rows = [(f"Z{l + 1}", f"{r.statistic:.4f}", r.lags_used, f"{ADF_CRITICAL_5PCT:.2f}",
             "yes" if r.reject_at_5pct else "no", "yes" if dynamics.differenced_[l] else "no")
            for l, r in enumerate(dynamics.adf_reports_)]
    parts.append("ADF test (constant, 5% level)\n"
                 + _fmt_table(("series", "statistic", "lags", "critical", "reject", "differenced"), rows))
    if dynamics.lag_table_ is not None:
        parts.append("VAR lag order\n" + dynamics.lag_table_.to_text())
    else:
        parts.append("VAR lag order\ntoo few observations for the criteria table\n")
    var = dynamics.var_
    names = [f"Z{l + 1}" for l in range(var.n_series)]
    rows = [("const",) + tuple(f"{var.intercept[j]:.4f} ({var.std_errors[0, j]:.4f})"
                               for j in range(var.n_series))]
    for i in range(var.p):
        for k in range(var.n_series):
            se = var.std_errors[1 + i * var.n_series + k]
            rows.append((f"{names[k]}(t-{i + 1})",)
                        + tuple(f"{var.coefs[i][j, k]:.4f} ({se[j]:.4f})" for j in range(var.n_series)))
    parts.append(f"VAR({var.p}) coefficients, standard errors in parentheses\n"
                 + _fmt_table(("regressor",) + tuple(names), rows))
    pm = dynamics.portmanteau_
    parts.append(f"Portmanteau test: statistic {pm.statistic:.4f}, lags {pm.lags_used}, "
                 f"{pm.detail}, p-value {pm.p_value:.4f}\n")
    return "\n".join(parts)


def cmd_fit(cfg: RunConfig) -> dict:
    """Implied vols, implied correlation surface, factor model and score dynamics."""
    trades, snaps = _read_inputs(cfg)
    with stage("marketdata"):
        prepared = filter_and_prepare(trades, snaps)
        if prepared.empty:
            raise ValueError("no options survive the moneyness and maturity filters")
    with stage("vol"):
        iv_frame = compute_implied_vols(prepared, cfg.tree_steps, cfg.n_threads)
        n_failed = int((iv_frame["status"] != OK).sum())
        if n_failed:
            log.warning("%d of %d implied vol inversions failed and were dropped", n_failed, len(iv_frame))
    with stage("correlation"):
        points, atm, diag = build_ics(cfg, iv_frame, snaps)
        if cfg.regime is not None:
            bp = Breakpoint(float(cfg.regime["threshold"]), float(cfg.regime.get("slope_low", 0.0)),
                            float(cfg.regime["slope_high"]), 0.0, 0.0, 0.0)
            points = regime_correct([p for p in points if p.date in atm], atm, bp)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        with open(cfg.output_dir / "ics.csv", "w", newline="") as fh:
            write_ics_csv(points, fh)
        all_panel = _panel_from_points(points)
        est_panel = _panel_from_points(points, cfg.estimation)
        if len(est_panel) < 2:
            raise ValueError("fewer than 2 days with implied correlations in the estimation range")
    with stage("dsfm"):
        dsfm = cfg.dsfm_estimator().fit(est_panel)
        model = dsfm.model_
        all_scores = dsfm.transform(all_panel)
    with stage("timeseries"):
        dyn = FactorDynamics(p=cfg.var.get("p", "auto"), p_max=int(cfg.var.get("p_max", 4)),
                             adf_start_lags=int(cfg.var.get("adf_start_lags", 3))).fit(model.scores)
    with stage("report"):
        doc = model.to_dict()
        doc["dynamics"] = dyn.to_dict()
        doc["all_days"] = {"dates": [d.isoformat() for d in all_panel.dates],
                           "scores": all_scores.tolist()}
        doc["ics_diagnostics"] = diag
        text = json.dumps(doc, sort_keys=True) + "\n"
        (cfg.output_dir / "model.json").write_text(text)
        report = fit_report(model, dyn, dsfm)
        (cfg.output_dir / "fit_report.txt").write_text(report)
    log.info("fitted %d factors on %d days; explained variance %.4f", model.n_factors,
             len(est_panel), model.explained_variance)
    return {"model": cfg.output_dir / "model.json", "report": cfg.output_dir / "fit_report.txt",
            "ics": cfg.output_dir / "ics.csv"}


def load_model(path):
    """Factor model, score dynamics and all-day scores from a ``model.json``."""
    doc = json.loads(Path(path).read_text())
    model = FactorModel.from_dict(doc)
    dyn = FactorDynamics.from_dict(doc["dynamics"])
    days = doc.get("all_days") or {"dates": doc["dates"], "scores": doc["scores"]}
    dates = [dt.date.fromisoformat(s) for s in days["dates"]]
    scores = np.asarray(days["scores"], float).reshape(len(dates), model.n_factors)
    return model, dyn, dates, scores


# ---------------------------------------------------------------- forecast

# requested moneyness grid, clipped to the fitted data range
FORECAST_KAPPAS = tuple(np.round(np.arange(0.8, 1.2001, 0.05), 10))


def cmd_forecast(cfg: RunConfig, model_path=None) -> Path:
    """Forecast surfaces for the days after the last scored day, as a long-format CSV."""
    with stage("model"):
        model, dyn, dates, scores = load_model(model_path or cfg.output_dir / "model.json")
        if model.ecdf is not None:
            (k_lo, t_lo), (k_hi, t_hi) = ([model.ecdf.knots_[a][i] for a in (0, 1)] for i in (0, -1))
            kappas = np.clip(FORECAST_KAPPAS, k_lo, k_hi)
            taus = np.linspace(t_lo, t_hi, 6)
        else:
            kappas, taus = np.linspace(0, 1, 9), np.linspace(0, 1, 6)
    with stage("timeseries"):
        z = dyn.forecast(scores, cfg.forecast_horizon)
    with stage("forecast"):
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        out = cfg.output_dir / "forecast.csv"
        K, Tt = np.meshgrid(np.unique(kappas), taus, indexing="ij")
        coords = np.column_stack([K.ravel(), Tt.ravel()])
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "kappa", "tau", "rho"] + [f"z{l + 1}" for l in range(model.n_factors)])
            for h in range(cfg.forecast_horizon):
                rho = model.evaluate_surface(z[h], coords)
                for (k, t), r in zip(coords, rho):
                    w.writerow([h + 1, repr(float(k)), repr(float(t)), repr(float(r))]
                               + [repr(float(v)) for v in z[h]])
    log.info("forecast %d steps ahead from %s", cfg.forecast_horizon, dates[-1] if dates else "start")
    return out


# ---------------------------------------------------------------- backtest

def build_market_panel(cfg: RunConfig, snaps, varswaps) -> MarketPanel:
    dates = sorted(snaps)
    if not dates:
        raise ValueError("no market snapshots")
    weights = _basket_weights(cfg, snaps[dates[0]])
    tickers = tuple(sorted(weights))
    basket = BasketSpec(tickers, tuple(weights[t] for t in tickers))
    idx = np.array([snaps[d].spot_by_ticker[cfg.index_ticker] for d in dates])
    con = np.array([[snaps[d].spot_by_ticker[t] for t in tickers] for d in dates])
    pos = {d: i for i, d in enumerate(dates)}
    col = {t: i for i, t in enumerate(tickers)}
    strikes = {}
    for tenor in cfg.tenors:
        sub = varswaps[np.isclose(varswaps["tenor_years"].to_numpy(float), tenor, rtol=0, atol=1e-9)]
        if sub.empty:
            continue
        ks_b = np.full(len(dates), np.nan)
        ks_i = np.full((len(dates), len(tickers)), np.nan)
        for r in sub.itertuples(index=False):
            if r.date not in pos:
                continue
            if r.ticker == cfg.index_ticker:
                ks_b[pos[r.date]] = r.strike_var
            elif r.ticker in col:
                ks_i[pos[r.date], col[r.ticker]] = r.strike_var
        strikes[tenor] = (ks_b, ks_i)
    return MarketPanel(dates, basket, idx, con, strikes)


def ledger_tables(rows) -> str:
    """Hedge-error moments and strategy payoff summary from ledger rows."""
    by_tenor = {}
    for r in rows:
        by_tenor.setdefault(float(r["tenor"]), []).append(r)
    errors, payoffs = {}, {"D": {}, "D-D_h": {}, "D_adv": {}}
    for tau, rs in sorted(by_tenor.items()):
        D = np.array([float(r["D"]) for r in rs])
        Dh = np.array([float(r["D_h"]) for r in rs])
        Da = np.array([float(r["D_adv"]) for r in rs])
        e = np.array([float(r["hedge_error"]) for r in rs])
        e = e[np.isfinite(e)]
        if D.size < 2:
            log.warning("tenor %g has fewer than 2 trades and is left out of the summary", tau)
            continue
        payoffs["D"][tau], payoffs["D-D_h"][tau], payoffs["D_adv"][tau] = D, D - Dh, Da
        if e.size >= 2:
            errors[tau] = e
    text = "Relative hedging error\n" + hedge_error_table(errors)
    text += "\nStrategy payoffs\n" + strategy_table(payoffs)
    return text


def cmd_backtest(cfg: RunConfig, model_path=None, oracle: bool = False) -> dict:
    """Dispersion backtest for every configured tenor; writes the ledger and summary tables."""
    _, snaps = _read_inputs(cfg, need_trades=False)
    with stage("marketdata"):
        if not cfg.inputs["varswaps"].exists():
            raise FileNotFoundError(f"missing input {cfg.inputs['varswaps']}")
        with open(cfg.inputs["varswaps"], newline="") as fh:
            varswaps = parse_varswaps(fh)
        market = build_market_panel(cfg, snaps, varswaps)
    if not oracle:
        with stage("model"):
            model, dyn, sdates, scores = load_model(model_path or cfg.output_dir / "model.json")
            pos = {d: i for i, d in enumerate(sdates)}
            score_index = {t: pos[d] for t, d in enumerate(market.dates) if d in pos}
    bt_range = cfg.backtest
    if bt_range is None and cfg.estimation is not None:
        bt_range = (cfg.estimation[1] + dt.timedelta(days=1), dt.date.max)
    rows, meta = [], {}
    with stage("strategy"):
        for tenor in cfg.tenors:
            if tenor not in market.strikes:
                log.warning("no variance swap strikes for tenor %g; omitted", tenor)
                continue
            fc = OracleForecaster(market, tenor) if oracle else DsfmForecaster(model, dyn, scores,
                                                                               score_index)
            ledger = run_backtest(market, fc, tenor, cfg.dt_years, cfg.notional, bt_range)
            if not ledger.rows:
                log.warning("no complete trades for tenor %g in the backtest range", tenor)
            rows += ledger.rows
            meta[repr(tenor)] = ledger.metadata
    with stage("report"):
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        full = BacktestLedger(rows, meta)
        with open(cfg.output_dir / "ledger.csv", "w", newline="") as fh:
            write_ledger_csv(full, fh)
        if not rows:
            log.warning("the backtest range produced an empty ledger")
        summary = ledger_tables(rows)
        (cfg.output_dir / "summary.txt").write_text(summary)
    return {"ledger": cfg.output_dir / "ledger.csv", "summary": cfg.output_dir / "summary.txt"}


def read_ledger_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LEDGER_HEADER:
            raise ValueError(f"expected ledger header {','.join(LEDGER_HEADER)}")
        return list(reader)


def cmd_report(cfg: RunConfig) -> str:
    """Rebuild the summary tables from ``ledger.csv``."""
    with stage("report"):
        text = ledger_tables(read_ledger_csv(cfg.output_dir / "ledger.csv"))
        (cfg.output_dir / "report.txt").write_text(text)
    return text


# ---------------------------------------------------------------- entry point

def _u64(text: str) -> int:
    try:
        v = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}: expected an unsigned 64-bit integer") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed {v} outside the unsigned 64-bit range")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid thread count {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("thread count must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run configuration")
    common.add_argument("--seed", type=_u64, help="override the configured seed")
    common.add_argument("--threads", type=_positive, help="worker threads (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="implcorr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic market")
    sub.add_parser("fit", parents=[common], help="fit the surface factor model")
    p = sub.add_parser("forecast", parents=[common], help="forecast correlation surfaces")
    p.add_argument("--model", help="model JSON (default: <output_dir>/model.json)")
    p.add_argument("--horizon", type=_positive, help="forecast steps")
    p = sub.add_parser("backtest", parents=[common], help="run the dispersion backtest")
    p.add_argument("--model", help="model JSON (default: <output_dir>/model.json)")
    p.add_argument("--oracle-forecast", action="store_true",
                   help="use the realized correlation as the forecast")
    sub.add_parser("report", parents=[common], help="rebuild summary tables from the ledger")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.set_seed(args.seed)
        if args.threads is not None:
            cfg.set_threads(args.threads)
        if getattr(args, "horizon", None):
            cfg.forecast_horizon = args.horizon
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "fit":
            cmd_fit(cfg)
        elif args.command == "forecast":
            cmd_forecast(cfg, args.model)
        elif args.command == "backtest":
            cmd_backtest(cfg, args.model, args.oracle_forecast)
        else:
            sys.stdout.write(cmd_report(cfg))
    except ConfigError as exc:
        print(f"implcorr: configuration error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"implcorr: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
