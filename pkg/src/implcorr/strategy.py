"""Variance swaps, dispersion payoffs, correlation-forecast hedges and backtests."""

from __future__ import annotations

import csv
import datetime as dt
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from implcorr.correlation import BasketSpec, equicorrelation
from implcorr.vol import TRADING_DAYS, realized_variance

LEDGER_HEADER = ["open_date", "tenor", "mfic", "realized_corr", "forecast_corr", "D", "D_h",
                 "D_adv", "hedge_error"]
REPORT_TENORS = (0.083, 0.25, 0.5, 1.0)
STRATEGY_LABELS = {
    "D": ("D", "(no hedge)"),
    "D-D_h": ("D - D_h", "(naive hedge)"),
    "D_adv": ("D_adv", "(advanced hedge)"),
}


@dataclass(frozen=True)
class VarianceSwap:
    underlying: str
    strike_var: float
    tenor: float
    notional: float = 1.0
    direction: str = "long"
    open_date: dt.date | None = None

    def __post_init__(self):
        if not self.strike_var >= 0:
            raise ValueError(f"strike variance must be non-negative, got {self.strike_var}")
        if not self.notional > 0:
            raise ValueError(f"notional must be positive, got {self.notional}")
        if self.direction not in ("long", "short"):
            raise ValueError(f"direction must be 'long' or 'short', got {self.direction!r}")

    @property
    def sign(self) -> float:
        return 1.0 if self.direction == "long" else -1.0


def variance_swap_payoff(swap: VarianceSwap, realized_var: float) -> float:
    if realized_var < 0:
        raise ValueError("realized variance must be non-negative")
    return swap.sign * (realized_var - swap.strike_var) * swap.notional


def _cross(ws):
    ws = np.asarray(ws, float)
    return float(ws.sum() ** 2 - ws @ ws)


@dataclass(frozen=True)
class DispersionTrade:
    """Short index variance against long constituent variances with ``w_i^2`` notionals."""

    basket: BasketSpec
    index_leg: VarianceSwap
    constituent_legs: tuple[VarianceSwap, ...]
    open_date: dt.date | None = None
    tenor: float = 0.0

    def __post_init__(self):
        if self.index_leg.direction != "short":
            raise ValueError("index leg must be short")
        if len(self.constituent_legs) != len(self.basket.tickers):
            raise ValueError("one constituent leg per basket member is required")
        for leg in self.constituent_legs:
            if leg.direction != "long":
                raise ValueError("constituent legs must be long")
        if any(leg.tenor != self.index_leg.tenor for leg in self.constituent_legs):
            raise ValueError("leg tenors must be equal")

    @classmethod
    def build(cls, basket: BasketSpec, index_strike: float, constituent_strikes, tenor: float,
              notional: float = 1.0, open_date=None, index_name: str = "INDEX") -> "DispersionTrade":
        index_leg = VarianceSwap(index_name, float(index_strike), tenor, notional, "short", open_date)
        legs = tuple(VarianceSwap(t, float(k), tenor, notional * w * w, "long", open_date)
                     for t, k, w in zip(basket.tickers, constituent_strikes, basket.weights))
        return cls(basket, index_leg, legs, open_date, tenor)

    @property
    def notional(self) -> float:
        return self.index_leg.notional

    @property
    def constituent_strikes(self) -> np.ndarray:
        return np.array([leg.strike_var for leg in self.constituent_legs])

    @property
    def implied_cross(self) -> float:
        """``sum_{i != j} w_i w_j sigma~_i sigma~_j`` from the strikes."""
        return _cross(self.basket.w * np.sqrt(self.constituent_strikes))

    @property
    def mfic(self) -> float:
        return equicorrelation(self.index_leg.strike_var, np.sqrt(self.constituent_strikes),
                               self.basket.w)


def dispersion_payoff_correlation_form(trade: DispersionTrade, realized_index_var: float,
                                       realized_constituent_vars) -> float:
    """Dispersion payoff written through implied and realized equicorrelations."""
    rv = np.asarray(realized_constituent_vars, float)
    w = trade.basket.w
    rho = equicorrelation(realized_index_var, np.sqrt(rv), w)
    realized_cross = _cross(w * np.sqrt(rv))
    return trade.notional * (trade.mfic * trade.implied_cross - rho * realized_cross)


def dispersion_payoff(trade: DispersionTrade, realized_index_var: float,
                      realized_constituent_vars, check: bool = True) -> float:
    """Sum of the leg payoffs; optionally cross-checked against the correlation form."""
    rv = np.asarray(realized_constituent_vars, float)
    if rv.shape != (len(trade.constituent_legs),) or not np.all(np.isfinite(rv)):
        raise ValueError("a realized variance is required for every constituent leg")
    value = variance_swap_payoff(trade.index_leg, realized_index_var) + sum(
        variance_swap_payoff(leg, v) for leg, v in zip(trade.constituent_legs, rv))
    if check:
        alt = dispersion_payoff_correlation_form(trade, realized_index_var, rv)
        scale = trade.notional * max(1.0, realized_index_var, trade.index_leg.strike_var)
        if abs(alt - value) > 1e-10 * scale:
            raise ArithmeticError(f"payoff forms disagree: {value} vs {alt}")
    return float(value)


def naive_hedge_value(trade: DispersionTrade, forecast_rho: float, mfic: float | None = None) -> float:
    """Correlation-swap style hedge sized by the implied cross term."""
    if not np.isfinite(forecast_rho):
        raise ValueError("forecast correlation must be finite")
    strike = trade.mfic if mfic is None else mfic
    return float(trade.notional * trade.implied_cross * (strike - forecast_rho))


def hedge_error(D: float, D_h: float) -> float:
    if D == 0:
        raise ZeroDivisionError("relative hedge error is undefined when the payoff is zero")
    return (D_h - D) / D


def advanced_payoff(D: float, D_h: float, forecast_rho: float, mfic_strike: float) -> float:
    return D - D_h if forecast_rho >= mfic_strike else D


@dataclass
class MarketPanel:
    """Daily closes and variance-swap strikes for one basket.

    ``strikes`` maps a tenor to ``(index_strikes, constituent_strikes)`` with
    shapes (T,) and (T, N); NaN marks a missing quote.
    """

    dates: list
    basket: BasketSpec
    index_prices: np.ndarray
    constituent_prices: np.ndarray
    strikes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.index_prices = np.asarray(self.index_prices, float)
        self.constituent_prices = np.asarray(self.constituent_prices, float)
        T = len(self.dates)
        if self.index_prices.shape != (T,) or self.constituent_prices.shape != (T, len(self.basket.tickers)):
            raise ValueError("price arrays do not match the dates and basket")

    def realized(self, t: int, tenor: float):
        """Realized index and constituent variances over the window opened at ``t``."""
        rv_b = realized_variance(self.index_prices, t, tenor).value
        rv_i = np.array([realized_variance(self.constituent_prices[:, i], t, tenor).value
                         for i in range(self.constituent_prices.shape[1])])
        return rv_b, rv_i

    def realized_correlation(self, t: int, tenor: float) -> float:
        rv_b, rv_i = self.realized(t, tenor)
        return float(equicorrelation(rv_b, np.sqrt(rv_i), self.basket.w))


def horizon_days(tenor: float) -> int:
    return int(round(TRADING_DAYS * tenor))


class OracleForecaster:
    """Returns the realized correlation of the window; the perfect-foresight benchmark."""

    def __init__(self, market: MarketPanel, tenor: float):
        self.market = market
        self.tenor = tenor

    def __call__(self, open_idx: int, expiry_idx: int) -> float:
        return self.market.realized_correlation(open_idx, self.tenor)


class DsfmForecaster:
    """One-step-ahead factor forecast evaluated at unit moneyness and the shortest fitted maturity.

    ``scores`` holds factor scores for market days; ``score_index`` maps a
    market day index to its row. Scores observed up to ``expiry_idx - 1`` feed
    the dynamics.
    """

    def __init__(self, model, dynamics, scores, score_index: Mapping[int, int], kappa: float = 1.0,
                 tau: float | None = None):
        self.model = model
        self.dynamics = dynamics
        self.scores = np.asarray(scores, float)
        self.score_index = score_index
        self.kappa = kappa
        if tau is None:
            tau = float(model.ecdf.knots_[1][0]) if model.ecdf is not None else 0.0
        self.tau = tau

    def __call__(self, open_idx: int, expiry_idx: int) -> float:
        last = expiry_idx - 1
        if last not in self.score_index:
            raise LookupError(f"no factor scores for market day {last}")
        z = self.dynamics.forecast(self.scores[:self.score_index[last] + 1], 1)[0]
        return float(self.model.evaluate_surface(z, [(self.kappa, self.tau)])[0])


@dataclass
class BacktestLedger:
    rows: list[dict]
    metadata: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], float)

    def strategy_payoffs(self) -> dict:
        D = self.column("D")
        return {"D": D, "D-D_h": D - self.column("D_h"), "D_adv": self.column("D_adv")}

    def defined_hedge_errors(self) -> np.ndarray:
        e = self.column("hedge_error")
        return e[np.isfinite(e)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        write_ledger_csv(self, buf)
        return buf.getvalue()


def _fmt(x) -> str:
    if isinstance(x, dt.date):
        return x.isoformat()
    return repr(float(x))


def write_ledger_csv(ledger: BacktestLedger, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(LEDGER_HEADER)
    for r in ledger.rows:
        w.writerow([_fmt(r[c]) for c in LEDGER_HEADER])


def run_backtest(market: MarketPanel, forecaster: Callable[[int, int], float], tenor: float,
                 dt_years: float = 1.0 / TRADING_DAYS, notional: float = 1.0,
                 open_range: tuple | None = None) -> BacktestLedger:
    """One dispersion trade per origination day with its hedged variants.

    A trade opened at day ``t`` expires at ``t + round(252 * tenor)``. The
    forecaster receives ``(t, expiry)``. Days without strikes, without a full
    realized window, or where the forecaster fails are skipped and counted.
    ``open_range`` optionally restricts origination dates to ``[start, end]``.
    """
    if tenor not in market.strikes:
        raise KeyError(f"no strikes for tenor {tenor}")
    idx_strikes, con_strikes = (np.asarray(a, float) for a in market.strikes[tenor])
    n = horizon_days(tenor)
    rows = []
    skipped = {"incomplete": 0, "forecast_failed": 0, "zero_payoff": 0}
    for t, date in enumerate(market.dates):
        if open_range is not None and not (open_range[0] <= date <= open_range[1]):
            continue
        e = t + n
        if e >= len(market.dates) or not np.isfinite(idx_strikes[t]) or not np.all(np.isfinite(con_strikes[t])):
            skipped["incomplete"] += 1
            continue
        trade = DispersionTrade.build(market.basket, idx_strikes[t], con_strikes[t], tenor,
                                      notional, date)
        try:
            rho_hat = float(forecaster(t, e))
            if not math.isfinite(rho_hat):
                raise ValueError("non-finite forecast")
        except (ValueError, LookupError, ArithmeticError):
            skipped["forecast_failed"] += 1
            continue
        rv_b, rv_i = market.realized(t, tenor)
        rho = float(equicorrelation(rv_b, np.sqrt(rv_i), market.basket.w))
        mfic = trade.mfic
        D = dispersion_payoff(trade, rv_b, rv_i)
        D_h = naive_hedge_value(trade, rho_hat, mfic)
        if D == 0:
            err = float("nan")
            skipped["zero_payoff"] += 1
        else:
            err = hedge_error(D, D_h)
        rows.append({"open_date": date, "tenor": tenor, "mfic": mfic, "realized_corr": rho,
                     "forecast_corr": rho_hat, "D": D, "D_h": D_h,
                     "D_adv": advanced_payoff(D, D_h, rho_hat, mfic), "hedge_error": err})
    meta = {"tenor": tenor, "dt": dt_years, "notional": notional, "skipped": skipped,
            "span": (rows[0]["open_date"].isoformat(), rows[-1]["open_date"].isoformat()) if rows else None}
    return BacktestLedger(rows, meta)


@dataclass(frozen=True)
class SummaryStats:
    n: int
    min: float
    max: float
    mean: float
    median: float
    std: float
    skew: float
    kurt: float
    t_stat: float
    p_value: float
    test_defined: bool


def one_sided_t_test(d, alternative: str = "less") -> tuple[float, float, bool]:
    """t test of ``mean(d) = 0``; returns ``(t, p, defined)``.

    A sample with zero spread has no t statistic. Its p-value is then the
    limit for a vanishing spread: 0 when the mean points toward the
    alternative, 1 when it points away, NaN when the mean is zero.
    """
    d = np.asarray(d, float)
    if alternative not in ("less", "greater"):
        raise ValueError("alternative must be 'less' or 'greater'")
    if d.size < 2:
        raise ValueError("t test needs at least 2 observations")
    mean = d.mean()
    # constant up to rounding (e.g. x - (x + 1)) counts as zero spread
    if np.ptp(d) <= 4 * np.finfo(float).eps * np.abs(d).max():
        if mean == 0:
            return float("nan"), float("nan"), False
        toward = mean < 0 if alternative == "less" else mean > 0
        return math.copysign(math.inf, mean), 0.0 if toward else 1.0, False
    res = stats.ttest_1samp(d, 0.0, alternative=alternative)
    return float(res.statistic), float(res.pvalue), True


def payoff_summary(series, other=None, alternative: str = "less") -> SummaryStats:
    """Moments of a series plus a one-sided t test on it (or on ``series - other``)."""
    x = np.asarray(series, float)
    if x.size < 2:
        raise ValueError("summary needs at least 2 observations")
    c = x - x.mean()
    m2 = np.mean(c * c)
    # standardise before raising to powers so tiny spreads do not underflow
    sd = math.sqrt(m2)
    if sd > np.finfo(float).eps * np.abs(x).max():
        u = c / sd
        skew, kurt = np.mean(u ** 3), np.mean(u ** 4)
    else:
        skew = kurt = float("nan")
    d = x if other is None else x - np.asarray(other, float)
    t, p, ok = one_sided_t_test(d, alternative)
    return SummaryStats(int(x.size), float(x.min()), float(x.max()), float(x.mean()),
                        float(np.median(x)), float(x.std(ddof=1)), float(skew), float(kurt),
                        t, p, ok)


def _tenor_label(tau: float) -> str:
    return f"{tau:g}"


def hedge_error_table(errors_by_tenor: Mapping[float, Sequence[float]]) -> str:
    """Plain-text table of hedge-error moments, one row per tenor."""
    cols = ["Min", "Max", "Mean", "Median", "Stdd", "Skew", "Kurt"]
    lines = [f"{'tau':>6} |" + "".join(f"{c:>10}" for c in cols)]
    lines.append("-" * len(lines[0]))
    for tau in sorted(errors_by_tenor):
        s = payoff_summary(errors_by_tenor[tau])
        vals = [s.min, s.max, s.mean, s.median, s.std, s.skew, s.kurt]
        lines.append(f"{_tenor_label(tau):>6} |" + "".join(f"{v:>10.2f}" for v in vals))
    return "\n".join(lines) + "\n"


def strategy_table(payoffs: Mapping[str, Mapping[float, Sequence[float]]]) -> str:
    """Plain-text table: strategy blocks by tenor with min, max, mean and stdd."""
    cols = ["Min", "Max", "Mean", "Stdd"]
    head = f"{'Strategy':<18}|{'tau':>7} |" + "".join(f"{c:>11}" for c in cols)
    lines = [head, "=" * len(head)]
    for key in ("D", "D-D_h", "D_adv"):
        if key not in payoffs:
            continue
        name, note = STRATEGY_LABELS[key]
        for k, tau in enumerate(sorted(payoffs[key])):
            s = payoff_summary(payoffs[key][tau])
            label = name if k == 0 else note if k == 1 else ""
            lines.append(f"{label:<18}|{_tenor_label(tau):>7} |"
                         + "".join(f"{v:>11.4f}" for v in (s.min, s.max, s.mean, s.std)))
        lines.append("-" * len(head))
    return "\n".join(lines) + "\n"
