"""Option-trade ingestion, liquid-segment filtering and the pooled ECDF coordinate map."""

from __future__ import annotations

import csv
import datetime as dt
import io
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

TRADING_DAYS = 252
KAPPA_BOUNDS = (0.8, 1.2)
TAU_BOUNDS = (10 / TRADING_DAYS, 1.0)
MAX_IMPLIED_VOL = 0.5

TRADE_HEADER = ["trade_date", "expiry_date", "underlying", "strike", "price", "right", "style"]
SNAPSHOT_HEADER = ["date", "ticker", "spot", "weight"]
RATES_HEADER = ["date", "tenor_years", "rate"]
DIVIDENDS_HEADER = ["ticker", "ex_date", "amount"]
VARSWAP_HEADER = ["date", "ticker", "tenor_years", "strike_var"]

_RIGHTS = {"P": "put", "C": "call"}
_STYLES = {"E": "european", "A": "american"}


class DataError(ValueError):
    """Malformed input row; carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class OptionTrade:
    trade_date: dt.date
    expiry_date: dt.date
    underlying: str
    strike: float
    price: float
    right: str  # "put" | "call"
    style: str  # "european" | "american"

    def __post_init__(self):
        if self.expiry_date <= self.trade_date:
            raise ValueError(f"expiry {self.expiry_date} not after trade date {self.trade_date}")
        if not self.strike > 0:
            raise ValueError(f"strike must be positive, got {self.strike}")
        if not self.price > 0:
            raise ValueError(f"price must be positive, got {self.price}")
        if self.right not in ("put", "call"):
            raise ValueError(f"unknown right {self.right!r}")
        if self.style not in ("european", "american"):
            raise ValueError(f"unknown style {self.style!r}")


@dataclass
class MarketSnapshot:
    date: dt.date
    spot_by_ticker: dict[str, float]
    weights: dict[str, float]
    rate_curve: list[tuple[float, float]]
    dividends: dict[str, list[tuple[dt.date, float]]] = field(default_factory=dict)

    def __post_init__(self):
        if self.weights:
            total = sum(self.weights.values())
            if abs(total - 1.0) > 1e-12:
                raise ValueError(f"weights on {self.date} sum to {total!r}, not 1")
            if any(not 0.0 < w < 1.0 for w in self.weights.values()):
                raise ValueError(f"weights on {self.date} must lie in (0, 1)")
        tenors = [t for t, _ in self.rate_curve]
        if any(b <= a for a, b in zip(tenors, tenors[1:])):
            raise ValueError(f"rate curve tenors on {self.date} not strictly increasing")


@dataclass(frozen=True)
class SurfacePoint:
    kappa: float
    tau: float
    value: float
    expiry: dt.date | None = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass
class SurfacePanel:
    """Per-day scattered observations ``(kappa, tau) -> value``."""

    days: list[tuple[dt.date, list[SurfacePoint]]]

    def __post_init__(self):
        dates = [d for d, _ in self.days]
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise ValueError("panel dates must be strictly increasing")
        for d, pts in self.days:
            if not pts:
                raise ValueError(f"panel day {d} has no observations")

    @property
    def dates(self) -> list[dt.date]:
        return [d for d, _ in self.days]

    def __len__(self):
        return len(self.days)

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``X`` (n, 2) of (kappa, tau), values ``y`` and integer day labels."""
        X, y, day = [], [], []
        for t, (_, pts) in enumerate(self.days):
            for p in pts:
                X.append((p.kappa, p.tau))
                y.append(p.value)
                day.append(t)
        return np.asarray(X, float).reshape(-1, 2), np.asarray(y, float), np.asarray(day, int)

    @classmethod
    def from_arrays(cls, dates, X, y, day) -> "SurfacePanel":
        X = np.asarray(X, float)
        y = np.asarray(y, float)
        day = np.asarray(day, int)
        days = []
        for t, d in enumerate(dates):
            idx = np.flatnonzero(day == t)
            if idx.size:
                days.append((d, [SurfacePoint(X[i, 0], X[i, 1], y[i]) for i in idx]))
        return cls(days)


def _parse_date(text: str, line: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"bad ISO date {text!r}", line) from None


def _parse_float(text: str, line: int, name: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"bad {name} {text!r}", line) from None


def _reader(stream: TextIO, header: list[str]) -> Iterable[tuple[int, dict[str, str]]]:
    reader = csv.reader(stream)
    first = next(reader, None)
    if first is None:
        return
    if [h.strip() for h in first] != header:
        raise DataError(f"expected header {','.join(header)}", 1)
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"expected {len(header)} fields, got {len(row)}", line)
        yield line, dict(zip(header, (c.strip() for c in row)))


def parse_trades(stream: TextIO) -> list[OptionTrade]:
    """Parse a trades CSV into :class:`OptionTrade` records, in file order."""
    trades = []
    for line, row in _reader(stream, TRADE_HEADER):
        right = _RIGHTS.get(row["right"].upper())
        style = _STYLES.get(row["style"].upper())
        if right is None:
            raise DataError(f"right must be P or C, got {row['right']!r}", line)
        if style is None:
            raise DataError(f"style must be E or A, got {row['style']!r}", line)
        try:
            trades.append(OptionTrade(
                trade_date=_parse_date(row["trade_date"], line),
                expiry_date=_parse_date(row["expiry_date"], line),
                underlying=row["underlying"],
                strike=_parse_float(row["strike"], line, "strike"),
                price=_parse_float(row["price"], line, "price"),
                right=right,
                style=style,
            ))
        except DataError:
            raise
        except ValueError as exc:
            raise DataError(str(exc), line) from None
    return trades


def write_trades(trades: Iterable[OptionTrade], stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(TRADE_HEADER)
    for t in trades:
        w.writerow([
            t.trade_date.isoformat(), t.expiry_date.isoformat(), t.underlying,
            repr(float(t.strike)), repr(float(t.price)),
            "P" if t.right == "put" else "C", "E" if t.style == "european" else "A",
        ])


def trades_to_csv(trades: Iterable[OptionTrade]) -> str:
    buf = io.StringIO()
    write_trades(trades, buf)
    return buf.getvalue()


def parse_snapshots(stream: TextIO, rates: TextIO | None = None, dividends: TextIO | None = None,
                    index_ticker: str | None = None) -> dict[dt.date, MarketSnapshot]:
    """Assemble per-date snapshots from the snapshot, rate and dividend CSVs.

    Rows with an empty ``weight`` field (the index itself) carry a spot only.
    """
    spots: dict[dt.date, dict[str, float]] = {}
    weights: dict[dt.date, dict[str, float]] = {}
    for line, row in _reader(stream, SNAPSHOT_HEADER):
        d = _parse_date(row["date"], line)
        spot = _parse_float(row["spot"], line, "spot")
        if not spot > 0:
            raise DataError(f"spot must be positive, got {spot}", line)
        spots.setdefault(d, {})[row["ticker"]] = spot
        weights.setdefault(d, {})
        if row["weight"] and row["ticker"] != index_ticker:
            weights[d][row["ticker"]] = _parse_float(row["weight"], line, "weight")

    curves: dict[dt.date, list[tuple[float, float]]] = {}
    if rates is not None:
        for line, row in _reader(rates, RATES_HEADER):
            d = _parse_date(row["date"], line)
            curves.setdefault(d, []).append((_parse_float(row["tenor_years"], line, "tenor"),
                                             _parse_float(row["rate"], line, "rate")))

    divs: dict[str, list[tuple[dt.date, float]]] = {}
    if dividends is not None:
        for line, row in _reader(dividends, DIVIDENDS_HEADER):
            amount = _parse_float(row["amount"], line, "amount")
            if amount < 0:
                raise DataError("dividend amount must be non-negative", line)
            divs.setdefault(row["ticker"], []).append((_parse_date(row["ex_date"], line), amount))
    for v in divs.values():
        v.sort()

    out = {}
    for d in sorted(spots):
        try:
            out[d] = MarketSnapshot(d, spots[d], weights[d], sorted(curves.get(d, [])), divs)
        except ValueError as exc:
            raise DataError(str(exc)) from None
    return out


def parse_varswaps(stream: TextIO) -> pd.DataFrame:
    """Variance-swap strike quotes (annualized variance) per date, ticker and tenor."""
    rows = []
    for line, row in _reader(stream, VARSWAP_HEADER):
        strike = _parse_float(row["strike_var"], line, "strike_var")
        if strike < 0:
            raise DataError("strike_var must be non-negative", line)
        rows.append((_parse_date(row["date"], line), row["ticker"],
                     _parse_float(row["tenor_years"], line, "tenor"), strike))
    return pd.DataFrame(rows, columns=VARSWAP_HEADER)


def year_fraction(start: dt.date, end: dt.date) -> float:
    """Trading-day year fraction: business days in ``[start, end)`` over 252."""
    return float(np.busday_count(start, end)) / TRADING_DAYS


def interpolate_rate(curve, tau: float) -> float:
    """Piecewise-linear rate at ``tau``; clamps outside the curve's tenor range."""
    if not len(curve):
        raise ValueError("empty rate curve")
    tenors, rates = zip(*curve)
    return float(np.interp(tau, tenors, rates))


def filter_and_prepare(trades: Iterable[OptionTrade],
                       snapshots: dict[dt.date, MarketSnapshot]) -> pd.DataFrame:
    """Attach forward moneyness, maturity and rate; keep the liquid OTM segment.

    Kept: puts with kappa < 1, calls with kappa >= 1, kappa in [0.8, 1.2] and
    tau in [10/252, 1]. Implied-volatility screening happens after inversion.
    """
    rows = []
    for tr in trades:
        snap = snapshots.get(tr.trade_date)
        if snap is None:
            raise KeyError(f"no market snapshot for trade date {tr.trade_date}")
        if tr.underlying not in snap.spot_by_ticker:
            raise KeyError(f"no spot for {tr.underlying} on {tr.trade_date}")
        spot = snap.spot_by_ticker[tr.underlying]
        tau = year_fraction(tr.trade_date, tr.expiry_date)
        if not TAU_BOUNDS[0] <= tau <= TAU_BOUNDS[1]:
            continue
        rate = interpolate_rate(snap.rate_curve, tau) if snap.rate_curve else 0.0
        kappa = tr.strike / (spot * np.exp(rate * tau))
        if not KAPPA_BOUNDS[0] <= kappa <= KAPPA_BOUNDS[1]:
            continue
        if (tr.right == "put") != (kappa < 1.0):
            continue
        divs = tuple(
            (year_fraction(tr.trade_date, ex), amt)
            for ex, amt in snap.dividends.get(tr.underlying, ())
            if tr.trade_date < ex < tr.expiry_date
        )
        rows.append((tr.trade_date, tr.expiry_date, tr.underlying, tr.strike, tr.price, tr.right,
                     tr.style, spot, rate, tau, kappa, divs))
    cols = TRADE_HEADER + ["spot", "rate", "tau", "kappa", "dividends"]
    return pd.DataFrame(rows, columns=cols)


def screen_implied_vols(frame: pd.DataFrame, column: str = "iv") -> pd.DataFrame:
    """Drop rows whose implied vol is missing or above ``MAX_IMPLIED_VOL``."""
    iv = frame[column].to_numpy(float)
    return frame[np.isfinite(iv) & (iv <= MAX_IMPLIED_VOL)]


class EcdfTransformer(TransformerMixin, BaseEstimator):
    """Map each coordinate to its pooled empirical CDF value.

    The forward map is piecewise linear between the observed distinct values,
    so it is exact on the fitted sample and monotone in between; the inverse
    map interpolates the same knots the other way.
    """

    def fit(self, X, y=None):
        X = check_array(X)
        n = X.shape[0]
        self.knots_, self.cdf_ = [], []
        for col in X.T:
            s = np.sort(col)
            values = np.unique(s)
            # number of sample points <= each distinct value
            counts = np.searchsorted(s, values, side="right")
            self.knots_.append(values)
            self.cdf_.append(counts / n)
        self.n_samples_ = n
        return self

    def _check_range(self, X):
        for k, col in enumerate(X.T):
            lo, hi = self.knots_[k][0], self.knots_[k][-1]
            if np.any((col < lo) | (col > hi)):
                raise ValueError(f"coordinate {k} outside observed range [{lo}, {hi}]")

    def transform(self, X, check_range: bool = True):
        check_is_fitted(self, "knots_")
        X = check_array(X)
        if check_range:
            self._check_range(X)
        return np.column_stack([np.interp(col, self.knots_[k], self.cdf_[k])
                                for k, col in enumerate(X.T)])

    def inverse_transform(self, U):
        check_is_fitted(self, "knots_")
        U = check_array(U)
        return np.column_stack([np.interp(col, self.cdf_[k], self.knots_[k])
                                for k, col in enumerate(U.T)])

    def to_dict(self) -> dict:
        return {
            "n_samples": int(self.n_samples_),
            "knots": [k.tolist() for k in self.knots_],
            "cdf": [c.tolist() for c in self.cdf_],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EcdfTransformer":
        obj = cls()
        obj.n_samples_ = d["n_samples"]
        obj.knots_ = [np.asarray(k, float) for k in d["knots"]]
        obj.cdf_ = [np.asarray(c, float) for c in d["cdf"]]
        return obj


def ecdf_transform(panel: SurfacePanel) -> tuple[SurfacePanel, EcdfTransformer]:
    """Pooled ECDF transform of a panel's coordinates; values are untouched."""
    if not len(panel):
        raise ValueError("empty panel")
    X, y, day = panel.to_arrays()
    ecdf = EcdfTransformer().fit(X)
    U = ecdf.transform(X)
    return SurfacePanel.from_arrays(panel.dates, U, y, day), ecdf
