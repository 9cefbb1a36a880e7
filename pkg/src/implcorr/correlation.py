"""Equicorrelation algebra, implied correlation surfaces, Fisher-Z and the volatility-regime correction."""

from __future__ import annotations

import csv
import datetime as dt
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from implcorr.marketdata import TAU_BOUNDS, DataError, SurfacePoint

FISHER_CUTOFF = 0.9999
ICS_HEADER = ["date", "kappa", "tau", "rho"]


@dataclass(frozen=True)
class BasketSpec:
    tickers: tuple[str, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.tickers) < 2 or len(self.tickers) != len(self.weights):
            raise ValueError("basket needs at least two tickers with one weight each")
        w = np.asarray(self.weights)
        if np.any(w <= 0) or abs(w.sum() - 1.0) >= 1e-12:
            raise ValueError("basket weights must be positive and sum to 1")

    @property
    def w(self) -> np.ndarray:
        return np.asarray(self.weights, float)


@dataclass(frozen=True)
class CorrelationPoint:
    rho: float
    kappa: float
    tau: float
    date: dt.date | None = None
    index_vol: float | None = None  # index implied vol at (kappa, tau), decimal

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


def _cross_sum(vols, weights):
    """sum_{i != j} w_i w_j s_i s_j along the last axis."""
    ws = np.asarray(weights, float) * np.asarray(vols, float)
    return np.sum(ws, axis=-1) ** 2 - np.sum(ws * ws, axis=-1)


def basket_variance_bounds(vols, weights):
    """Basket variance at zero and at perfect correlation."""
    ws = np.asarray(weights, float) * np.asarray(vols, float)
    v_min = np.sum(ws * ws, axis=-1)
    return v_min, np.sum(ws, axis=-1) ** 2


def basket_variance(vols, weights, rho):
    """Basket variance with every pairwise correlation equal to ``rho``."""
    vols = np.asarray(vols, float)
    weights = np.asarray(weights, float)
    n = vols.shape[-1]
    if np.any(vols < 0):
        raise ValueError("vols must be non-negative")
    rho_arr = np.asarray(rho, float)
    if np.any(rho_arr <= -1.0 / (n - 1)) or np.any(rho_arr > 1):
        raise ValueError(f"rho must lie in (-1/(N-1), 1] for N={n}")
    out = np.sum((weights * vols) ** 2, axis=-1) + rho_arr * _cross_sum(vols, weights)
    return float(out) if np.ndim(out) == 0 else out


def equicorrelation(basket_var, vols, weights):
    """The single correlation that reproduces ``basket_var`` from the constituent vols."""
    denom = _cross_sum(vols, weights)
    if np.any(np.asarray(denom) <= 0):
        raise ValueError("equicorrelation undefined: fewer than two nonzero constituent vols")
    v_min = np.sum((np.asarray(weights, float) * np.asarray(vols, float)) ** 2, axis=-1)
    out = (np.asarray(basket_var, float) - v_min) / denom
    return float(out) if np.ndim(out) == 0 else out


def diversification_ratio(basket_var, vols, weights):
    """Position of the basket variance between its zero- and full-correlation bounds."""
    v_min, v_max = basket_variance_bounds(vols, weights)
    out = (np.asarray(basket_var, float) - v_min) / (v_max - v_min)
    return float(out) if np.ndim(out) == 0 else out


def decomposition_weights(vols, weights) -> np.ndarray:
    """Pair weights ``c_ij`` (zero diagonal) that average pairwise correlations into the equicorrelation."""
    ws = np.asarray(weights, float) * np.asarray(vols, float)
    c = np.outer(ws, ws)
    np.fill_diagonal(c, 0.0)
    total = c.sum()
    if total <= 0:
        raise ValueError("decomposition weights undefined for a degenerate basket")
    return c / total


def weighted_average_decomposition(corr_matrix, vols, weights) -> float:
    corr = np.asarray(corr_matrix, float)
    if corr.shape[0] != corr.shape[1] or not np.allclose(corr, corr.T, atol=1e-12, rtol=0):
        raise ValueError("correlation matrix must be symmetric")
    if not np.allclose(np.diag(corr), 1.0, atol=1e-12, rtol=0):
        raise ValueError("correlation matrix must have a unit diagonal")
    return float(np.sum(decomposition_weights(vols, weights) * corr))


def implied_correlation(index_iv, constituent_ivs, weights):
    """Equicorrelation implied by an index IV and constituent IVs (last axis = constituents)."""
    return equicorrelation(np.asarray(index_iv, float) ** 2, constituent_ivs, weights)


def _group_by_expiry(points: Iterable[SurfacePoint]):
    groups = defaultdict(list)
    for p in points:
        groups[p.expiry].append(p)
    out = {}
    for exp, pts in groups.items():
        pts.sort(key=lambda p: p.kappa)
        k = np.array([p.kappa for p in pts])
        v = np.array([p.value for p in pts])
        # duplicate strikes within an expiry: average their IVs
        uk, inv = np.unique(k, return_inverse=True)
        uv = np.bincount(inv, weights=v) / np.bincount(inv)
        out[exp] = (uk, uv)
    return out


def implied_correlation_points(index_iv_day: Sequence[SurfacePoint],
                               constituent_iv_days: Mapping[str, Sequence[SurfacePoint]],
                               weights: Mapping[str, float],
                               date: dt.date | None = None):
    """Implied correlation at each index IV observation of one day.

    Constituent IVs are linearly interpolated in kappa within the same expiry
    as the index point; points needing extrapolation for any constituent are
    dropped. Returns ``(points, diagnostics)``.
    """
    tickers = sorted(weights)
    w = np.array([weights[t] for t in tickers])
    books = {t: _group_by_expiry(constituent_iv_days.get(t, ())) for t in tickers}
    diag = {"uncovered_expiry": 0, "extrapolation": 0, "kept": 0}
    by_exp = defaultdict(list)
    for p in index_iv_day:
        by_exp[p.expiry].append(p)

    out = []
    for exp in sorted(by_exp, key=lambda e: (e is None, e)):
        pts = by_exp[exp]
        if any(exp not in books[t] or books[t][exp][0].size < 2 for t in tickers):
            diag["uncovered_expiry"] += len(pts)
            continue
        kappa = np.array([p.kappa for p in pts])
        sig = np.empty((len(pts), len(tickers)))
        inside = np.ones(len(pts), bool)
        for i, t in enumerate(tickers):
            k, v = books[t][exp]
            inside &= (kappa >= k[0]) & (kappa <= k[-1])
            sig[:, i] = np.interp(kappa, k, v)
        diag["extrapolation"] += int((~inside).sum())
        index_iv = np.array([p.value for p in pts])
        rho = implied_correlation(index_iv, sig, w)
        for p, r, ok, s in zip(pts, np.atleast_1d(rho), inside, index_iv):
            if ok:
                out.append(CorrelationPoint(float(r), p.kappa, p.tau, date, float(s)))
    diag["kept"] = len(out)
    return out, diag


def atm_index_vol(index_iv_day: Sequence[SurfacePoint], min_tau: float = TAU_BOUNDS[0]) -> float:
    """Index IV at kappa = 1 on the shortest expiry with tau >= ``min_tau`` that brackets kappa = 1."""
    groups = _group_by_expiry(index_iv_day)
    taus = {}
    for p in index_iv_day:
        taus.setdefault(p.expiry, p.tau)
    for exp in sorted(groups, key=lambda e: taus[e]):
        if taus[exp] < min_tau - 1e-12:
            continue
        k, v = groups[exp]
        if k[0] <= 1.0 <= k[-1]:
            return float(np.interp(1.0, k, v))
    raise ValueError("no expiry brackets kappa = 1")


def fisher_z(u):
    u = np.asarray(u, float)
    if np.any(np.abs(u) >= 1):
        raise ValueError("Fisher-Z requires |u| < 1")
    out = np.arctanh(u)
    return float(out) if out.ndim == 0 else out


def fisher_z_inv(y):
    out = np.tanh(np.asarray(y, float))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Breakpoint:
    threshold: float
    slope_low: float
    slope_high: float
    intercept_low: float
    intercept_high: float
    sse: float = float("nan")

    def predict(self, x):
        x = np.asarray(x, float)
        return np.where(x <= self.threshold,
                        self.intercept_low + self.slope_low * x,
                        self.intercept_high + self.slope_high * x)


def fit_breakpoint(x, y) -> Breakpoint:
    """Continuous two-segment least-squares line with one knot.

    The knot is searched exhaustively over midpoints of consecutive distinct
    regressor values, which gives the global SSE optimum.
    """
    x = np.asarray(x, float).ravel()
    y = np.asarray(y, float).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y must have the same length")
    ux = np.unique(x)
    if ux.size < 2:
        raise ValueError("regressor is constant")
    if x.size < 20 or ux.size < 10:
        raise ValueError("need >= 20 observations and >= 10 distinct regressor values")
    candidates = 0.5 * (ux[1:] + ux[:-1])
    base = np.column_stack([np.ones_like(x), x])
    best = None
    for c in candidates:
        A = np.column_stack([base, np.maximum(x - c, 0.0)])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        r = y - A @ coef
        sse = float(r @ r)
        if best is None or sse < best[0]:
            best = (sse, c, coef)
    sse, c, (a, b1, b2) = best
    return Breakpoint(float(c), float(b1), float(b1 + b2), float(a), float(a - b2 * c), sse)


class SegmentedRegression(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_breakpoint` for a single regressor."""

    def fit(self, X, y):
        X = np.asarray(X, float)
        self.breakpoint_ = fit_breakpoint(X.reshape(len(X), -1)[:, 0], y)
        return self

    def predict(self, X):
        check_is_fitted(self, "breakpoint_")
        X = np.asarray(X, float)
        return self.breakpoint_.predict(X.reshape(len(X), -1)[:, 0])


def regime_correct(points: Sequence[CorrelationPoint], index_atm_vol_by_day: Mapping,
                   bp: Breakpoint, cutoff: float = FISHER_CUTOFF) -> list[CorrelationPoint]:
    """High-volatility regime rule on implied correlation points.

    Vols are in percentage points. On days whose ATM index vol exceeds the
    threshold each point's correlation becomes ``slope_high`` times the index
    vol at that point. Points with ``|rho| >= cutoff`` are then dropped.
    """
    out = []
    for p in points:
        if p.date not in index_atm_vol_by_day:
            raise KeyError(f"missing ATM index vol for {p.date}")
        if index_atm_vol_by_day[p.date] > bp.threshold:
            if p.index_vol is None:
                raise ValueError(f"point on {p.date} carries no index vol")
            p = replace(p, rho=bp.slope_high * 100.0 * p.index_vol)
        if abs(p.rho) < cutoff:
            out.append(p)
    return out


def write_ics_csv(points: Iterable[CorrelationPoint], stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(ICS_HEADER)
    for p in points:
        w.writerow([p.date.isoformat(), repr(float(p.kappa)), repr(float(p.tau)), repr(float(p.rho))])


def read_ics_csv(stream: TextIO) -> list[CorrelationPoint]:
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None:
        return []
    if [h.strip() for h in header] != ICS_HEADER:
        raise DataError(f"expected header {','.join(ICS_HEADER)}", 1)
    out = []
    for row in reader:
        if not row:
            continue
        try:
            out.append(CorrelationPoint(float(row[3]), float(row[1]), float(row[2]),
                                        dt.date.fromisoformat(row[0])))
        except (ValueError, IndexError) as exc:
            raise DataError(str(exc), reader.line_num) from None
    return out
