"""Unit-root testing, VAR order selection, estimation, diagnostics and forecasting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

ADF_CRITICAL_5PCT = -2.86
MIN_ADF_LENGTH = 30


@dataclass(frozen=True)
class TestReport:
    statistic: float
    lags_used: int
    reject_at_5pct: bool
    detail: str = ""
    p_value: float = float("nan")
    df: int | None = None

    __test__ = False  # keep pytest from collecting this class


def _ols(y, X):
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    return beta, resid


def _adf_design(x, k, start):
    """Regression of dx_t on [1, x_{t-1}, dx_{t-1}..dx_{t-k}] for rows t >= start."""
    dx = np.diff(x)
    # dx[i] = x[i+1] - x[i]; response index i runs from start - 1 so that k lags exist
    rows = np.arange(start - 1, dx.size)
    cols = [np.ones(rows.size), x[rows]]
    cols += [dx[rows - i] for i in range(1, k + 1)]
    return dx[rows], np.column_stack(cols)


def _t_stats(y, X):
    beta, resid = _ols(y, X)
    dof = X.shape[0] - X.shape[1]
    s2 = resid @ resid / dof
    se = np.sqrt(np.diag(s2 * np.linalg.inv(X.T @ X)))
    return beta / se, dof


def adf_test(series, start_lags: int = 3) -> TestReport:
    """Augmented Dickey-Fuller test with a constant.

    Starting from ``start_lags`` augmentation lags, the last lag is dropped
    while it is insignificant at 5% (two-sided t test), with every candidate
    fitted on the sample that the largest lag allows. The reported statistic
    refits the chosen lag count on its full available sample.
    """
    x = np.asarray(series, float).ravel()
    if x.size < MIN_ADF_LENGTH:
        raise ValueError(f"ADF needs at least {MIN_ADF_LENGTH} observations, got {x.size}")
    if start_lags < 0:
        raise ValueError("start_lags must be non-negative")
    k = start_lags
    while k > 0:
        y, X = _adf_design(x, k, start_lags + 1)
        t, dof = _t_stats(y, X)
        if abs(t[-1]) > stats.t.ppf(0.975, dof):
            break
        k -= 1
    y, X = _adf_design(x, k, k + 1)
    t, _ = _t_stats(y, X)
    stat = float(t[1])
    reject = stat < ADF_CRITICAL_5PCT
    return TestReport(stat, k, bool(reject),
                      f"constant only, {X.shape[0]} obs, 5% critical value {ADF_CRITICAL_5PCT}")


def _lag_matrix(Z, p, offset=0):
    """Response rows t = p + offset .. T-1 and design [1, Z_{t-1}, ..., Z_{t-p}]."""
    T = Z.shape[0]
    rows = np.arange(p + offset, T)
    X = np.column_stack([np.ones(rows.size)] + [Z[rows - i] for i in range(1, p + 1)])
    return Z[rows], X


@dataclass
class VarModel:
    p: int
    intercept: np.ndarray
    coefs: np.ndarray  # (p, L, L); coefs[i] multiplies Z_{t-i-1}
    sigma_u: np.ndarray
    sample_span: tuple = (0, 0)
    residuals: np.ndarray = field(default=None, repr=False)
    std_errors: np.ndarray = field(default=None, repr=False)  # same layout as [intercept; coefs]

    @property
    def n_series(self) -> int:
        return self.intercept.size

    def companion(self) -> np.ndarray:
        L, p = self.n_series, self.p
        C = np.zeros((L * p, L * p))
        C[:L] = np.concatenate(list(self.coefs), axis=1)
        C[L:, :-L] = np.eye(L * (p - 1))
        return C

    def is_stable(self) -> bool:
        return bool(np.max(np.abs(np.linalg.eigvals(self.companion()))) < 1)

    def forecast(self, z_history, horizon: int) -> np.ndarray:
        return forecast_var(self, z_history, horizon)

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "intercept": self.intercept.tolist(),
            "coefs": self.coefs.tolist(),
            "sigma_u": self.sigma_u.tolist(),
            "sample_span": list(self.sample_span),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VarModel":
        return cls(int(d["p"]), np.asarray(d["intercept"], float),
                   np.asarray(d["coefs"], float).reshape(int(d["p"]), len(d["intercept"]), -1),
                   np.asarray(d["sigma_u"], float), tuple(d["sample_span"]))


def _as_matrix(Z):
    Z = np.asarray(Z, float)
    return Z[:, None] if Z.ndim == 1 else Z


def fit_var(Z, p: int, offset: int = 0) -> VarModel:
    """Equation-by-equation OLS VAR(p) with intercept.

    ``offset`` drops extra leading rows so fits of different orders can share a sample.
    """
    Z = _as_matrix(Z)
    T, L = Z.shape
    if p < 1:
        raise ValueError("lag order must be >= 1")
    if T - offset <= L * p + 10:
        raise ValueError(f"need more than {L * p + 10} observations for VAR({p}), got {T - offset}")
    Y, X = _lag_matrix(Z, p, offset)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValueError("singular VAR design matrix")
    B, resid = _ols(Y, X)
    nobs = Y.shape[0]
    k = X.shape[1]
    sigma = resid.T @ resid / (nobs - k)
    sigma = 0.5 * (sigma + sigma.T)
    se = np.sqrt(np.outer(np.diag(np.linalg.inv(X.T @ X)), np.diag(sigma)))
    coefs = B[1:].reshape(p, L, L).transpose(0, 2, 1)
    return VarModel(p, B[0].copy(), coefs, sigma, (p + offset, T - 1), resid, se)


def _info_criteria(model: VarModel) -> dict:
    resid = model.residuals
    nobs, L = resid.shape
    sigma_ml = resid.T @ resid / nobs
    _, logdet = np.linalg.slogdet(sigma_ml)
    k = model.p * L * L + L
    return {
        "aic": logdet + 2.0 * k / nobs,
        "hqic": logdet + 2.0 * np.log(np.log(nobs)) * k / nobs,
        "sbic": logdet + np.log(nobs) * k / nobs,
    }


@dataclass
class LagOrderTable:
    rows: list[dict]  # one dict per p with keys p, aic, hqic, sbic
    best: dict  # criterion -> selected p

    def to_text(self) -> str:
        lines = [f"{'p':>3} {'AIC':>12} {'HQIC':>12} {'SBIC':>12}"]
        for r in self.rows:
            marks = {c: "*" if self.best[c] == r["p"] else " " for c in ("aic", "hqic", "sbic")}
            lines.append(f"{r['p']:>3} {r['aic']:>11.5f}{marks['aic']} {r['hqic']:>11.5f}{marks['hqic']}"
                         f" {r['sbic']:>11.5f}{marks['sbic']}")
        return "\n".join(lines) + "\n"


def select_lag_order(Z, p_max: int = 4) -> LagOrderTable:
    """Information criteria for VAR(1..p_max) fitted on the common sample after p_max rows."""
    Z = _as_matrix(Z)
    T, L = Z.shape
    if p_max < 1:
        raise ValueError("p_max must be >= 1")
    if T <= L * p_max + 10:
        raise ValueError(f"need more than {L * p_max + 10} observations, got {T}")
    rows = []
    for p in range(1, p_max + 1):
        crit = _info_criteria(fit_var(Z, p, offset=p_max - p))
        rows.append({"p": p, **{c: float(v) for c, v in crit.items()}})
    best = {c: min(rows, key=lambda r: r[c])["p"] for c in ("aic", "hqic", "sbic")}
    return LagOrderTable(rows, best)


def portmanteau_test(residuals, max_lag: int = 10, p: int = 0) -> TestReport:
    """Multivariate Ljung-Box test for residual autocorrelation up to ``max_lag``.

    Pass the lag order ``p`` of the fitted VAR (or the fitted ``VarModel``
    itself) to get ``L^2 (max_lag - p)`` degrees of freedom.
    """
    if isinstance(residuals, VarModel):
        p = residuals.p
        residuals = residuals.residuals
    u = _as_matrix(residuals)
    if max_lag <= p:
        raise ValueError(f"max_lag ({max_lag}) must exceed the VAR order ({p})")
    T, L = u.shape
    if T <= max_lag:
        raise ValueError("residual series shorter than max_lag")
    df = L * L * (max_lag - p)
    u = u - u.mean(axis=0)
    c0 = u.T @ u / T
    if not np.any(c0):
        return TestReport(0.0, max_lag, False, "zero residuals", 1.0, df)
    c0_inv = np.linalg.pinv(c0)
    q = 0.0
    for h in range(1, max_lag + 1):
        ch = u[h:].T @ u[:-h] / T
        q += np.trace(ch.T @ c0_inv @ ch @ c0_inv) / (T - h)
    q *= T * T
    pval = float(stats.chi2.sf(q, df))
    return TestReport(float(q), max_lag, bool(pval < 0.05), f"df={df}", pval, df)


def forecast_var(model: VarModel, z_history, horizon: int) -> np.ndarray:
    """Iterated conditional-mean forecasts, shape (horizon, L)."""
    hist = _as_matrix(z_history)
    if hist.shape[0] < model.p:
        raise ValueError(f"need at least {model.p} observations of history")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    lags = [hist[-i] for i in range(1, model.p + 1)]
    out = np.empty((horizon, model.n_series))
    for h in range(horizon):
        nxt = model.intercept + sum(model.coefs[i] @ lags[i] for i in range(model.p))
        out[h] = nxt
        lags = [nxt] + lags[:-1]
    return out


class FactorDynamics(BaseEstimator):
    """VAR dynamics for factor scores with first differencing of unit-root factors.

    Parameters
    ----------
    p : int or "auto"
        Lag order. ``"auto"`` takes the order picked by at least two of the
        three information criteria, falling back to HQIC.
    p_max : int
    adf_start_lags : int
    difference : "auto", bool or sequence of bool
        Which factors to difference; ``"auto"`` differences those failing ADF.
    """

    def __init__(self, p="auto", p_max=4, adf_start_lags=3, difference="auto"):
        self.p = p
        self.p_max = p_max
        self.adf_start_lags = adf_start_lags
        self.difference = difference

    def _transform(self, Z):
        Z = _as_matrix(Z)
        if not self.differenced_.any():
            return Z
        W = Z[1:].copy()
        W[:, self.differenced_] = np.diff(Z[:, self.differenced_], axis=0)
        return W

    def fit(self, Z, y=None):
        Z = _as_matrix(Z)
        L = Z.shape[1]
        if isinstance(self.difference, str):
            self.adf_reports_ = [adf_test(Z[:, l], self.adf_start_lags) for l in range(L)]
            self.differenced_ = np.array([not r.reject_at_5pct for r in self.adf_reports_])
        else:
            flags = np.broadcast_to(np.asarray(self.difference, bool), (L,))
            self.adf_reports_ = []
            self.differenced_ = flags.copy()
        W = self._transform(Z)
        if self.p == "auto":
            self.lag_table_ = select_lag_order(W, self.p_max)
            votes = list(self.lag_table_.best.values())
            majority = [v for v in set(votes) if votes.count(v) >= 2]
            p = majority[0] if majority else self.lag_table_.best["hqic"]
        else:
            p = int(self.p)
            # the table is still reported for a fixed order, when the sample allows it
            try:
                self.lag_table_ = select_lag_order(W, max(self.p_max, p))
            except ValueError:
                self.lag_table_ = None
        self.var_ = fit_var(W, p)
        self.portmanteau_ = portmanteau_test(self.var_, max(10, p + 1))
        return self

    def forecast(self, z_history, horizon: int = 1) -> np.ndarray:
        """Forecasts of the factor levels, shape (horizon, L)."""
        check_is_fitted(self, "var_")
        Z = _as_matrix(z_history)
        W = self._transform(Z)
        fw = forecast_var(self.var_, W, horizon)
        if self.differenced_.any():
            fw[:, self.differenced_] = Z[-1, self.differenced_] + np.cumsum(
                fw[:, self.differenced_], axis=0)
        return fw

    def to_dict(self) -> dict:
        check_is_fitted(self, "var_")
        return {
            "differenced": self.differenced_.tolist(),
            "var": self.var_.to_dict(),
            "adf": [{"statistic": r.statistic, "lags_used": r.lags_used,
                     "reject_at_5pct": r.reject_at_5pct} for r in self.adf_reports_],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FactorDynamics":
        obj = cls(p=int(d["var"]["p"]), difference=list(d["differenced"]))
        obj.differenced_ = np.asarray(d["differenced"], bool)
        obj.var_ = VarModel.from_dict(d["var"])
        obj.adf_reports_ = [TestReport(a["statistic"], a["lags_used"], a["reject_at_5pct"])
                            for a in d["adf"]]
        obj.lag_table_ = None
        return obj
