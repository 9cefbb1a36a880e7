"""Seeded synthetic market with a known implied-correlation factor structure.

Randomness comes from a single ``numpy.random.Generator`` (PCG64) seeded with
the configured 64-bit integer, consumed in a fixed order, so a seed fixes
every output byte.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from implcorr.correlation import BasketSpec
from implcorr.marketdata import (DIVIDENDS_HEADER, KAPPA_BOUNDS, RATES_HEADER, SNAPSHOT_HEADER,
                                 TAU_BOUNDS, VARSWAP_HEADER, OptionTrade, interpolate_rate,
                                 write_trades, year_fraction)
from implcorr.strategy import MarketPanel, horizon_days
from implcorr.vol import bs_price, crr_price, realized_variance

INDEX_TICKER = "INDEX"
CONSTITUENT_KAPPAS = tuple(np.round(np.arange(0.8, 1.2001, 0.05), 10))
_NUDGE = 1e-9
MIN_PRICE = 0.05
STRIKE_TENORS = (0.083, 0.25, 0.5, 1.0)


def _norm_coords(kappa, tau):
    ku = (np.asarray(kappa, float) - KAPPA_BOUNDS[0]) / (KAPPA_BOUNDS[1] - KAPPA_BOUNDS[0])
    tu = (np.asarray(tau, float) - TAU_BOUNDS[0]) / (TAU_BOUNDS[1] - TAU_BOUNDS[0])
    return ku, tu


@dataclass
class SynthConfig:
    """Generator settings.

    Surfaces live on the Fisher-Z scale as affine functions
    ``c0 + c1 * ku + c2 * tu`` of moneyness and maturity rescaled to [0, 1].
    The returned correlation is ``tanh(m0 + sum_l Z_l m_l)``.
    """

    seed: int = 20100104
    n_assets: int = 5
    n_days: int = 250
    start_date: str = "2010-01-04"
    obs_per_day: int = 135
    true_factor_count: int = 3
    mean_surface: tuple = (0.7, -0.2, 0.15)
    true_basis: tuple = ((1.0, 0.0, 0.0), (-1.0, 0.0, 2.0), (-1.0, 2.0, 0.0))
    var_coefs: tuple = ((0.7, 0.6, 0.5), (0.2, 0.2, 0.1))  # diagonal VAR(2) lags
    factor_noise: tuple = (0.04, 0.04, 0.03)
    vol_levels: tuple = (0.22, 0.3)  # range of long-run constituent vols
    vol_persistence: float = 0.97
    vol_of_vol: float = 0.05
    smile_slope: float = -0.6  # d IV / d kappa, relative to the ATM level
    term_slope: float = 0.05
    rate_curve: tuple = ((0.25, 0.01), (0.5, 0.011), (1.0, 0.012), (2.0, 0.013))
    dividend_yield: float = 0.01
    tree_steps: int = 200
    regime: dict | None = None  # {"threshold": 21.0, "slope_low": 0.0328, "slope_high": 0.0091, "noise": 0.01}
    oracle_constituent_strikes: bool = False
    weights: tuple | None = None

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.n_assets < 2:
            raise ValueError("n_assets must be >= 2")
        if self.n_days < 2 or self.obs_per_day < 1:
            raise ValueError("n_days must be >= 2 and obs_per_day >= 1")
        if len(self.true_basis) != self.true_factor_count:
            raise ValueError("true_basis needs one surface per factor")
        if len(self.factor_noise) != self.true_factor_count:
            raise ValueError("factor_noise needs one entry per factor")
        if self.companion_radius() >= 1:
            raise ValueError("factor VAR(2) is not stable")

    def basket(self) -> BasketSpec:
        tickers = tuple(f"S{i + 1:02d}" for i in range(self.n_assets))
        if self.weights is not None:
            w = np.asarray(self.weights, float)
        else:
            raw = np.arange(self.n_assets, 0, -1, dtype=float)
            w = raw / raw.sum()
        w = w / w.sum()
        return BasketSpec(tickers, tuple(float(x) for x in w))

    def companion_radius(self) -> float:
        L = self.true_factor_count
        a1, a2 = (np.asarray(v, float)[:L] for v in self.var_coefs)
        C = np.zeros((2 * L, 2 * L))
        C[:L, :L] = np.diag(a1)
        C[:L, L:] = np.diag(a2)
        C[L:, :L] = np.eye(L)
        return float(np.max(np.abs(np.linalg.eigvals(C))))

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown synth settings: {sorted(unknown)}")
        kw = {k: (tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v)
              for k, v in d.items()}
        return cls(**kw)


def true_correlation(config: SynthConfig, z, kappa, tau):
    """Ground-truth correlation surface for score vector ``z`` at raw coordinates."""
    ku, tu = _norm_coords(kappa, tau)
    y = config.mean_surface[0] + config.mean_surface[1] * ku + config.mean_surface[2] * tu
    for zl, (c0, c1, c2) in zip(np.asarray(z, float), config.true_basis):
        y = y + zl * (c0 + c1 * ku + c2 * tu)
    return np.tanh(y)


def simulate_factors(config: SynthConfig, rng, n_days: int) -> np.ndarray:
    L = config.true_factor_count
    a1, a2 = (np.asarray(v, float)[:L] for v in config.var_coefs)
    sd = np.asarray(config.factor_noise, float)
    burn = 200
    Z = np.zeros((n_days + burn, L))
    eps = rng.standard_normal((n_days + burn, L)) * sd
    for t in range(2, n_days + burn):
        Z[t] = a1 * Z[t - 1] + a2 * Z[t - 2] + eps[t]
    return Z[burn:]


def third_friday(year: int, month: int) -> dt.date:
    first = dt.date(year, month, 1)
    offset = (4 - first.weekday()) % 7
    return first + dt.timedelta(days=offset + 14)


def listed_expiries(day: dt.date) -> list[dt.date]:
    """Next three monthly expiries plus quarterly ones, within the liquid maturity band."""
    out = []
    y, m = day.year, day.month
    for k in range(15):
        yy, mm = y + (m - 1 + k) // 12, (m - 1 + k) % 12 + 1
        exp = third_friday(yy, mm)
        tau = year_fraction(day, exp)
        if not TAU_BOUNDS[0] <= tau <= TAU_BOUNDS[1]:
            continue
        monthly = sum(1 for e in out if e[1] == "m")
        if monthly < 3:
            out.append((exp, "m"))
        elif mm in (3, 6, 9, 12):
            out.append((exp, "q"))
    return [e for e, _ in out]


@dataclass
class GeneratedMarket:
    config: SynthConfig
    dates: list
    basket: BasketSpec
    trades: list
    trade_iv: np.ndarray  # generating IV per trade
    trade_rho: np.ndarray  # ground-truth correlation per trade (NaN for constituents)
    spots: dict  # ticker -> (T,) closes
    vols: np.ndarray  # (T, N) ATM constituent vol levels
    factors: np.ndarray  # (T, L)
    returns_corr: np.ndarray  # (T,)
    dividends: list  # (ticker, ex_date, amount)
    varswaps: list  # (date, ticker, tenor, strike_var)
    breakpoint_sample: dict | None = None
    extra: dict = field(default_factory=dict)

    def market_panel(self) -> MarketPanel:
        T = len(self.dates)
        strikes = {}
        lookup = {(d, tk, ten): k for d, tk, ten, k in self.varswaps}
        for ten in STRIKE_TENORS:
            idx = np.array([lookup.get((d, INDEX_TICKER, ten), np.nan) for d in self.dates])
            con = np.array([[lookup.get((d, tk, ten), np.nan) for tk in self.basket.tickers]
                            for d in self.dates]).reshape(T, -1)
            strikes[ten] = (idx, con)
        return MarketPanel(self.dates, self.basket, self.spots[INDEX_TICKER],
                           np.column_stack([self.spots[t] for t in self.basket.tickers]), strikes)


def _constituent_iv(config, atm_vol, kappa, tau):
    return atm_vol * (1.0 + config.smile_slope * (kappa - 1.0) + config.term_slope * (tau - 0.25))


def _basket_iv(sig, w, rho):
    ws = sig * w
    var = np.sum(ws * ws, axis=-1) + rho * (np.sum(ws, axis=-1) ** 2 - np.sum(ws * ws, axis=-1))
    return np.sqrt(var)


def _regime_correlation(reg, x, rng):
    x = np.asarray(x, float)
    thr = reg.get("threshold", 21.0)
    lo = reg.get("slope_low", 0.0328)
    hi = reg.get("slope_high", 0.0091)
    y = np.where(x < thr, lo * x, lo * thr + hi * (x - thr))
    return y + reg.get("noise", 0.01) * rng.standard_normal(x.shape)


def _simulate_state(config: SynthConfig, rng, w):
    """Factor scores, constituent vol levels and the return correlation path."""
    T, N = config.n_days, config.n_assets
    Z = simulate_factors(config, rng, T)
    lo, hi = config.vol_levels
    vbar = np.linspace(lo, hi, N)
    logv = np.log(vbar) + 0.0
    vols = np.empty((T, N))
    shocks = rng.standard_normal((T, N)) * config.vol_of_vol
    for t in range(T):
        logv = np.log(vbar) + config.vol_persistence * (logv - np.log(vbar)) + shocks[t]
        vols[t] = np.exp(logv)

    # returns follow a one-factor equicorrelated model
    tau_short = TAU_BOUNDS[0]
    rho_atm = np.array([true_correlation(config, Z[t], 1.0, tau_short) for t in range(T)])
    index_atm_vol = _basket_iv(_constituent_iv(config, vols, 1.0, tau_short), w, rho_atm)
    if not config.regime:
        return Z, vols, rho_atm, None
    x = 100.0 * index_atm_vol
    rho_ret = np.clip(_regime_correlation(config.regime, x, rng), 0.01, 0.98)
    return Z, vols, rho_ret, {"x": x.tolist(), "y": rho_ret.tolist(), **config.regime}


def breakpoint_sample(config: SynthConfig) -> dict:
    """The (ATM index vol, return correlation) sample of ``generate_market`` without the options.

    Draws the same random stream as the full generator, so the result equals
    ``generate_market(config).breakpoint_sample``.
    """
    if not config.regime:
        raise ValueError("config has no regime block")
    rng = np.random.default_rng(int(config.seed))
    return _simulate_state(config, rng, config.basket().w)[3]


def generate_market(config: SynthConfig) -> GeneratedMarket:
    """Simulate prices, option trades, strikes and the factor ground truth."""
    rng = np.random.default_rng(int(config.seed))
    basket = config.basket()
    w = basket.w
    N, T = config.n_assets, config.n_days
    start = np.datetime64(config.start_date, "D")
    dates = [d.astype(dt.date) for d in np.busday_offset(start, np.arange(T), roll="forward")]
    curve = [tuple(c) for c in config.rate_curve]

    Z, vols, rho_ret, bp_sample = _simulate_state(config, rng, w)
    common = rng.standard_normal(T)
    idio = rng.standard_normal((T, N))
    daily = vols / np.sqrt(252.0)
    r = daily * (np.sqrt(rho_ret)[:, None] * common[:, None]
                 + np.sqrt(1.0 - rho_ret)[:, None] * idio) - 0.5 * daily ** 2
    r[0] = 0.0
    s0 = 50.0 + 25.0 * np.arange(N)
    con_spots = s0 * np.exp(np.cumsum(r, axis=0))
    idx_spots = 1000.0 * np.exp(np.cumsum(r @ w, axis=0))
    spots = {INDEX_TICKER: idx_spots, **{tk: con_spots[:, i] for i, tk in enumerate(basket.tickers)}}

    # one cash dividend per constituent per calendar year, at a seeded weekday
    dividends = []
    for year in sorted({d.year for d in dates}):
        for i, tk in enumerate(basket.tickers):
            doy = int(rng.integers(30, 330))
            ex = np.busday_offset(np.datetime64(f"{year}-01-01") + np.timedelta64(doy, "D"), 0,
                                  roll="forward").astype(dt.date)
            dividends.append((tk, ex, round(config.dividend_yield * s0[i], 4)))
    div_by_tk = {}
    for tk, ex, amt in dividends:
        div_by_tk.setdefault(tk, []).append((ex, amt))

    trades, trade_iv, trade_rho = [], [], []
    for t, day in enumerate(dates):
        expiries = listed_expiries(day)
        taus = np.array([year_fraction(day, e) for e in expiries])
        p = np.exp(-taus / 0.25)
        pick = rng.choice(len(expiries), size=config.obs_per_day, p=p / p.sum())
        kap = rng.uniform(KAPPA_BOUNDS[0] + 1e-3, KAPPA_BOUNDS[1] - 1e-3, config.obs_per_day)
        kap = np.where(np.abs(kap - 1.0) < 1e-8, 1.0 + 1e-8, kap)
        used = sorted(set(pick.tolist()))
        S_b = idx_spots[t]

        # index options: European, generated from constituents and the true correlation
        tau_o = taus[pick]
        rate_o = np.array([interpolate_rate(curve, x) for x in tau_o])
        sig_i = _constituent_iv(config, vols[t][None, :], kap[:, None], tau_o[:, None])
        rho_o = true_correlation(config, Z[t], kap, tau_o)
        if np.any(rho_o <= 0) or np.any(rho_o >= 0.9999):
            raise ValueError(f"generated correlation leaves (0, 0.9999) on {day}")
        iv_b = _basket_iv(sig_i, w, rho_o)
        K = kap * S_b * np.exp(rate_o * tau_o)
        is_call = kap >= 1.0
        price = np.asarray(bs_price(S_b, K, rate_o, tau_o, iv_b, is_call), float)
        for j in range(config.obs_per_day):
            if price[j] < MIN_PRICE:
                continue
            trades.append(OptionTrade(day, expiries[pick[j]], INDEX_TICKER, float(K[j]),
                                      float(price[j]), "call" if is_call[j] else "put", "european"))
            trade_iv.append(float(iv_b[j]))
            trade_rho.append(float(rho_o[j]))

        # constituent options: American on a fixed moneyness ladder at every used expiry
        kl = np.array(CONSTITUENT_KAPPAS, float)
        kl[0] += _NUDGE
        kl[-1] -= _NUDGE
        kl[np.isclose(kl, 1.0)] = 1.0 + _NUDGE
        for i, tk in enumerate(basket.tickers):
            S = con_spots[t, i]
            rows = [(e, k) for e in used for k in kl]
            tau_c = np.array([taus[e] for e, _ in rows])
            k_c = np.array([k for _, k in rows])
            rate_c = np.array([interpolate_rate(curve, x) for x in tau_c])
            sig_c = _constituent_iv(config, vols[t, i], k_c, tau_c)
            Kc = k_c * S * np.exp(rate_c * tau_c)
            divs = [tuple((year_fraction(day, ex), a) for ex, a in div_by_tk[tk]
                          if day < ex < expiries[e]) for e, _ in rows]
            call_c = k_c >= 1.0
            pc = crr_price(S, Kc, rate_c, tau_c, sig_c, call_c, divs, config.tree_steps)
            for j, (e, _) in enumerate(rows):
                if pc[j] < MIN_PRICE:
                    continue
                trades.append(OptionTrade(day, expiries[e], tk, float(Kc[j]), float(pc[j]),
                                          "call" if call_c[j] else "put", "american"))
                trade_iv.append(float(sig_c[j]))
                trade_rho.append(float("nan"))

    # variance-swap strikes at the listed tenors
    varswaps = []
    for t, day in enumerate(dates):
        for ten in STRIKE_TENORS:
            atm = _constituent_iv(config, vols[t], 1.0, ten)
            rho = float(true_correlation(config, Z[t], 1.0, ten))
            con_strikes = atm ** 2
            if config.oracle_constituent_strikes:
                n = horizon_days(ten)
                if t + n < T:
                    con_strikes = np.array([
                        realized_variance(con_spots[:, i], t, ten).value for i in range(N)])
            varswaps.append((day, INDEX_TICKER, ten, float(_basket_iv(atm, w, rho) ** 2)))
            for i, tk in enumerate(basket.tickers):
                varswaps.append((day, tk, ten, float(con_strikes[i])))

    return GeneratedMarket(config, dates, basket, trades, np.array(trade_iv), np.array(trade_rho),
                           spots, vols, Z, rho_ret, dividends, varswaps, bp_sample)


def _f(x: float) -> str:
    return repr(float(x))


def write_market(market: GeneratedMarket, out_dir) -> dict:
    """Write the CSV inputs and ``ground_truth.json``; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in
             ("trades", "snapshots", "rates", "dividends", "varswaps")}
    with open(paths["trades"], "w", newline="") as fh:
        write_trades(market.trades, fh)
    with open(paths["snapshots"], "w") as fh:
        fh.write(",".join(SNAPSHOT_HEADER) + "\n")
        for t, d in enumerate(market.dates):
            fh.write(f"{d.isoformat()},{INDEX_TICKER},{_f(market.spots[INDEX_TICKER][t])},\n")
            for tk, wt in zip(market.basket.tickers, market.basket.weights):
                fh.write(f"{d.isoformat()},{tk},{_f(market.spots[tk][t])},{_f(wt)}\n")
    with open(paths["rates"], "w") as fh:
        fh.write(",".join(RATES_HEADER) + "\n")
        for d in market.dates:
            for ten, rate in market.config.rate_curve:
                fh.write(f"{d.isoformat()},{_f(ten)},{_f(rate)}\n")
    with open(paths["dividends"], "w") as fh:
        fh.write(",".join(DIVIDENDS_HEADER) + "\n")
        for tk, ex, amt in market.dividends:
            fh.write(f"{tk},{ex.isoformat()},{_f(amt)}\n")
    with open(paths["varswaps"], "w") as fh:
        fh.write(",".join(VARSWAP_HEADER) + "\n")
        for d, tk, ten, k in market.varswaps:
            fh.write(f"{d.isoformat()},{tk},{_f(ten)},{_f(k)}\n")

    cfg = market.config
    kap = np.array(CONSTITUENT_KAPPAS)
    taus = np.array([TAU_BOUNDS[0], 0.083, 0.25, 0.5, 0.75, 1.0])
    KK, TT = np.meshgrid(kap, taus, indexing="ij")
    surfaces = [true_correlation(cfg, z, KK, TT).tolist() for z in market.factors]
    panel = market.market_panel()
    realized = {}
    for ten in STRIKE_TENORS:
        n = horizon_days(ten)
        rows = []
        for t in range(len(market.dates) - n):
            rv_b, rv_i = panel.realized(t, ten)
            rows.append([rv_b] + rv_i.tolist())
        realized[repr(ten)] = rows
    truth = {
        "config": asdict(cfg),
        "dates": [d.isoformat() for d in market.dates],
        "tickers": list(market.basket.tickers),
        "weights": list(market.basket.weights),
        "factor_scores": market.factors.tolist(),
        "mean_surface": list(cfg.mean_surface),
        "basis": [list(b) for b in cfg.true_basis],
        "surface_grid": {"kappa": kap.tolist(), "tau": taus.tolist(), "rho": surfaces},
        "returns_correlation": market.returns_corr.tolist(),
        "realized_variance": realized,
        "breakpoint": cfg.regime,
        "breakpoint_sample": market.breakpoint_sample,
    }
    paths["ground_truth"] = out / "ground_truth.json"
    paths["ground_truth"].write_text(json.dumps(truth, sort_keys=True) + "\n")
    return paths


def simulate_factor_panel(n_days=250, obs_per_day=135, noise=0.05, seed=0,
                          sd=(0.4, 0.2, 0.1), persistence=0.8):
    """Scattered panel drawn directly from the factor model on the unit square.

    Returns ``(X, y, day, Z, truth)`` where ``truth`` holds the mean and
    basis callables. The basis is orthonormal under the uniform measure.
    """
    rng = np.random.default_rng(seed)
    L = len(sd)
    basis = [lambda x: np.sqrt(3.0) * (2 * x[:, 0] - 1),
             lambda x: np.sqrt(3.0) * (2 * x[:, 1] - 1),
             lambda x: 3.0 * (2 * x[:, 0] - 1) * (2 * x[:, 1] - 1)][:L]
    mean = lambda x: 0.3 + 0.2 * x[:, 0] - 0.1 * x[:, 1] ** 2  # noqa: E731
    sd = np.asarray(sd, float)
    Z = np.zeros((n_days, L))
    z = np.zeros(L)
    scale = np.sqrt(1 - persistence ** 2)
    for t in range(n_days):
        z = persistence * z + scale * sd * rng.standard_normal(L)
        Z[t] = z
    X = rng.uniform(0, 1, (n_days * obs_per_day, 2))
    day = np.repeat(np.arange(n_days), obs_per_day)
    y = mean(X) + sum(Z[day, l] * basis[l](X) for l in range(L))
    y = y + noise * rng.standard_normal(y.size)
    return X, y, day, Z, {"mean": mean, "basis": basis}
