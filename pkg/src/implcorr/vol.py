"""Option pricing, implied-volatility inversion, model-free implied and realized variance."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

TRADING_DAYS = 252
VOL_BOUNDS = (1e-4, 5.0)
PRICE_TOL = 1e-8
MAX_ITER = 200
DEFAULT_STEPS = 500


class UnattainablePriceError(ValueError):
    """Market price lies outside the model price envelope at the volatility bounds."""


class ConvergenceError(RuntimeError):
    def __init__(self, message, lo=None, hi=None):
        self.lo, self.hi = lo, hi
        super().__init__(f"{message} (bracket [{lo}, {hi}])")


@dataclass(frozen=True)
class PricingInputs:
    spot: float
    strike: float
    rate: float
    tau: float
    vol: float
    right: str = "call"
    dividends: tuple = field(default=())  # (time in years, cash amount)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.vol > 0:
            raise ValueError(f"vol must be positive, got {self.vol}")
        if not (self.spot > 0 and self.strike > 0):
            raise ValueError("spot and strike must be positive")
        if self.right not in ("put", "call"):
            raise ValueError(f"unknown right {self.right!r}")


@dataclass(frozen=True)
class VarianceEstimate:
    value: float
    window_or_tenor: float
    kind: str  # "realized" | "model_free_implied"
    as_of: dt.date | None = None

    def __post_init__(self):
        if self.value < 0:
            raise ValueError(f"variance must be non-negative, got {self.value}")


def bs_price(spot, strike, rate, tau, vol, is_call):
    """Vectorized Black-Scholes price (no dividends)."""
    spot, strike, rate, tau, vol, is_call = np.broadcast_arrays(
        *(np.asarray(a, float) for a in (spot, strike, rate, tau, vol)), np.asarray(is_call, bool))
    sq = vol * np.sqrt(tau)
    disc_k = strike * np.exp(-rate * tau)
    d1 = (np.log(spot / disc_k) + 0.5 * sq * sq) / sq
    d2 = d1 - sq
    call = spot * ndtr(d1) - disc_k * ndtr(d2)
    put = disc_k * ndtr(-d2) - spot * ndtr(-d1)
    out = np.where(is_call, call, put)
    return out if out.ndim else float(out)


def european_price(inputs: PricingInputs) -> float:
    """Black-Scholes value; any dividends on ``inputs`` are ignored."""
    return float(bs_price(inputs.spot, inputs.strike, inputs.rate, inputs.tau, inputs.vol,
                          inputs.right == "call"))


def _pad_dividends(dividends, n):
    """Ragged per-option dividend lists -> padded (n, m) time and amount arrays."""
    if dividends is None:
        return np.zeros((n, 0)), np.zeros((n, 0))
    m = max((len(d) for d in dividends), default=0)
    times = np.zeros((n, m))
    amounts = np.zeros((n, m))
    for i, d in enumerate(dividends):
        for k, (t, a) in enumerate(d):
            times[i, k], amounts[i, k] = t, a
    return times, amounts


def crr_price(spot, strike, rate, tau, vol, is_call, dividends=None, steps=DEFAULT_STEPS,
              american=True):
    """Cox-Ross-Rubinstein tree over a batch of options.

    Cash dividends use the escrowed model: the tree runs on spot minus the
    present value of dividends paid before expiry, and exercise values add
    back the present value of dividends still to come. Strikes are not adjusted.
    """
    spot, strike, rate, tau, vol, is_call = (np.atleast_1d(np.asarray(a, float))
                                             for a in (spot, strike, rate, tau, vol, is_call))
    spot, strike, rate, tau, vol, is_call = np.broadcast_arrays(spot, strike, rate, tau, vol, is_call)
    is_call = is_call.astype(bool)
    n_opt = spot.shape[0]
    if steps < 2:
        raise ValueError("steps must be >= 2")
    dtimes, damts = _pad_dividends(dividends, n_opt)
    live = (dtimes > 0) & (dtimes < tau[:, None])
    damts = np.where(live, damts, 0.0)
    pv0 = np.sum(damts * np.exp(-rate[:, None] * dtimes), axis=1)
    if np.any(pv0 >= spot):
        raise ValueError("present value of dividends must be below spot")
    s_star = spot - pv0

    dt_ = (tau / steps)[:, None]
    r = rate[:, None]
    u = np.exp(vol[:, None] * np.sqrt(dt_))
    d = 1.0 / u
    # p leaves [0, 1] only when vol * sqrt(dt) < r * dt, i.e. at the extreme low end of the vol bracket
    p = np.clip((np.exp(r * dt_) - d) / (u - d), 0.0, 1.0)
    disc = np.exp(-r * dt_)
    sign = np.where(is_call, 1.0, -1.0)[:, None]
    K = strike[:, None]

    j = np.arange(steps + 1)
    s_nodes = s_star[:, None] * u ** (2 * j - steps)
    values = np.maximum(sign * (s_nodes - K), 0.0)
    has_divs = damts.shape[1] > 0 and np.any(damts > 0)
    for i in range(steps - 1, -1, -1):
        values = disc * (p * values[:, 1:i + 2] + (1.0 - p) * values[:, :i + 1])
        if american:
            s_nodes = s_nodes[:, :i + 1] * u
            if has_divs:
                t_i = dt_ * i
                ahead = live & (dtimes > t_i)
                pv_i = np.sum(np.where(ahead, damts * np.exp(-r * (dtimes - t_i)), 0.0), axis=1)
                exercise = sign * (s_nodes + pv_i[:, None] - K)
            else:
                exercise = sign * (s_nodes - K)
            np.maximum(values, exercise, out=values)
    return values[:, 0]


def american_price(inputs: PricingInputs, steps: int = DEFAULT_STEPS) -> float:
    """CRR value with early exercise at every node and escrowed cash dividends."""
    return float(crr_price(inputs.spot, inputs.strike, inputs.rate, inputs.tau, inputs.vol,
                           inputs.right == "call", [tuple(inputs.dividends)], steps)[0])


def _bs_vega(spot, strike, rate, tau, vol):
    sq = vol * np.sqrt(tau)
    d1 = (np.log(spot / strike) + (rate + 0.5 * vol * vol) * tau) / sq
    return spot * np.exp(-0.5 * d1 * d1) / np.sqrt(2.0 * np.pi) * np.sqrt(tau)


def _tighten_with_european_guess(price_at, prices, args, is_call, dividends, lo, hi, f_lo, f_hi,
                                 vols, status, tol, overshoot=1.1):
    """Shrink the tree brackets around the Black-Scholes vol of the escrowed spot.

    Two probes per option: the guess itself, then a Newton step with the
    Black-Scholes vega stretched by ``overshoot`` so that it usually lands
    just past the root. Arrays are updated in place.
    """
    act = np.flatnonzero(status == NOT_CONVERGED)
    if act.size == 0:
        return
    spot, strike, rate, tau = (a[act] for a in args)
    dtimes, damts = _pad_dividends(None if dividends is None else [dividends[k] for k in act], act.size)
    live = (dtimes > 0) & (dtimes < tau[:, None])
    s_star = spot - np.sum(np.where(live, damts * np.exp(-rate[:, None] * dtimes), 0.0), axis=1)
    guess, gst = implied_vols(prices[act], s_star, strike, rate, tau, is_call[act])
    guess = np.where(gst == OK, guess, np.nan)
    for _ in range(2):
        ok = np.isfinite(guess) & (guess > lo[act]) & (guess < hi[act]) & (status[act] == NOT_CONVERGED)
        idx, x = act[ok], guess[ok]
        if idx.size == 0:
            return
        f = price_at(x, idx) - prices[idx]
        hit = np.abs(f) <= tol
        vols[idx[hit]], status[idx[hit]] = x[hit], OK
        below = f < 0
        lo[idx] = np.where(below, x, lo[idx])
        f_lo[idx] = np.where(below, f, f_lo[idx])
        hi[idx] = np.where(below, hi[idx], x)
        f_hi[idx] = np.where(below, f_hi[idx], f)
        vega = _bs_vega(s_star[ok], strike[ok], rate[ok], tau[ok], x)
        with np.errstate(divide="ignore", invalid="ignore"):
            nxt = x - overshoot * f / vega
        guess = np.full(act.size, np.nan)
        guess[ok] = np.where(hit, np.nan, nxt)


# status codes returned by implied_vols
OK, UNATTAINABLE, NOT_CONVERGED = 0, 1, 2


def implied_vols(prices, spot, strike, rate, tau, is_call, american=False, dividends=None,
                 steps=DEFAULT_STEPS, tol=PRICE_TOL, max_iter=MAX_ITER):
    """Bracketed root search for a batch of options.

    Uses regula falsi with the Illinois modification on ``[1e-4, 5]``; a step
    that would leave the bracket falls back to bisection. For tree prices the
    lower end is raised to the smallest vol with an arbitrage-free tree. Returns
    ``(vols, status)``; failed entries are NaN with a nonzero status.
    """
    prices = np.atleast_1d(np.asarray(prices, float))
    n = prices.shape[0]
    args = [np.broadcast_to(np.asarray(a, float), (n,)) for a in (spot, strike, rate, tau)]
    is_call = np.broadcast_to(np.asarray(is_call, bool), (n,))

    if american:
        def price_at(vol, idx):
            divs = None if dividends is None else [dividends[k] for k in idx]
            return crr_price(*(a[idx] for a in args), vol, is_call[idx], divs, steps)
    else:
        def price_at(vol, idx):
            return np.atleast_1d(bs_price(*(a[idx] for a in args), vol, is_call[idx]))

    everyone = np.arange(n)
    lo = np.full(n, VOL_BOUNDS[0])
    if american:
        # below |r| sqrt(dt) the up-probability leaves [0, 1] and the clipped tree misprices
        lo = np.maximum(lo, 1.01 * np.abs(args[2]) * np.sqrt(args[3] / steps))
    hi = np.full(n, VOL_BOUNDS[1])
    f_lo = price_at(lo, everyone) - prices
    f_hi = price_at(hi, everyone) - prices
    status = np.where((f_lo > tol) | (f_hi < -tol), UNATTAINABLE, NOT_CONVERGED)
    vols = np.full(n, np.nan)
    edge_lo = (status != UNATTAINABLE) & (np.abs(f_lo) <= tol)
    vols[edge_lo], status[edge_lo] = lo[edge_lo], OK
    edge_hi = (status == NOT_CONVERGED) & (np.abs(f_hi) <= tol)
    vols[edge_hi], status[edge_hi] = hi[edge_hi], OK
    if american:
        _tighten_with_european_guess(price_at, prices, args, is_call, dividends, lo, hi, f_lo, f_hi,
                                     vols, status, tol)
    side = np.zeros(n, int)  # -1: lower end moved last, +1: upper end moved last
    active = np.flatnonzero(status == NOT_CONVERGED)
    for _ in range(max_iter):
        if active.size == 0:
            break
        a, b, fa, fb = lo[active], hi[active], f_lo[active], f_hi[active]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = (a * fb - b * fa) / (fb - fa)
        mid = 0.5 * (a + b)
        x = np.where(np.isfinite(x) & (x > a) & (x < b), x, mid)
        f = price_at(x, active) - prices[active]
        done = (np.abs(f) <= tol) | (b - a < 1e-14)
        vols[active[done]] = x[done]
        status[active[done]] = OK
        below = f < 0
        s_prev = side[active]
        # Illinois: halve the stale end's residual when the same end survives twice
        new_fhi = np.where(below & (s_prev == -1), 0.5 * fb, fb)
        new_flo = np.where(~below & (s_prev == 1), 0.5 * fa, fa)
        lo[active] = np.where(below, x, a)
        f_lo[active] = np.where(below, f, new_flo)
        hi[active] = np.where(below, b, x)
        f_hi[active] = np.where(below, new_fhi, f)
        side[active] = np.where(below, -1, 1)
        active = active[~done]
    return vols, status


def implied_vol(market_price: float, inputs: PricingInputs, steps: int = DEFAULT_STEPS,
                style: str = "european") -> float:
    """Volatility reproducing ``market_price``; ``inputs.vol`` is ignored."""
    american = style == "american"
    vols, status = implied_vols(
        [market_price], inputs.spot, inputs.strike, inputs.rate, inputs.tau, inputs.right == "call",
        american=american, dividends=[tuple(inputs.dividends)] if american else None, steps=steps)
    if status[0] == UNATTAINABLE:
        raise UnattainablePriceError(
            f"unattainable price {market_price} for vol in {list(VOL_BOUNDS)}")
    if status[0] == NOT_CONVERGED:
        raise ConvergenceError("bisection did not converge", *VOL_BOUNDS)
    return float(vols[0])


def mfiv(chain, spot: float, rate: float, tau: float, as_of=None) -> VarianceEstimate:
    """Model-free implied variance from a strip of out-of-the-money option prices.

    ``chain`` holds ``(strike, price, right)`` with puts below spot and calls
    at or above it. Strike spacing is centered inside the strip and halved at
    both ends.
    """
    if len(chain) < 3:
        raise ValueError("model-free implied variance needs at least 3 strikes")
    strikes = np.array([c[0] for c in chain], float)
    prices = np.array([c[1] for c in chain], float)
    rights = [c[2] for c in chain]
    if np.any(np.diff(strikes) <= 0):
        raise ValueError("strikes must be strictly increasing")
    for k, right in zip(strikes, rights):
        if (right == "put") != (k < spot):
            raise ValueError(f"strike {k}: expected {'put' if k < spot else 'call'} (OTM) quote")
    dk = np.empty_like(strikes)
    dk[1:-1] = 0.5 * (strikes[2:] - strikes[:-2])
    dk[0] = 0.5 * (strikes[1] - strikes[0])
    dk[-1] = 0.5 * (strikes[-1] - strikes[-2])
    value = 2.0 * np.exp(rate * tau) / tau * np.sum(dk * prices / strikes**2)
    return VarianceEstimate(float(value), tau, "model_free_implied", as_of)


def realized_variance(prices, t: int, tau: float, as_of=None) -> VarianceEstimate:
    """Annualized realized variance of daily log returns over ``round(252 * tau)`` days from index ``t``."""
    prices = np.asarray(prices, float)
    n = int(round(TRADING_DAYS * tau))
    if n < 1 or t < 0:
        raise ValueError("window must contain at least one return")
    if t + n >= prices.shape[0]:
        raise ValueError(f"window [{t}, {t + n}] exceeds series of length {prices.shape[0]}")
    window = prices[t:t + n + 1]
    if np.any(window <= 0):
        raise ValueError("prices must be positive")
    r = np.diff(np.log(window))
    return VarianceEstimate(float(np.sum(r * r) / tau), tau, "realized", as_of)


def with_vol(inputs: PricingInputs, vol: float) -> PricingInputs:
    return replace(inputs, vol=vol)
