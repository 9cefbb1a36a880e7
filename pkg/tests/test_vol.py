import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from implcorr.vol import (
    NOT_CONVERGED,
    OK,
    UNATTAINABLE,
    ConvergenceError,
    PricingInputs,
    UnattainablePriceError,
    _bs_vega,
    american_price,
    bs_price,
    crr_price,
    european_price,
    implied_vol,
    implied_vols,
    mfiv,
    realized_variance,
)


def quad_call(S, K, r, tau, vol):
    """Discounted risk-neutral expectation of the call payoff by adaptive quadrature."""
    def integrand(z):
        ST = S * np.exp((r - 0.5 * vol * vol) * tau + vol * np.sqrt(tau) * z)
        return max(ST - K, 0.0) * stats.norm.pdf(z)
    val, _ = integrate.quad(integrand, -12, 12, points=[0.0], epsabs=1e-13, epsrel=1e-13, limit=400)
    return np.exp(-r * tau) * val


def bs_chain(S, r, tau, vol, strikes):
    return [(k, bs_price(S, k, r, tau, vol, k >= S), "call" if k >= S else "put") for k in strikes]


class TestEuropean:
    def test_atm_call_value(self):
        c = european_price(PricingInputs(100, 100, 0.0, 1.0, 0.2, "call"))
        assert c == pytest.approx(quad_call(100, 100, 0.0, 1.0, 0.2), abs=1e-8)
        assert round(c, 4) == 7.9656

    def test_small_vol_limit(self):
        c = european_price(PricingInputs(100, 95, 0.03, 0.5, 1e-6, "call"))
        assert c == pytest.approx(100 - 95 * np.exp(-0.03 * 0.5), abs=1e-8)

    def test_parity_example(self):
        c = bs_price(100, 90, 0.05, 0.5, 0.3, True)
        p = bs_price(100, 90, 0.05, 0.5, 0.3, False)
        assert c - p == pytest.approx(100 - 90 * np.exp(-0.025), abs=1e-10)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(10, 500), st.floats(10, 500), st.floats(-0.02, 0.1), st.floats(0.01, 3),
           st.floats(0.01, 2))
    def test_parity_property(self, S, K, r, tau, vol):
        c = bs_price(S, K, r, tau, vol, True)
        p = bs_price(S, K, r, tau, vol, False)
        assert c - p == pytest.approx(S - K * np.exp(-r * tau), abs=1e-10 * max(1.0, S, K))

    @pytest.mark.parametrize("field,value", [("tau", 0.0), ("vol", 0.0), ("vol", -0.1)])
    def test_invalid_inputs(self, field, value):
        kw = dict(spot=100, strike=100, rate=0.0, tau=1.0, vol=0.2)
        kw[field] = value
        with pytest.raises(ValueError):
            PricingInputs(**kw)


class TestAmerican:
    def test_call_without_dividends_equals_european(self):
        inp = PricingInputs(100, 100, 0.05, 1.0, 0.2, "call")
        assert american_price(inp, 500) == pytest.approx(european_price(inp), abs=0.01)

    def test_put_early_exercise_premium(self):
        inp = PricingInputs(100, 110, 0.05, 1.0, 0.2, "put")
        assert american_price(inp, 500) >= european_price(inp)

    def test_tree_convergence(self):
        inp = PricingInputs(100, 110, 0.05, 1.0, 0.2, "put")
        assert abs(american_price(inp, 500) - american_price(inp, 2000)) < 0.02

    def test_european_tree_matches_black_scholes(self):
        v = crr_price(100, 105, 0.03, 0.5, 0.25, False, steps=2000, american=False)[0]
        assert v == pytest.approx(bs_price(100, 105, 0.03, 0.5, 0.25, False), abs=5e-3)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(60, 140), st.floats(0.0, 0.08), st.floats(0.05, 1.5), st.floats(0.05, 0.8))
    def test_put_dominates_european(self, K, r, tau, vol):
        am = crr_price(100, K, r, tau, vol, False, steps=200)[0]
        eu = crr_price(100, K, r, tau, vol, False, steps=200, american=False)[0]
        assert am >= eu - 1e-12

    def test_dividend_lowers_call_and_raises_put(self):
        base = PricingInputs(100, 100, 0.02, 1.0, 0.25, "call")
        with_div = PricingInputs(100, 100, 0.02, 1.0, 0.25, "call", ((0.5, 3.0),))
        assert american_price(with_div, 300) < american_price(base, 300)
        put = PricingInputs(100, 100, 0.02, 1.0, 0.25, "put")
        put_div = PricingInputs(100, 100, 0.02, 1.0, 0.25, "put", ((0.5, 3.0),))
        assert american_price(put_div, 300) > american_price(put, 300)

    def test_dividend_pv_above_spot(self):
        with pytest.raises(ValueError, match="present value"):
            american_price(PricingInputs(10, 10, 0.0, 1.0, 0.2, "put", ((0.5, 11.0),)), 50)

    def test_steps_validated(self):
        with pytest.raises(ValueError):
            crr_price(100, 100, 0.0, 1.0, 0.2, True, steps=1)


class TestImpliedVol:
    def test_european_round_trip(self):
        inp = PricingInputs(100, 95, 0.02, 0.75, 0.25, "put")
        assert implied_vol(european_price(inp), inp) == pytest.approx(0.25, abs=1e-6)

    def test_american_put_with_dividend(self):
        inp = PricingInputs(100, 100, 0.03, 1.0, 0.40, "put", ((0.4, 2.0),))
        price = american_price(inp, 500)
        assert implied_vol(price, inp, 500, "american") == pytest.approx(0.40, abs=1e-4)

    def test_below_intrinsic_is_unattainable(self):
        inp = PricingInputs(100, 120, 0.0, 0.5, 0.2, "put")
        with pytest.raises(UnattainablePriceError, match="unattainable"):
            implied_vol(15.0, inp, 100, "american")

    def test_non_convergence_reports_bracket(self, monkeypatch):
        import implcorr.vol as vol_mod

        real = vol_mod.implied_vols
        monkeypatch.setattr(vol_mod, "implied_vols", lambda *a, **k: real(*a, **k, max_iter=1))
        inp = PricingInputs(100, 100, 0.0, 0.5, 0.2, "call")
        with pytest.raises(ConvergenceError, match="bracket"):
            implied_vol(european_price(inp), inp)

    def test_american_bracket_starts_where_tree_is_arbitrage_free(self):
        # at vol 1e-4 this tree's up-probability would be clipped and the put overpriced
        args = (100.0, 113.18197583994743, 0.02933970608290693, 0.2588964100783019)
        divs = [((0.12944820503915094, 1.0),)]
        price = crr_price(*args, 0.18768737315810882, False, divs, 500)
        v, s = implied_vols(price, *args, False, american=True, dividends=divs, steps=500)
        assert s[0] == OK and v[0] == pytest.approx(0.18768737315810882, abs=1e-4)

    def test_batch_statuses(self):
        prices = np.array([bs_price(100, 100, 0.0, 1.0, 0.3, True), 150.0, 1e-3])
        vols, status = implied_vols(prices, 100, [100, 100, 60], 0.0, 1.0, [True, True, False])
        assert status[0] == OK and vols[0] == pytest.approx(0.3, abs=1e-8)
        assert status[1] == UNATTAINABLE and np.isnan(vols[1])

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.8, 1.2), st.floats(0.05, 1.0), st.floats(0.05, 1.5), st.booleans())
    def test_round_trip_property(self, kappa, tau, vol, call):
        K = 100 * kappa
        p = bs_price(100, K, 0.01, tau, vol, call)
        if _bs_vega(100, K, 0.01, tau, vol) < 1e-2:  # vol not identified to 1e-6 at a 1e-8 price tol
            return
        v, s = implied_vols([p], 100, K, 0.01, tau, call)
        assert s[0] == OK
        assert v[0] == pytest.approx(vol, abs=1e-6)


class TestMfiv:
    def test_flat_chain_close_to_sigma_squared(self):
        chain = bs_chain(100, 0.01, 0.25, 0.2, np.arange(50, 200.5, 1.0))
        assert mfiv(chain, 100, 0.01, 0.25).value == pytest.approx(0.04, rel=0.02)

    def test_refinement_monotone(self):
        errs = [abs(mfiv(bs_chain(100, 0.01, 0.25, 0.2, np.arange(50, 200 + 1e-9, h)), 100, 0.01,
                         0.25).value - 0.04) for h in (2.0, 1.0, 0.5, 0.25)]
        assert all(b < a for a, b in zip(errs, errs[1:]))

    def test_too_few_strikes(self):
        with pytest.raises(ValueError, match="3 strikes"):
            mfiv(bs_chain(100, 0.0, 0.25, 0.2, [90.0, 110.0]), 100, 0.0, 0.25)

    def test_strikes_must_increase(self):
        chain = bs_chain(100, 0.0, 0.25, 0.2, [90.0, 110.0, 120.0])
        with pytest.raises(ValueError, match="increasing"):
            mfiv([chain[0], chain[2], chain[1]], 100, 0.0, 0.25)

    def test_wrong_side_quote(self):
        with pytest.raises(ValueError, match="OTM"):
            mfiv([(90, 1.0, "call"), (100, 1.0, "call"), (110, 1.0, "call")], 100, 0.0, 0.25)

    def test_kind(self):
        est = mfiv(bs_chain(100, 0.0, 0.25, 0.2, [80.0, 100.0, 120.0]), 100, 0.0, 0.25)
        assert est.kind == "model_free_implied" and est.window_or_tenor == 0.25


class TestRealizedVariance:
    def test_constant_prices(self):
        assert realized_variance(np.full(300, 42.0), 0, 1.0).value == 0.0

    def test_alternating_prices(self):
        p = 100 * np.exp(0.01 * (np.arange(253) % 2))
        assert realized_variance(p, 0, 1.0).value == pytest.approx(0.0252, rel=1e-12)

    def test_zero_price(self):
        p = np.full(30, 10.0)
        p[5] = 0.0
        with pytest.raises(ValueError, match="positive"):
            realized_variance(p, 0, 21 / 252)

    def test_window_too_long(self):
        with pytest.raises(ValueError, match="exceeds"):
            realized_variance(np.full(100, 1.0), 50, 0.25)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 1e3), st.integers(0, 2 ** 32 - 1))
    def test_scale_invariance(self, scale, seed):
        p = 50 * np.exp(np.cumsum(np.random.default_rng(seed).normal(0, 0.01, 80)))
        a = realized_variance(p, 3, 63 / 252).value
        b = realized_variance(p * scale, 3, 63 / 252).value
        assert b == pytest.approx(a, rel=1e-9)
