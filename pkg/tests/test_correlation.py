import datetime as dt
import io

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from implcorr.correlation import (
    BasketSpec,
    Breakpoint,
    CorrelationPoint,
    SegmentedRegression,
    atm_index_vol,
    basket_variance,
    decomposition_weights,
    diversification_ratio,
    equicorrelation,
    fisher_z,
    fisher_z_inv,
    fit_breakpoint,
    implied_correlation_points,
    read_ics_csv,
    regime_correct,
    weighted_average_decomposition,
    write_ics_csv,
)
from implcorr.marketdata import DataError, SurfacePoint

DAY = dt.date(2011, 5, 2)
EXP = dt.date(2011, 8, 19)


def brute_variance(vols, weights, corr):
    n = len(vols)
    return sum(weights[i] * weights[j] * vols[i] * vols[j] * corr[i][j]
               for i in range(n) for j in range(n))


def random_basket(rng, n):
    w = rng.uniform(0.1, 1.0, n)
    return rng.uniform(0.1, 0.6, n), w / w.sum()


def random_corr(rng, n):
    a = rng.normal(size=(n, n + 2))
    c = a @ a.T
    s = np.sqrt(np.diag(c))
    return c / np.outer(s, s)


class TestBasketAlgebra:
    def test_spec_validation(self):
        BasketSpec(("A", "B"), (0.4, 0.6))
        with pytest.raises(ValueError):
            BasketSpec(("A",), (1.0,))
        with pytest.raises(ValueError):
            BasketSpec(("A", "B"), (0.5, 0.6))

    def test_bounds(self):
        s, w = np.array([0.2, 0.3, 0.4]), np.array([0.2, 0.3, 0.5])
        assert basket_variance(s, w, 0.0) == pytest.approx(np.sum((w * s) ** 2), abs=1e-15)
        assert basket_variance(s, w, 1.0) == pytest.approx(np.sum(w * s) ** 2, abs=1e-15)

    def test_matches_double_sum(self, rng):
        s, w = random_basket(rng, 3)
        rho = 0.37
        corr = np.full((3, 3), rho)
        np.fill_diagonal(corr, 1.0)
        assert basket_variance(s, w, rho) == pytest.approx(brute_variance(s, w, corr), abs=1e-14)

    @pytest.mark.parametrize("rho", [-0.5, 1.01])
    def test_rho_outside_psd_range(self, rho):
        with pytest.raises(ValueError):
            basket_variance([0.2, 0.3, 0.4], [0.3, 0.3, 0.4], rho)

    def test_equicorrelation_examples(self):
        assert equicorrelation(0.5, [1.0, 1.0], [0.5, 0.5]) == pytest.approx(0.0, abs=1e-15)
        s, w = np.array([0.2, 0.35]), np.array([0.3, 0.7])
        assert equicorrelation(np.sum(w * s) ** 2, s, w) == pytest.approx(1.0, abs=1e-14)

    def test_equicorrelation_zero_denominator(self):
        with pytest.raises(ValueError, match="undefined"):
            equicorrelation(0.01, [0.2, 0.0], [0.5, 0.5])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 30), st.floats(0.0, 1.0), st.integers(0, 2 ** 32 - 1))
    def test_round_trip(self, n, frac, seed):
        s, w = random_basket(np.random.default_rng(seed), n)
        lo = -1.0 / (n - 1)
        rho = lo + (1 - lo) * min(max(frac, 1e-6), 1.0)
        var = basket_variance(s, w, rho)
        assert equicorrelation(var, s, w) == pytest.approx(rho, abs=1e-10)
        # the diversification-ratio form agrees with the direct form
        assert diversification_ratio(var, s, w) == pytest.approx(rho, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 30), st.integers(0, 2 ** 32 - 1))
    def test_decomposition_weights_sum_to_one(self, n, seed):
        s, w = random_basket(np.random.default_rng(seed), n)
        c = decomposition_weights(s, w)
        assert c.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.diag(c) == 0)

    def test_decomposition_constant_and_identity(self, rng):
        s, w = random_basket(rng, 4)
        corr = np.full((4, 4), 0.42)
        np.fill_diagonal(corr, 1.0)
        assert weighted_average_decomposition(corr, s, w) == pytest.approx(0.42, abs=1e-14)
        assert weighted_average_decomposition(np.eye(4), s, w) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_decomposition_matches_variance_route(self, seed):
        rng = np.random.default_rng(seed)
        s, w = random_basket(rng, 3)
        corr = random_corr(rng, 3)
        via_var = equicorrelation(brute_variance(s, w, corr), s, w)
        assert weighted_average_decomposition(corr, s, w) == pytest.approx(via_var, abs=1e-12)

    def test_decomposition_rejects_asymmetric(self):
        corr = np.array([[1.0, 0.3], [0.2, 1.0]])
        with pytest.raises(ValueError, match="symmetric"):
            weighted_average_decomposition(corr, [0.2, 0.3], [0.5, 0.5])


def _day(kappas, ivs, tau=0.3, expiry=EXP):
    return [SurfacePoint(k, tau, v, expiry) for k, v in zip(kappas, ivs)]


class TestImpliedCorrelationPoints:
    W = {"A": 0.25, "B": 0.25, "C": 0.5}

    def test_flat_surfaces_give_one(self):
        k = [0.9, 1.0, 1.1]
        cons = {t: _day(k, [0.25] * 3) for t in self.W}
        pts, diag = implied_correlation_points(_day(k, [0.25] * 3), cons, self.W, DAY)
        assert [p.rho for p in pts] == pytest.approx([1.0] * 3, abs=1e-14)
        assert diag["kept"] == 3 and pts[0].date == DAY

    def test_minimum_variance_gives_zero(self):
        sig = {"A": 0.2, "B": 0.3, "C": 0.4}
        idx = np.sqrt(sum((self.W[t] * sig[t]) ** 2 for t in self.W))
        cons = {t: _day([0.9, 1.1], [sig[t]] * 2) for t in self.W}
        pts, _ = implied_correlation_points(_day([1.0], [idx]), cons, self.W, DAY)
        assert pts[0].rho == pytest.approx(0.0, abs=1e-14)

    def test_forward_constructed_day_recovered(self, rng):
        tickers = sorted(self.W)
        w = np.array([self.W[t] for t in tickers])
        index, cons = [], {t: [] for t in tickers}
        truth = {}
        for tau, exp in [(0.1, dt.date(2011, 6, 17)), (0.4, dt.date(2011, 9, 16))]:
            nodes = np.linspace(0.85, 1.15, 7)
            sig = rng.uniform(0.15, 0.5, (len(nodes), len(tickers)))
            for i, t in enumerate(tickers):
                cons[t] += _day(nodes, sig[:, i], tau, exp)
            rho = 0.3 + 0.4 * (nodes - 0.85) + tau
            iv = np.sqrt([basket_variance(sig[j], w, rho[j]) for j in range(len(nodes))])
            index += _day(nodes, iv, tau, exp)
            truth.update({(k, tau): r for k, r in zip(nodes, rho)})
        pts, diag = implied_correlation_points(index, cons, self.W, DAY)
        assert diag == {"uncovered_expiry": 0, "extrapolation": 0, "kept": 14}
        for p in pts:
            assert p.rho == pytest.approx(truth[(p.kappa, p.tau)], abs=1e-10)

    def test_interpolates_between_constituent_strikes(self):
        cons = {t: _day([0.9, 1.1], [0.2, 0.4]) for t in self.W}
        pts, _ = implied_correlation_points(_day([1.0], [0.3]), cons, self.W, DAY)
        assert pts[0].rho == pytest.approx(1.0, abs=1e-14)

    def test_extrapolation_and_uncovered_expiry_dropped(self):
        cons = {t: _day([0.95, 1.05], [0.25, 0.25]) for t in self.W}
        other = dt.date(2012, 1, 20)
        index = _day([0.9, 1.0, 1.1], [0.25] * 3) + _day([1.0, 1.02], [0.25, 0.25], 0.7, other)
        pts, diag = implied_correlation_points(index, cons, self.W, DAY)
        assert [p.kappa for p in pts] == [1.0]
        assert diag == {"uncovered_expiry": 2, "extrapolation": 2, "kept": 1}

    def test_atm_index_vol_uses_shortest_bracketing_expiry(self):
        day = (_day([0.9, 0.95], [0.3, 0.28], 0.1, dt.date(2011, 6, 17))
               + _day([0.9, 1.1], [0.30, 0.20], 0.3)
               + _day([0.9, 1.1], [0.5, 0.5], 0.6, dt.date(2012, 1, 20)))
        assert atm_index_vol(day) == pytest.approx(0.25, abs=1e-15)
        with pytest.raises(ValueError):
            atm_index_vol(_day([0.9, 0.95], [0.3, 0.3]))


class TestFisherZ:
    def test_examples(self):
        assert fisher_z(0.0) == 0.0
        oracle = float(mpmath.mpf("0.5") * mpmath.log(mpmath.mpf("1.9") / mpmath.mpf("0.1")))
        assert fisher_z(0.9) == pytest.approx(oracle, abs=1e-14)
        assert round(fisher_z(0.9), 5) == 1.47222

    @pytest.mark.parametrize("u", [1.0, -1.0, 1.5])
    def test_domain(self, u):
        with pytest.raises(ValueError):
            fisher_z(u)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-0.9999, 0.9999), st.floats(-0.9999, 0.9999))
    def test_increasing_odd_and_invertible(self, a, b):
        assert fisher_z(-a) == -fisher_z(a)
        assert fisher_z_inv(fisher_z(a)) == pytest.approx(a, abs=1e-12)
        if a < b:
            assert fisher_z(a) < fisher_z(b)


def regime_data(rng, n=200, threshold=21.0, s_low=0.0328, s_high=0.0091):
    x = rng.uniform(10, 40, n)
    y = np.where(x < threshold, s_low * x, s_low * threshold + s_high * (x - threshold))
    return x, y + rng.normal(0, 0.01, n)


class TestBreakpoint:
    @pytest.mark.parametrize("seed", range(5))
    def test_recovers_generator(self, seed):
        x, y = regime_data(np.random.default_rng(seed))
        bp = fit_breakpoint(x, y)
        assert abs(bp.threshold - 21.0) <= 1.5
        assert abs(bp.slope_low - 0.0328) <= 0.005
        assert abs(bp.slope_high - 0.0091) <= 0.005

    def test_continuous_at_knot(self, rng):
        bp = fit_breakpoint(*regime_data(rng))
        lo = bp.intercept_low + bp.slope_low * bp.threshold
        hi = bp.intercept_high + bp.slope_high * bp.threshold
        assert lo == pytest.approx(hi, abs=1e-12)

    def test_linear_data(self, rng):
        x = rng.uniform(0, 10, 50)
        y = 1.5 + 0.3 * x + rng.normal(0, 0.1, 50)
        bp = fit_breakpoint(x, y)
        A = np.column_stack([np.ones_like(x), x])
        r = y - A @ np.linalg.lstsq(A, y, rcond=None)[0]
        exact = 2.0 + 0.3 * x
        bp_exact = fit_breakpoint(x, exact)
        assert bp_exact.slope_low == pytest.approx(bp_exact.slope_high, abs=1e-8)
        assert bp.sse <= r @ r + 1e-12

    def test_reflection_mirrors_breakpoint(self, rng):
        x, y = regime_data(rng)
        a, b = fit_breakpoint(x, y), fit_breakpoint(-x, y)
        assert b.threshold == pytest.approx(-a.threshold, abs=1e-12)
        assert b.slope_low == pytest.approx(-a.slope_high, abs=1e-10)
        assert b.slope_high == pytest.approx(-a.slope_low, abs=1e-10)
        assert b.sse == pytest.approx(a.sse, rel=1e-9)

    def test_threshold_within_range(self, rng):
        x, y = regime_data(rng)
        assert x.min() <= fit_breakpoint(x, y).threshold <= x.max()

    @pytest.mark.parametrize("x,msg", [(np.full(30, 3.0), "constant"),
                                        (np.repeat(np.arange(5.0), 6), "distinct"),
                                        (np.arange(15.0), "20")])
    def test_degenerate_inputs(self, x, msg):
        with pytest.raises(ValueError, match=msg):
            fit_breakpoint(x, np.zeros_like(x))

    def test_estimator_wrapper(self, rng):
        x, y = regime_data(rng)
        est = clone(SegmentedRegression()).fit(x[:, None], y)
        np.testing.assert_array_equal(est.predict(x[:, None]), est.breakpoint_.predict(x))


BP = Breakpoint(21.0, 0.0328, 0.0091, 0.0, 0.0328 * 21 - 0.0091 * 21)


class TestRegimeCorrect:
    def test_high_vol_day_rewritten(self):
        hi, lo = dt.date(2011, 8, 8), dt.date(2011, 6, 1)
        pts = [CorrelationPoint(0.7, 1.0, 0.3, hi, 0.40), CorrelationPoint(0.6, 1.0, 0.3, lo, 0.18)]
        out = regime_correct(pts, {hi: 30.0, lo: 15.0}, BP)
        assert out[0].rho == pytest.approx(0.0091 * 40.0, abs=1e-15)
        assert out[1] == pts[1]

    def test_unit_correlation_dropped(self):
        out = regime_correct([CorrelationPoint(1.0, 1.0, 0.3, DAY, 0.2)], {DAY: 15.0}, BP)
        assert out == []

    def test_missing_vol(self):
        with pytest.raises(KeyError, match=str(DAY)):
            regime_correct([CorrelationPoint(0.5, 1.0, 0.3, DAY, 0.2)], {}, BP)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(-1.5, 1.5), st.floats(0.05, 1.2), st.floats(10, 40),
                              st.integers(0, 4)), min_size=1, max_size=30))
    def test_idempotent(self, rows):
        days = [DAY + dt.timedelta(i) for i in range(5)]
        atm = {days[i]: float(10 + 6 * i) for i in range(5)}
        pts = [CorrelationPoint(r, 1.0, 0.2, days[i], v / 100) for r, v, _, i in rows]
        once = regime_correct(pts, atm, BP)
        assert regime_correct(once, atm, BP) == once
        assert all(abs(p.rho) < 0.9999 for p in once)


class TestIcsCsv:
    def test_round_trip(self):
        pts = [CorrelationPoint(0.1 + i / 7, 0.9 + i / 100, 0.1 * (i + 1), DAY) for i in range(5)]
        buf = io.StringIO()
        write_ics_csv(pts, buf)
        assert buf.getvalue().splitlines()[0] == "date,kappa,tau,rho"
        assert read_ics_csv(io.StringIO(buf.getvalue())) == pts

    def test_bad_row_reports_line(self):
        with pytest.raises(DataError) as err:
            read_ics_csv(io.StringIO("date,kappa,tau,rho\n2011-05-02,1.0,0.2,0.5\n2011-05-02,x,0.2,0.5\n"))
        assert err.value.line == 3
