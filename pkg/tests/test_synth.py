import json
from collections import defaultdict

import numpy as np
import pytest

from conftest import SMALL_SYNTH
from implcorr.correlation import fit_breakpoint, implied_correlation_points
from implcorr.marketdata import SurfacePoint, interpolate_rate, year_fraction
from implcorr.synth import (
    INDEX_TICKER,
    SynthConfig,
    breakpoint_sample,
    generate_market,
    listed_expiries,
    simulate_factor_panel,
    third_friday,
    true_correlation,
    write_market,
)


def surface_points(market, t):
    """Generating IVs of day ``t`` as surface points keyed by underlying."""
    day = market.dates[t]
    curve = [tuple(c) for c in market.config.rate_curve]
    out, rho = defaultdict(list), []
    for tr, iv, r in zip(market.trades, market.trade_iv, market.trade_rho):
        if tr.trade_date != day:
            continue
        tau = year_fraction(day, tr.expiry_date)
        fwd = market.spots[tr.underlying][t] * np.exp(interpolate_rate(curve, tau) * tau)
        out[tr.underlying].append(SurfacePoint(tr.strike / fwd, tau, iv, tr.expiry_date))
        if tr.underlying == INDEX_TICKER:
            rho.append(r)
    return out, np.array(rho)


class TestDeterminism:
    def test_same_seed_same_market(self, small_market):
        again = generate_market(SynthConfig(seed=11, **SMALL_SYNTH))
        assert again.trades == small_market.trades
        np.testing.assert_array_equal(again.trade_iv, small_market.trade_iv)
        np.testing.assert_array_equal(again.factors, small_market.factors)

    def test_files_byte_identical(self, small_market, tmp_path):
        a = write_market(small_market, tmp_path / "a")
        b = write_market(generate_market(SynthConfig(seed=11, **SMALL_SYNTH)), tmp_path / "b")
        for name in a:
            assert a[name].read_bytes() == b[name].read_bytes(), name

    def test_other_seed_differs(self, small_market):
        other = generate_market(SynthConfig(seed=12, **SMALL_SYNTH))
        assert not np.array_equal(other.factors, small_market.factors)


class TestConstruction:
    def test_correlation_in_open_unit_interval(self, small_market):
        rho = small_market.trade_rho[np.isfinite(small_market.trade_rho)]
        assert rho.size > 0 and rho.min() > 0 and rho.max() < 0.9999

    def test_default_observations_per_day(self):
        assert SynthConfig().obs_per_day == 135

    def test_maturities_are_right_skewed(self, small_market):
        taus = np.array([year_fraction(t.trade_date, t.expiry_date) for t in small_market.trades
                         if t.underlying == INDEX_TICKER])
        assert np.mean(taus) > np.median(taus)

    @pytest.mark.parametrize("t", [0, 17, 69])
    def test_equicorrelation_recovers_truth(self, small_market, t):
        surf, rho = surface_points(small_market, t)
        idx = surf.pop(INDEX_TICKER)
        weights = dict(zip(small_market.basket.tickers, small_market.basket.weights))
        pts, diag = implied_correlation_points(idx, surf, weights, small_market.dates[t])
        assert diag["kept"] > 0
        by_key = {(p.kappa, p.tau): r for p, r in zip(idx, rho)}
        for p in pts:
            assert p.rho == pytest.approx(by_key[(p.kappa, p.tau)], abs=1e-10)

    def test_index_strike_matches_true_atm_correlation(self, small_market):
        cfg, w = small_market.config, np.asarray(small_market.basket.w)
        d0 = small_market.dates[0]
        strikes = {tk: k for d, tk, ten, k in small_market.varswaps if d == d0 and ten == 0.25}
        sig2 = np.array([strikes[tk] for tk in small_market.basket.tickers])
        ws = w * np.sqrt(sig2)
        rho = (strikes[INDEX_TICKER] - ws @ ws) / (ws.sum() ** 2 - ws @ ws)
        assert rho == pytest.approx(float(true_correlation(cfg, small_market.factors[0], 1.0, 0.25)),
                                    abs=1e-12)

    def test_ground_truth_contents(self, small_market, tmp_path):
        paths = write_market(small_market, tmp_path)
        truth = json.loads(paths["ground_truth"].read_text())
        assert len(truth["factor_scores"]) == SMALL_SYNTH["n_days"]
        assert truth["config"]["seed"] == 11
        rv = truth["realized_variance"]["0.083"]
        assert len(rv) == SMALL_SYNTH["n_days"] - 21 and len(rv[0]) == 1 + SMALL_SYNTH["n_assets"]


class TestCalendar:
    def test_third_friday(self):
        assert third_friday(2010, 8).isoformat() == "2010-08-20"
        assert third_friday(2010, 10).isoformat() == "2010-10-15"

    def test_listed_expiries_are_sorted_and_in_band(self, small_market):
        exps = listed_expiries(small_market.dates[0])
        assert exps == sorted(exps) and len(exps) >= 3


REGIME = {"threshold": 21.0, "slope_low": 0.0328, "slope_high": 0.0091, "noise": 0.01}


def regime_config(seed, n_days=750):
    return SynthConfig(seed=seed, n_days=n_days, n_assets=3, obs_per_day=1, tree_steps=10,
                       regime=REGIME, vol_levels=(0.12, 0.4), vol_of_vol=0.12)


class TestRegime:
    def test_breakpoint_recovered(self):
        m = generate_market(regime_config(3))
        bp = fit_breakpoint(m.breakpoint_sample["x"], m.breakpoint_sample["y"])
        assert bp.threshold == pytest.approx(21.0, abs=1.5)
        assert bp.slope_high == pytest.approx(0.0091, abs=0.005)
        assert bp.slope_low == pytest.approx(0.0328, abs=0.005)

    def test_light_sample_matches_full_generator(self):
        cfg = regime_config(4, n_days=120)
        assert breakpoint_sample(cfg) == generate_market(cfg).breakpoint_sample

    def test_sample_needs_regime(self):
        with pytest.raises(ValueError, match="regime"):
            breakpoint_sample(SynthConfig(n_days=10))

    def test_no_regime_no_sample(self, small_market):
        assert small_market.breakpoint_sample is None


class TestConfig:
    @pytest.mark.parametrize("kw, msg", [
        (dict(seed=-1), "seed"),
        (dict(seed=2 ** 64), "seed"),
        (dict(n_assets=1), "n_assets"),
        (dict(n_days=1), "n_days"),
        (dict(var_coefs=((0.9, 0.6, 0.5), (0.2, 0.2, 0.1))), "stable"),
        (dict(factor_noise=(0.1,)), "factor_noise"),
    ])
    def test_invalid(self, kw, msg):
        with pytest.raises(ValueError, match=msg):
            SynthConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            SynthConfig.from_dict({"n_days": 10, "colour": "red"})

    def test_from_dict_accepts_lists(self):
        cfg = SynthConfig.from_dict({"vol_levels": [0.2, 0.3], "var_coefs": [[0.5, 0.5, 0.5], [0, 0, 0]]})
        assert cfg.vol_levels == (0.2, 0.3) and cfg.var_coefs[1] == (0, 0, 0)

    def test_correlation_outside_range_is_rejected(self):
        with pytest.raises(ValueError, match="correlation"):
            generate_market(SynthConfig(seed=1, n_days=3, n_assets=2, obs_per_day=5, tree_steps=10,
                                        mean_surface=(6.0, 0.0, 0.0)))


class TestFactorPanel:
    def test_shapes_and_determinism(self):
        a = simulate_factor_panel(n_days=20, obs_per_day=10, seed=4)
        b = simulate_factor_panel(n_days=20, obs_per_day=10, seed=4)
        X, y, day, Z, truth = a
        assert X.shape == (200, 2) and y.shape == (200,) and Z.shape == (20, 3)
        np.testing.assert_array_equal(y, b[1])
        assert day.max() == 19 and len(truth["basis"]) == 3

    def test_noise_free_panel_is_exact(self):
        X, y, day, Z, truth = simulate_factor_panel(n_days=5, obs_per_day=50, noise=0.0, seed=2)
        model = truth["mean"](X) + sum(Z[day, l] * truth["basis"][l](X) for l in range(3))
        np.testing.assert_allclose(y, model, atol=1e-14)

    def test_basis_orthonormal_under_uniform_measure(self):
        g = (np.arange(400) + 0.5) / 400
        X = np.column_stack([a.ravel() for a in np.meshgrid(g, g)])
        _, _, _, _, truth = simulate_factor_panel(n_days=2, obs_per_day=2)
        B = np.column_stack([f(X) for f in truth["basis"]])
        np.testing.assert_allclose(B.T @ B / len(X), np.eye(3), atol=1e-4)
