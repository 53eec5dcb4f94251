import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hestonbounds.analytic import (
    OptionSpec,
    PriceInterval,
    bs_price,
    formula_optimal_bounds,
    heston_price,
    implied_vol,
    to_zero_dividend_price,
)
from hestonbounds.errors import InputError, OutOfBandError
from hestonbounds.model import HestonParams, ParamMapMode, UncertaintyEllipse, in_uncertainty_set

SPOT, V0 = 100.0, 0.0457


def opt(strike, maturity, rate=0.05, q=0.0):
    return OptionSpec(strike=strike, maturity=maturity, rate=rate, dividend_yield=q)


class TestHestonPrice:
    @pytest.mark.parametrize(
        "strike,tau,price",
        [(100.0, 1.0, 10.9174), (75.0, 0.25, 26.0044), (125.0, 10.0, 37.1943)],
    )
    def test_reference_prices(self, ref_params, strike, tau, price):
        assert heston_price(ref_params, SPOT, V0, opt(strike, tau)) == pytest.approx(price, abs=1e-3)

    def test_vanishing_vol_of_vol_is_black_scholes(self):
        p = HestonParams(r=0.05, kappa=5.07, theta=0.0457, sigma=1e-6, rho=-0.5)
        c = heston_price(p, SPOT, p.theta, opt(100.0, 1.0))
        bs = bs_price(SPOT, math.sqrt(p.theta), opt(100.0, 1.0))
        assert c == pytest.approx(bs, abs=1e-4)

    def test_monotone_in_spot_strike_maturity(self, ref_params):
        taus = [0.25, 1.0, 10.0]
        strikes = [75.0, 100.0, 125.0]
        grid = {(k, t): heston_price(ref_params, SPOT, V0, opt(k, t)) for k in strikes for t in taus}
        for t in taus:
            assert grid[(75.0, t)] > grid[(100.0, t)] > grid[(125.0, t)]
        for k in strikes:
            assert grid[(k, 0.25)] < grid[(k, 1.0)] < grid[(k, 10.0)]
        up = heston_price(ref_params, SPOT * 1.01, V0, opt(100.0, 1.0))
        assert up > grid[(100.0, 1.0)]

    def test_parity_bounds(self, ref_params):
        for k in (75.0, 100.0, 125.0):
            for t in (0.25, 1.0, 10.0):
                c = heston_price(ref_params, SPOT, V0, opt(k, t))
                assert max(SPOT - k * math.exp(-0.05 * t), 0.0) - 1e-9 <= c <= SPOT

    def test_invalid_inputs(self, ref_params):
        with pytest.raises(InputError):
            heston_price(ref_params, -1.0, V0, opt(100, 1.0))
        with pytest.raises(InputError):
            heston_price(ref_params, SPOT, -0.1, opt(100, 1.0))

    def test_dividend_yield_discounts_forward(self, ref_params):
        with_q = heston_price(ref_params, SPOT, V0, opt(100.0, 1.0, q=0.03))
        without = heston_price(ref_params, SPOT, V0, opt(100.0, 1.0))
        assert with_q < without


class TestBlackScholes:
    def test_zero_vol_is_discounted_intrinsic(self):
        assert bs_price(100.0, 0.0, opt(90.0, 2.0, q=0.01)) == pytest.approx(
            100.0 * math.exp(-0.02) - 90.0 * math.exp(-0.1)
        )
        assert bs_price(100.0, 0.0, opt(200.0, 2.0)) == 0.0

    def test_tiny_strike_approaches_forward_leg(self):
        assert bs_price(100.0, 0.3, opt(1e-9, 1.0, q=0.02)) == pytest.approx(
            100.0 * math.exp(-0.02), rel=1e-9
        )

    def test_reference_vol_consistency(self):
        assert bs_price(100.0, 0.2124, opt(100.0, 1.0)) == pytest.approx(10.9174, abs=1e-2)


class TestImpliedVol:
    @pytest.mark.parametrize(
        "price,strike,tau,vol",
        [(10.9174, 100.0, 1.0, 0.2124), (0.0070, 125.0, 0.25, 0.1518)],
    )
    def test_reference_implied_vols(self, price, strike, tau, vol):
        assert implied_vol(price, SPOT, opt(strike, tau)) == pytest.approx(vol, abs=1e-3)

    @settings(max_examples=60, deadline=None)
    @given(
        vol=st.floats(0.01, 2.0),
        strike=st.floats(60.0, 150.0),
        tau=st.floats(0.05, 10.0),
    )
    def test_round_trip(self, vol, strike, tau):
        o = opt(strike, tau)
        price = bs_price(SPOT, vol, o)
        if price - max(SPOT - strike * math.exp(-0.05 * tau), 0.0) < 1e-12:
            return  # numerically at intrinsic: vol not identifiable
        assert bs_price(SPOT, implied_vol(price, SPOT, o), o) == pytest.approx(price, abs=1e-7)

    def test_out_of_band_errors_name_the_side(self):
        with pytest.raises(OutOfBandError) as low:
            implied_vol(max(SPOT - 100.0 * math.exp(-0.05), 0.0) - 0.01, SPOT, opt(100.0, 1.0))
        assert low.value.side == "lower"
        with pytest.raises(OutOfBandError) as high:
            implied_vol(SPOT + 0.01, SPOT, opt(100.0, 1.0))
        assert high.value.side == "upper"


class TestDividendConversion:
    def test_zero_yield_is_identity(self):
        o = opt(100.0, 1.0)
        price = bs_price(SPOT, 0.25, o)
        assert to_zero_dividend_price(price, SPOT, o) == pytest.approx(price, abs=1e-10)

    def test_two_step_composition(self):
        o_q = opt(100.0, 1.0, q=0.02)
        quote = bs_price(SPOT, 0.2, o_q)
        expected = bs_price(SPOT, 0.2, opt(100.0, 1.0))
        assert to_zero_dividend_price(quote, SPOT, o_q) == pytest.approx(expected, abs=1e-8)

    def test_vol_preserved(self):
        o_q = opt(110.0, 0.7, q=0.035)
        quote = bs_price(SPOT, 0.31, o_q)
        converted = to_zero_dividend_price(quote, SPOT, o_q)
        assert implied_vol(converted, SPOT, opt(110.0, 0.7)) == pytest.approx(
            implied_vol(quote, SPOT, o_q), abs=1e-8
        )

    def test_monotone_in_quote(self):
        o_q = opt(100.0, 1.0, q=0.02)
        quotes = [bs_price(SPOT, v, o_q) for v in (0.15, 0.2, 0.25)]
        out = [to_zero_dividend_price(q, SPOT, o_q) for q in quotes]
        assert out[0] < out[1] < out[2]


class TestFormulaBounds:
    def test_degenerate_set_collapses(self, ref_params, ref_cov):
        ell = UncertaintyEllipse(ref_params.center_control(), ref_cov, 0.0)
        interval = formula_optimal_bounds(ref_params, ell, SPOT, V0, opt(100.0, 1.0))
        center = heston_price(ref_params, SPOT, V0, opt(100.0, 1.0))
        assert interval.lower == pytest.approx(center, abs=1e-9)
        assert interval.upper == pytest.approx(center, abs=1e-9)

    def test_contains_center_and_certifies(self, ref_params, ref_ellipse):
        interval = formula_optimal_bounds(
            ref_params, ref_ellipse, SPOT, V0, opt(100.0, 1.0), certify=True, grid_resolution=24
        )
        center = heston_price(ref_params, SPOT, V0, opt(100.0, 1.0))
        assert interval.lower <= center <= interval.upper
        assert in_uncertainty_set(interval.argmin, ref_ellipse, tol=1e-9)
        assert in_uncertainty_set(interval.argmax, ref_ellipse, tol=1e-9)

    def test_calibrated_mode_prices_controls_directly(self, ref_params, ref_ellipse):
        stat = formula_optimal_bounds(ref_params, ref_ellipse, SPOT, V0, opt(100.0, 1.0))
        calib = formula_optimal_bounds(
            ref_params, ref_ellipse, SPOT, V0, opt(100.0, 1.0), mode=ParamMapMode.CALIBRATED
        )
        # with lambda = 0 the two maps agree
        assert calib.lower == pytest.approx(stat.lower, abs=2e-3)
        assert calib.upper == pytest.approx(stat.upper, abs=2e-3)

    def test_interval_validation(self):
        with pytest.raises(InputError):
            PriceInterval(2.0, 1.0)
