import math

import numpy as np
import pytest

from hestonbounds.analytic import OptionSpec, heston_price
from hestonbounds.bsde import (
    BsdeScheme,
    CallPayoff,
    Direction,
    DriverContext,
    IdentityPayoff,
    KnnSpec,
    MarsSpec,
    SchemeBase,
    SimConfig,
    ZSource,
    alpha_effect,
    driver_f,
    n_vector,
    optimal_driver,
    pricing_bounds,
    solve_bsde,
)
from hestonbounds.errors import InputError
from hestonbounds.model import (
    ControlVector,
    HestonParams,
    UncertaintyEllipse,
    in_uncertainty_set,
)
from hestonbounds.simulate import TimeGrid, simulate_heston
from tests.conftest import CHI3_95


@pytest.fixture(scope="module")
def ctx_up(ref_params, ref_ellipse):
    return DriverContext(ref_params, ref_ellipse, direction=Direction.UPPER)


@pytest.fixture(scope="module")
def ctx_dn(ref_params, ref_ellipse):
    return DriverContext(ref_params, ref_ellipse, direction=Direction.LOWER)


def independent_alpha(s, v, u, params):
    """Fresh transcription of the measure-change kernel for cross-checking."""
    kappa_rn = params.kappa + params.sigma * params.lam
    theta_rn = params.kappa * params.theta / kappa_rn
    kappa_u = u.kappa + params.sigma * params.lam
    theta_u = u.kappa * u.theta / kappa_u
    num = kappa_u * theta_u - kappa_rn * theta_rn - (kappa_u - kappa_rn) * v
    a1 = num / (params.sigma * math.sqrt(v))
    a2 = (-params.rho * num + params.sigma * (u.r - params.r)) / (
        params.sigma * math.sqrt(v) * math.sqrt(1 - params.rho**2)
    )
    return a1, a2


class TestAlphaEffect:
    def test_center_control_has_zero_effect(self, ref_params, ctx_up):
        a1, a2 = alpha_effect(100.0, 0.0457, ref_params.center_control(), ctx_up)
        assert a1 == 0.0 and a2 == 0.0

    def test_rate_only_deviation_with_zero_correlation(self):
        p = HestonParams(r=0.05, kappa=5.07, theta=0.0457, sigma=0.48, rho=0.0)
        ctx = DriverContext(p, None)
        u = ControlVector(0.07, 5.07, 0.0457)
        a1, a2 = alpha_effect(90.0, 0.04, u, ctx)
        assert a1 == pytest.approx(0.0, abs=1e-15)
        assert a2 == pytest.approx((0.07 - 0.05) / math.sqrt(0.04))

    def test_against_independent_transcription(self, ref_params, ctx_up):
        rng = np.random.default_rng(2)
        for lam in (0.0, 0.4):
            p = HestonParams(r=0.05, kappa=5.07, theta=0.0457, sigma=0.48, rho=-0.767, lam=lam)
            ctx = DriverContext(p, None)
            for _ in range(40):
                u = ControlVector(rng.uniform(0, 0.1), rng.uniform(1, 9), rng.uniform(0.01, 0.2))
                v = rng.uniform(0.001, 0.3)
                got = alpha_effect(100.0, v, u, ctx)
                want = independent_alpha(100.0, v, u, p)
                assert got[0] == pytest.approx(want[0], rel=1e-12, abs=1e-12)
                assert got[1] == pytest.approx(want[1], rel=1e-12, abs=1e-12)

    def test_nonpositive_variance_rejected(self, ref_params, ctx_up):
        with pytest.raises(InputError):
            alpha_effect(100.0, 0.0, ref_params.center_control(), ctx_up)


class TestDriver:
    def test_center_is_pure_discounting(self, ref_params, ctx_up):
        u = ref_params.center_control()
        f = driver_f(100.0, 0.05, 7.0, 1.0, 2.0, u, ctx_up)
        assert f == pytest.approx(-0.05 * 7.0)

    def test_zero_state_zero_driver(self, ref_params, ctx_up):
        rng = np.random.default_rng(3)
        for _ in range(20):
            u = ControlVector(rng.uniform(0, 0.1), rng.uniform(1, 9), rng.uniform(0.01, 0.2))
            assert driver_f(100.0, 0.05, 0.0, 0.0, 0.0, u, ctx_up) == pytest.approx(0.0, abs=1e-14)

    def test_divergence_form_equality(self, ref_params, ctx_up):
        rng = np.random.default_rng(4)
        center = ref_params.center_control().to_rkb()
        worst = 0.0
        for _ in range(1000):
            s, v = rng.uniform(50, 150), rng.uniform(0.001, 0.3)
            y, z1, z2 = rng.normal(size=3) * 10
            u = ControlVector(rng.uniform(0, 0.1), rng.uniform(1, 9), rng.uniform(0.005, 0.2))
            direct = float(driver_f(s, v, y, z1, z2, u, ctx_up))
            n1, n2, n3 = n_vector(s, v, y, z1, z2, ctx_up)
            dev = u.to_rkb() - center
            linear = float(n1 * dev[0] + n2 * dev[1] + n3 * dev[2] - ref_params.r * y)
            worst = max(worst, abs(direct - linear))
        assert worst < 1e-10

    def test_n_vector_zero_z(self, ctx_up):
        n1, n2, n3 = n_vector(100.0, 0.05, 3.0, 0.0, 0.0, ctx_up)
        assert (n1, n2, n3) == (-3.0, 0.0, 0.0)

    def test_driver_difference_is_linear_in_deviation(self, ref_params, ctx_up):
        rng = np.random.default_rng(5)
        center = ref_params.center_control()
        for _ in range(50):
            s, v = rng.uniform(50, 150), rng.uniform(0.005, 0.2)
            y, z1, z2 = rng.normal(size=3) * 5
            u = ControlVector(rng.uniform(0, 0.1), rng.uniform(1, 9), rng.uniform(0.005, 0.2))
            lhs = float(driver_f(s, v, y, z1, z2, u, ctx_up) - driver_f(s, v, y, z1, z2, center, ctx_up))
            n = np.array(n_vector(s, v, y, z1, z2, ctx_up))
            dev = u.to_rkb() - center.to_rkb()
            assert lhs == pytest.approx(float(n @ dev), abs=1e-10)


class TestOptimalDriver:
    def test_degenerate_set(self, ref_params, ref_cov):
        ell = UncertaintyEllipse(ref_params.center_control(), ref_cov, 0.0)
        ctx = DriverContext(ref_params, ell, direction=Direction.UPPER)
        h, u = optimal_driver(100.0, 0.05, 4.0, 1.0, -1.0, ctx)
        assert h == pytest.approx(-0.05 * 4.0)
        assert u == pytest.approx(ell.center.to_rkb())

    def test_sign_symmetry(self, ctx_up, ctx_dn):
        rng = np.random.default_rng(6)
        for _ in range(200):
            s, v = rng.uniform(50, 150), rng.uniform(0.001, 0.3)
            y, z1, z2 = rng.normal(size=3) * 10
            hp, _ = optimal_driver(s, v, y, z1, z2, ctx_up)
            hm, _ = optimal_driver(s, v, y, z1, z2, ctx_dn)
            assert hp + hm == pytest.approx(-2 * 0.05 * y, abs=1e-12)

    def test_dominates_sampled_controls(self, ref_params, ref_ellipse, ctx_up):
        rng = np.random.default_rng(7)
        transform = ref_ellipse.ball_transform()
        w = rng.normal(size=(3, 2000))
        w /= np.linalg.norm(w, axis=0)
        radii = rng.uniform(0, 1, 2000) ** (1 / 3)
        controls = ref_ellipse.center.to_rkb()[:, None] + transform @ (w * radii)
        s, v, y, z1, z2 = 100.0, 0.05, 7.0, 3.0, -2.0
        h, u_star = optimal_driver(s, v, y, z1, z2, ctx_up)
        n = np.array(n_vector(s, v, y, z1, z2, ctx_up))
        devs = controls - ref_ellipse.center.to_rkb()[:, None]
        f_vals = n @ devs - ref_params.r * y
        assert h >= f_vals.max() - 1e-12
        assert in_uncertainty_set(ControlVector.from_rkb(u_star), ref_ellipse, tol=1e-9)

    def test_cancellation_below_floor(self, ref_params, ref_ellipse):
        ctx = DriverContext(ref_params, ref_ellipse, epsilon_v=0.00041, direction=Direction.UPPER)
        h, u = optimal_driver(100.0, 0.0001, 5.0, 1.0, 1.0, ctx)
        assert h == pytest.approx(-0.05 * 5.0)
        assert u == pytest.approx(ref_ellipse.center.to_rkb())

    def test_scheme_validation(self):
        with pytest.raises(InputError):
            BsdeScheme(base=SchemeBase.IMPLICIT_BT, fixed_point_iters=0)
        with pytest.raises(InputError):
            BsdeScheme(regressor=KnnSpec(5), z_source=ZSource.MARS_DERIVATIVE)


@pytest.fixture(scope="module")
def small_bundle(ref_params):
    return simulate_heston(ref_params, 100.0, 0.0457, TimeGrid.equidistant(1.0, 12), 20_000, seed=20)


class TestSolveBsde:

    def test_terminal_condition_exact(self, ref_params, small_bundle):
        ctx = DriverContext(ref_params, None)
        sol = solve_bsde(small_bundle, CallPayoff(100.0), ctx, BsdeScheme(regressor=KnnSpec(5)))
        assert np.array_equal(sol.y_paths[:, -1], np.maximum(small_bundle.s_paths[:, -1] - 100.0, 0.0))

    def test_zero_driver_martingale(self, small_bundle):
        p0 = HestonParams(r=0.0, kappa=5.07, theta=0.0457, sigma=0.48, rho=-0.767)
        b = simulate_heston(p0, 100.0, 0.0457, TimeGrid.equidistant(1.0, 12), 20_000, seed=21)
        ctx = DriverContext(p0, None)
        sol = solve_bsde(b, IdentityPayoff(), ctx, BsdeScheme(base=SchemeBase.RECURSIVE, regressor=KnnSpec(5)))
        assert abs(sol.y0_mean - 100.0) < 3 * sol.y0_se

    def test_plain_price_matches_analytic(self, ref_params, small_bundle):
        ctx = DriverContext(ref_params, None)
        opt = OptionSpec(strike=100.0, maturity=1.0, rate=0.05)
        analytic = heston_price(ref_params, 100.0, 0.0457, opt)
        sol = solve_bsde(small_bundle, CallPayoff(100.0), ctx,
                         BsdeScheme(base=SchemeBase.RECURSIVE, regressor=MarsSpec(fit_subsample=10_000)))
        assert abs(sol.y0_mean - analytic) < 3 * sol.y0_se + 0.08

    def test_explicit_implicit_and_derivative_variants_run(self, ref_params, small_bundle):
        fixed = ControlVector(0.06, 4.5, 0.05)
        ctx = DriverContext(ref_params, None, fixed_control=fixed)
        values = {}
        for label, scheme in {
            "explicit": BsdeScheme(base=SchemeBase.EXPLICIT, regressor=MarsSpec(fit_subsample=5000)),
            "implicit": BsdeScheme(base=SchemeBase.IMPLICIT_BT, regressor=MarsSpec(fit_subsample=5000),
                                   fixed_point_iters=2),
            "recursive": BsdeScheme(base=SchemeBase.RECURSIVE, regressor=MarsSpec(fit_subsample=5000)),
            "rec-vr": BsdeScheme(base=SchemeBase.RECURSIVE, regressor=MarsSpec(fit_subsample=5000),
                                 variance_reduction=True),
            "deriv": BsdeScheme(base=SchemeBase.RECURSIVE, regressor=MarsSpec(fit_subsample=5000),
                                z_source=ZSource.MARS_DERIVATIVE),
        }.items():
            sol = solve_bsde(small_bundle, CallPayoff(100.0), ctx, scheme, store_paths=False)
            values[label] = sol.y0_mean
        ref_price = heston_price(
            HestonParams(r=0.06, kappa=4.5, theta=0.05, sigma=0.48, rho=-0.767),
            100.0, 0.0457, OptionSpec(strike=100.0, maturity=1.0, rate=0.06),
        )
        for label, val in values.items():
            assert val == pytest.approx(ref_price, abs=0.6), (label, val, ref_price)

    def test_heston_price_predictor_requires_opt(self, ref_params, small_bundle):
        from hestonbounds.bsde import ExtraPredictor

        scheme = BsdeScheme(regressor=MarsSpec(fit_subsample=5000),
                            extra_predictors=ExtraPredictor.HESTON_PRICE)
        ctx = DriverContext(ref_params, None)
        with pytest.raises(InputError):
            solve_bsde(small_bundle, CallPayoff(100.0), ctx, scheme)
        opt = OptionSpec(strike=100.0, maturity=1.0, rate=0.05)
        sol = solve_bsde(small_bundle, CallPayoff(100.0), ctx, scheme, opt=opt, store_paths=False)
        analytic = heston_price(ref_params, 100.0, 0.0457, opt)
        assert sol.y0_mean == pytest.approx(analytic, abs=0.3)

    def test_controls_recorded_inside_set(self, ref_params, ref_ellipse, small_bundle):
        ctx = DriverContext(ref_params, ref_ellipse, direction=Direction.UPPER)
        scheme = BsdeScheme(base=SchemeBase.RECURSIVE, regressor=KnnSpec(25))
        sol = solve_bsde(small_bundle, CallPayoff(100.0), ctx, scheme, store_controls=True)
        u = sol.control_paths.reshape(-1, 3)
        sample = u[:: max(1, u.shape[0] // 500)]
        for rkb in sample:
            assert in_uncertainty_set(ControlVector.from_rkb(rkb), ref_ellipse, tol=1e-9)


class TestSummaryRows:
    def test_solution_summary_row(self, ref_params, small_bundle):
        from hestonbounds.bsde import solution_summary_row

        ctx = DriverContext(ref_params, None)
        scheme = BsdeScheme(base=SchemeBase.RECURSIVE, regressor=KnnSpec(7),
                            variance_reduction=True)
        sol = solve_bsde(small_bundle, CallPayoff(100.0), ctx, scheme, store_paths=False)
        row = solution_summary_row(scheme, Direction.UPPER, sol, 1.25)
        assert row[0] == "recursive-knn(7)+vr"
        assert row[1] == "upper"
        assert row[2] == sol.y0_mean and row[3] == sol.y0_se and row[4] == 1.25


class TestPricingBounds:
    def test_degenerate_chi_collapses_to_plain_price(self, ref_params, ref_cov):
        ell = UncertaintyEllipse(ref_params.center_control(), ref_cov, 0.0)
        opt = OptionSpec(strike=100.0, maturity=1.0, rate=0.05)
        interval, (lo, hi) = pricing_bounds(
            ref_params, ell, 100.0, 0.0457, opt,
            SimConfig(n_paths=20_000, n_steps=12, seed=1),
            BsdeScheme(base=SchemeBase.RECURSIVE, regressor=MarsSpec(fit_subsample=10_000)),
        )
        assert interval.lower == pytest.approx(interval.upper, abs=1e-12)
        analytic = heston_price(ref_params, 100.0, 0.0457, opt)
        assert abs(interval.lower - analytic) < 3 * lo.y0_se + 0.08

    def test_lower_below_upper_with_uncertainty(self, ref_params, ref_ellipse):
        opt = OptionSpec(strike=100.0, maturity=1.0, rate=0.05)
        interval, (lo, hi) = pricing_bounds(
            ref_params, ref_ellipse, 100.0, 0.0457, opt,
            SimConfig(n_paths=20_000, n_steps=12, seed=2),
            BsdeScheme(base=SchemeBase.RECURSIVE, regressor=MarsSpec(fit_subsample=10_000),
                       variance_reduction=True),
        )
        center = heston_price(ref_params, 100.0, 0.0457, opt)
        assert interval.lower < center < interval.upper

    def test_fine_grid_downsampling_path(self, ref_params, ref_cov):
        ell = UncertaintyEllipse(ref_params.center_control(), ref_cov, 0.0)
        opt = OptionSpec(strike=100.0, maturity=0.5, rate=0.05)
        interval, _ = pricing_bounds(
            ref_params, ell, 100.0, 0.0457, opt,
            SimConfig(n_paths=5_000, n_steps=10, fine_steps=100, seed=3),
            BsdeScheme(base=SchemeBase.RECURSIVE, regressor=KnnSpec(9)),
        )
        assert interval.lower > 0
