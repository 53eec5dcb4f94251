import numpy as np
import pytest

import hestonbounds.regression as reg
from hestonbounds._mars_py import hinge_sweep as py_sweep
from hestonbounds.errors import InputError
from hestonbounds.regression import MarsFit, knn_fit_predict, mars_fit, mars_gradient, mars_predict


class TestKnn:
    def test_constant_responses(self):
        x = np.arange(8.0)[:, None]
        assert np.allclose(knn_fit_predict(x, np.full(8, 4.2), 3), 4.2)

    def test_full_ball_is_sample_mean(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(40, 2))
        y = rng.normal(size=40)
        assert np.allclose(knn_fit_predict(x, y, 39), y.mean())

    def test_five_point_hand_case(self):
        x = np.arange(5.0)[:, None]
        y = np.arange(5.0)
        preds = knn_fit_predict(x, y, 2)
        assert preds[2] == pytest.approx((1 + 2 + 3) / 3)
        # endpoints: neighbours of 0 within d_2 = 2 are {0,1,2}
        assert preds[0] == pytest.approx(1.0)

    def test_tie_rule_divides_by_included_count(self):
        x = np.array([[0.0, 0], [0, 0], [0, 0], [1, 0], [0, 1], [2, 2]])
        y = np.array([1.0, 2.0, 3.0, 10.0, 20.0, 30.0])
        preds = knn_fit_predict(x, y, 2)
        # at the triple point d_2 = 0 and the ball holds exactly the 3 duplicates
        assert np.allclose(preds[:3], 2.0)

    def test_permutation_equivariance_and_shift(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(30, 2))
        y = rng.normal(size=30)
        perm = rng.permutation(30)
        base = knn_fit_predict(x, y, 4)
        assert np.allclose(knn_fit_predict(x[perm], y[perm], 4), base[perm])
        assert np.allclose(knn_fit_predict(x, y + 7.5, 4), base + 7.5)

    def test_k_validation(self):
        x = np.arange(5.0)[:, None]
        with pytest.raises(InputError):
            knn_fit_predict(x, np.arange(5.0), 5)

    def test_multi_target_matches_single(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(50, 2))
        ys = rng.normal(size=(50, 3))
        stacked = knn_fit_predict(x, ys, 6)
        for j in range(3):
            assert np.allclose(stacked[:, j], knn_fit_predict(x, ys[:, j], 6))


class TestMarsFit:
    def test_affine_exact(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 2, size=(200, 2))
        y = 3.0 + 2.0 * x[:, 0] - 0.7 * x[:, 1]
        fit = mars_fit(x, y, max_terms=7, degree=1)
        assert fit.rss < 1e-8

    def test_noiseless_hinge_recovery(self):
        x = np.linspace(0, 1, 101)[:, None]
        y = np.maximum(x[:, 0] - 0.5, 0.0)
        fit = mars_fit(x, y, max_terms=9, degree=1)
        assert fit.rss < 1e-6
        assert any(knot == pytest.approx(0.5) for t in fit.terms for _, knot, _ in t)

    def test_degree_one_never_multiplies_hinges(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(size=(300, 2))
        y = np.sin(3 * x[:, 0]) + x[:, 1] ** 2
        fit = mars_fit(x, y, max_terms=15, degree=1)
        assert all(len(t) <= 1 for t in fit.terms)

    def test_no_same_variable_products(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(size=(400, 2))
        y = np.maximum(x[:, 0] - 0.3, 0) * np.maximum(0.7 - x[:, 1], 0)
        fit = mars_fit(x, y, max_terms=15, degree=2)
        for term in fit.terms:
            vars_in_term = [v for v, _, _ in term]
            assert len(vars_in_term) == len(set(vars_in_term))

    def test_knots_lie_on_observations(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(size=(150, 2))
        y = rng.normal(size=150) + x[:, 0]
        fit = mars_fit(x, y, max_terms=11, degree=2)
        observed = {round(v, 12) for col in x.T for v in col}
        for term in fit.terms:
            for _, knot, _ in term:
                assert round(knot, 12) in observed

    def test_forward_rss_non_increasing(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(size=(500, 2))
        y = np.cos(4 * x[:, 0]) * x[:, 1] + 0.05 * rng.normal(size=500)
        fit = mars_fit(x, y, max_terms=17, degree=2)
        assert np.all(np.diff(np.array(fit.forward_rss)) <= 1e-9)

    def test_in_span_conditional_mean(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(size=(600, 2))
        k0, k1 = x[10, 0], x[20, 1]  # knots must sit on observed coordinates
        y = 1.0 + 2.0 * np.maximum(x[:, 0] - k0, 0) - 3.0 * np.maximum(k1 - x[:, 1], 0)
        fit = mars_fit(x, y, max_terms=15, degree=2)
        assert fit.rss / 600 < 1e-10

    def test_continuity_across_knots(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(size=(300, 2))
        y = np.maximum(x[:, 0] - 0.45, 0) + 0.1 * rng.normal(size=300)
        fit = mars_fit(x, y, max_terms=11, degree=2)
        for term in fit.terms:
            for var, knot, _ in term:
                probe = np.tile(np.array([[0.5, 0.5]]), (3, 1))
                probe[0, var] = knot - 1e-9
                probe[1, var] = knot
                probe[2, var] = knot + 1e-9
                vals = fit.predict(probe)
                assert abs(vals[1] - vals[0]) < 1e-7
                assert abs(vals[2] - vals[1]) < 1e-7

    def test_subsample_and_knot_thinning_still_fit(self):
        rng = np.random.default_rng(9)
        x = rng.uniform(size=(5000, 2))
        y = np.maximum(x[:, 0] - 0.5, 0) * 2 + x[:, 1]
        fit = mars_fit(x, y, max_terms=15, degree=2, knots=32, fit_subsample=1000)
        assert fit.rss / 5000 < 1e-3

    def test_validation(self):
        x = np.arange(10.0)[:, None]
        with pytest.raises(InputError):
            mars_fit(x, np.arange(10.0), max_terms=11, degree=2)
        with pytest.raises(InputError):
            mars_fit(x, np.arange(10.0), degree=3)


class TestMarsGradient:
    def test_affine_gradient_is_constant(self):
        rng = np.random.default_rng(10)
        x = rng.uniform(size=(200, 2))
        y = 1.0 + 2.0 * x[:, 0] - 0.5 * x[:, 1]
        fit = mars_fit(x, y, max_terms=7, degree=1)
        g = fit.gradient(rng.uniform(size=(20, 2)))
        assert np.allclose(g[:, 0], 2.0, atol=1e-6)
        assert np.allclose(g[:, 1], -0.5, atol=1e-6)

    def test_single_hinge_step_gradient(self):
        fit = MarsFit(
            intercept=0.0,
            coefs=np.array([1.0]),
            terms=(((0, 0.5, 1),),),
            rss=0.0,
            gcv=0.0,
            n_inputs=1,
        )
        assert fit.gradient(np.array([[0.3]]))[0, 0] == 0.0
        assert fit.gradient(np.array([[0.7]]))[0, 0] == 1.0
        assert fit.gradient(np.array([[0.5]]))[0, 0] == 1.0  # right derivative

    def test_finite_difference_oracle_degree_two(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(size=(2000, 2))
        y = (
            0.5
            + np.maximum(x[:, 0] - 0.35, 0) * np.maximum(0.65 - x[:, 1], 0)
            + 0.4 * x[:, 1]
            + 0.02 * rng.normal(size=2000)
        )
        fit = mars_fit(x, y, max_terms=17, degree=2)
        knots = {(v, k) for t in fit.terms for v, k, _ in t}
        pts = rng.uniform(0.02, 0.98, size=(100, 2))
        for v, k in knots:  # keep probes off the knot hyperplanes
            pts[np.abs(pts[:, v] - k) < 1e-5, v] += 2e-5
        g = fit.gradient(pts)
        h = 1e-6
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd = (fit.predict(pts + e) - fit.predict(pts - e)) / (2 * h)
            denom = np.maximum(np.abs(fd), 1e-4)
            assert np.max(np.abs(fd - g[:, j]) / denom) < 1e-4

    def test_spec_entry_points(self):
        x = np.linspace(0, 1, 50)[:, None]
        y = 2 * x[:, 0]
        fit = mars_fit(x, y, max_terms=5, degree=1)
        assert mars_predict(fit, x) == pytest.approx(y, abs=1e-8)
        assert mars_gradient(fit, np.array([0.5])) == pytest.approx([2.0], abs=1e-8)


class TestSerialization:
    def test_text_round_trip(self):
        rng = np.random.default_rng(12)
        x = rng.uniform(size=(500, 2))
        y = np.maximum(x[:, 0] - 0.4, 0) * x[:, 1] + 0.3 * x[:, 0]
        fit = mars_fit(x, y, max_terms=11, degree=2)
        clone = MarsFit.from_text(fit.to_text())
        pts = rng.uniform(size=(100, 2))
        assert np.allclose(clone.predict(pts), fit.predict(pts), atol=1e-12)

    def test_rejects_other_text(self):
        with pytest.raises(InputError):
            MarsFit.from_text("something else")


class TestKernelBackends:
    def test_python_and_active_kernel_agree(self, monkeypatch):
        rng = np.random.default_rng(13)
        x = rng.uniform(size=(800, 2))
        y = np.maximum(x[:, 0] - 0.6, 0) - 2 * np.maximum(0.2 - x[:, 1], 0) + 0.05 * rng.normal(size=800)
        fit_active = mars_fit(x, y, max_terms=13, degree=2)
        monkeypatch.setattr(reg, "hinge_sweep", py_sweep)
        fit_py = mars_fit(x, y, max_terms=13, degree=2)
        assert fit_active.terms == fit_py.terms
        pts = rng.uniform(size=(200, 2))
        assert np.allclose(fit_active.predict(pts), fit_py.predict(pts), atol=1e-8)
