import math

import numpy as np
import pytest
from scipy.linalg import cho_factor, cho_solve

from tailrisk import (
    ArtifactError,
    DegenerateTrainingError,
    FittedSurrogate,
    Gaussian,
    InputModel,
    KernelSpec,
    autocorrelation,
    build_basis,
    fit,
    loo_cv_objective,
    multi_index_set,
    optimize_theta,
    rastrigin,
    sample,
    whiten,
)
from tailrisk.surrogate import correlation_matrix, cross_correlation

from helpers import analytic_gaussian_gram


def hermite_basis_1d(degree):
    """Analytically exact orthonormal basis for a standard normal input."""
    s = multi_index_set(1, 1, degree)
    return whiten(analytic_gaussian_gram(s), s)


def hermite_basis_2d(interaction, degree):
    s = multi_index_set(2, interaction, degree)
    return whiten(analytic_gaussian_gram(s), s)


@pytest.fixture(scope="module")
def corr09():
    return InputModel([Gaussian(0, 2), Gaussian(0, 2)], [[1, 0.9], [0.9, 1]])


class TestKernels:
    def test_coincident_points(self):
        k = KernelSpec("gaussian", np.array([1.0, 2.0]))
        assert autocorrelation([0.0, 0.0], k) == 1.0

    def test_gaussian_single_term(self):
        k = KernelSpec("gaussian", np.array([1.0, 1.0]))
        assert autocorrelation([1.0, 0.0], k) == pytest.approx(math.exp(-1), rel=1e-15)

    def test_exponential_hand_value(self):
        k = KernelSpec("exponential", np.array([2.0]))
        assert autocorrelation([1.0], k) == pytest.approx(math.exp(-0.5), rel=1e-15)

    def test_rejects_nonpositive_theta(self):
        with pytest.raises(ValueError):
            KernelSpec("gaussian", np.array([1.0, 0.0]))

    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            KernelSpec("matern", np.array([1.0]))

    def test_correlation_matrix_unit_diagonal(self):
        pts = np.random.default_rng(0).normal(size=(40, 2))
        corr = correlation_matrix(pts, KernelSpec("exponential", np.array([1.0, 1.0])))
        np.testing.assert_array_equal(np.diag(corr), np.ones(40))
        assert np.array_equal(corr, corr.T)


class TestFitting:
    def test_exact_linear_trend_recovery(self):
        basis = hermite_basis_1d(1)
        x = np.linspace(-2, 2, 10)[:, None]
        y = 1.0 + 2.0 * x[:, 0]
        held_out = np.linspace(-1.7, 1.9, 5)[:, None]
        for mode in ("chaos", "chaos_kriging"):
            sur = fit(x, y, basis, mode=mode, seed=0)
            means, _ = sur.predict_batch(held_out)
            np.testing.assert_allclose(means, 1.0 + 2.0 * held_out[:, 0], atol=1e-6)
            assert sur.process_variance < 1e-10

    def test_kriging_interpolates_training_data(self):
        basis = hermite_basis_2d(1, 2)
        rng = np.random.default_rng(5)
        x = rng.normal(size=(25, 2))
        y = np.sin(x[:, 0]) + x[:, 1] ** 2
        sur = fit(x, y, basis, seed=1)
        means, variances = sur.predict_batch(x)
        np.testing.assert_allclose(means, y, rtol=1e-8)
        assert np.max(variances) < 1e-10 * max(sur.process_variance, 1.0)

    def test_constant_outputs(self):
        basis = hermite_basis_1d(2)
        x = np.linspace(-2, 2, 9)[:, None]
        y = np.full(9, 5.0)
        sur = fit(x, y, basis, mode="chaos", seed=0)
        np.testing.assert_allclose(sur.coefficients, [5.0, 0.0, 0.0], atol=1e-10)
        means, _ = sur.predict_batch(np.array([[0.3], [1.4]]))
        np.testing.assert_allclose(means, 5.0, atol=1e-10)

    def test_chaos_mode_zero_variance(self):
        basis = hermite_basis_1d(2)
        x = np.linspace(-2, 2, 9)[:, None]
        sur = fit(x, np.sin(x[:, 0]), basis, mode="chaos", seed=0)
        _, variances = sur.predict_batch(np.linspace(-3, 3, 11)[:, None])
        np.testing.assert_array_equal(variances, 0.0)

    def test_far_field_prediction(self):
        basis = hermite_basis_1d(1)
        x = np.linspace(-1, 1, 6)[:, None]
        y = 2.0 + x[:, 0]
        sur = fit(x, y, basis, theta=[0.1], seed=0)
        far = np.array([[50.0]])
        r = cross_correlation(far, x, sur.kernel)
        assert np.max(r) < 1e-12
        pred = sur.predict(far[0])
        psi = basis.evaluate(far[0])
        assert pred.mean == pytest.approx(float(psi @ sur.coefficients), rel=1e-10)
        assert pred.variance >= sur.process_variance

    def test_too_few_samples_rejected(self):
        basis = hermite_basis_1d(3)
        x = np.linspace(0, 1, 3)[:, None]
        with pytest.raises(ValueError, match="basis functions"):
            fit(x, np.ones(3), basis)

    def test_duplicate_inputs_rejected_in_kriging_mode(self):
        basis = hermite_basis_1d(1)
        x = np.array([[0.0], [1.0], [1.0], [2.0]])
        with pytest.raises(DegenerateTrainingError):
            fit(x, np.arange(4.0), basis)

    def test_rank_deficient_design_rejected(self):
        from tailrisk import ConditioningError

        # all training points share x2, so the x2 basis column collapses
        basis = hermite_basis_2d(1, 1)
        x = np.column_stack([np.linspace(-1, 1, 8), np.zeros(8)])
        with pytest.raises(ConditioningError):
            fit(x, np.sin(x[:, 0]), basis, mode="chaos")

    def test_gls_equals_ols_when_correlation_is_identity(self):
        basis = hermite_basis_1d(2)
        rng = np.random.default_rng(8)
        x = np.sort(rng.uniform(-2, 2, 12))[:, None]
        y = rng.normal(size=12)
        # theta far below the minimum spacing underflows every off-diagonal
        # correlation to exactly zero, so R is the identity bit-for-bit.
        sur = fit(x, y, basis, theta=[1e-3], seed=0)
        corr = correlation_matrix(x, sur.kernel)
        assert np.array_equal(corr, np.eye(12))
        ols = np.linalg.lstsq(basis.evaluate(x), y, rcond=None)[0]
        np.testing.assert_allclose(sur.coefficients, ols, atol=1e-10)

    def test_polynomial_reproduction_any_kernel(self):
        basis = hermite_basis_2d(2, 2)
        rng = np.random.default_rng(11)
        x = rng.normal(size=(30, 2))
        coeffs = rng.normal(size=len(basis))
        y = basis.evaluate(x) @ coeffs
        test_pts = rng.normal(size=(40, 2))
        truth = basis.evaluate(test_pts) @ coeffs
        for kind in ("gaussian", "exponential"):
            sur = fit(x, y, basis, kernel_kind=kind, seed=2)
            means, _ = sur.predict_batch(test_pts)
            np.testing.assert_allclose(means, truth, atol=1e-6)

    def test_variance_nonnegative_before_clamp(self):
        basis = hermite_basis_2d(1, 2)
        rng = np.random.default_rng(13)
        x = rng.normal(size=(40, 2))
        y = np.cos(2 * x[:, 0]) * x[:, 1]
        sur = fit(x, y, basis, seed=3)
        pts = rng.normal(size=(1000, 2))
        _, raw = sur.predict_batch(pts, clamp=False)
        assert np.min(raw) >= -1e-9


class TestLooCv:
    def test_zero_outputs(self):
        x = np.linspace(0, 1, 8)[:, None]
        assert loo_cv_objective([0.5], x, np.zeros(8)) == 0.0

    def test_two_point_closed_form(self):
        # r = exp(-(dx/theta)^2) = 0.5 for dx = 1
        theta = 1.0 / math.sqrt(math.log(2.0))
        x = np.array([[0.0], [1.0]])
        b = np.ones(2)
        expected = (1 - 0.5) ** 2 + (1 - 0.5) ** 2
        assert loo_cv_objective([theta], x, b) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("kind", ["gaussian", "exponential"])
    def test_brute_force_loo_oracle(self, kind):
        rng = np.random.default_rng(21)
        x = rng.uniform(-1, 1, size=(12, 2))
        b = np.sin(2 * x[:, 0]) + 0.5 * x[:, 1]
        theta = np.array([0.7, 0.9])
        kernel = KernelSpec(kind, theta)

        brute = 0.0
        for left_out in range(len(b)):
            keep = [i for i in range(len(b)) if i != left_out]
            corr = correlation_matrix(x[keep], kernel)
            r = cross_correlation(x[left_out][None, :], x[keep], kernel)[0]
            pred = r @ cho_solve(cho_factor(corr, lower=True), b[keep])
            brute += (b[left_out] - pred) ** 2

        assert loo_cv_objective(theta, x, b, kind) == pytest.approx(brute, abs=1e-8)

    def test_singular_correlation_returns_penalty(self):
        x = np.array([[0.0], [1e-9], [1.0]])
        b = np.array([1.0, 2.0, 3.0])
        value = loo_cv_objective([1e4], x, b)
        assert np.isfinite(value) and value > 1e20


class TestOptimizeTheta:
    def test_constant_objective_stays_in_bounds(self):
        x = np.linspace(0, 1, 8)[:, None]
        bounds = np.array([[0.1, 10.0]])
        theta = optimize_theta(x, np.zeros(8), bounds=bounds, restarts=2, seed=0)
        assert 0.1 <= theta[0] <= 10.0
        assert loo_cv_objective(theta, x, np.zeros(8)) == 0.0

    def test_beats_log_grid(self):
        rng = np.random.default_rng(31)
        x = np.sort(rng.uniform(-2, 2, 25))[:, None]
        b = np.sin(3 * x[:, 0]) + 0.1 * x[:, 0] ** 2
        bounds = np.array([[0.05, 5.0]])
        theta, info = optimize_theta(
            x, b, bounds=bounds, restarts=5, seed=4, full_output=True
        )
        grid = np.geomspace(0.05, 5.0, 50)
        grid_best = min(loo_cv_objective([t], x, b) for t in grid)
        assert info["objective"] <= grid_best + 1e-12

    def test_restart_monotonicity(self):
        rng = np.random.default_rng(41)
        x = rng.uniform(-2, 2, size=(20, 2))
        b = np.cos(x[:, 0]) * x[:, 1]
        _, one = optimize_theta(x, b, restarts=1, seed=9, full_output=True)
        _, five = optimize_theta(x, b, restarts=5, seed=9, full_output=True)
        assert five["objective"] <= one["objective"]

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(51)
        x = rng.uniform(-1, 1, size=(15, 2))
        b = x[:, 0] ** 2 - x[:, 1]
        t1 = optimize_theta(x, b, restarts=3, seed=7)
        t2 = optimize_theta(x, b, restarts=3, seed=7)
        np.testing.assert_array_equal(t1, t2)

    def test_rejects_bad_bounds(self):
        x = np.linspace(0, 1, 5)[:, None]
        with pytest.raises(ValueError):
            optimize_theta(x, np.ones(5), bounds=np.array([[0.0, 1.0]]))


class TestModeDominance:
    def test_kriging_beats_chaos_on_rastrigin(self, corr09):
        basis = build_basis(corr09, 1, 3, quadrature=200_000, seed=0)
        train = sample(corr09, "mc", 300, seed=123)
        y = rastrigin(train.points)
        krig = fit(train.points, y, basis, seed=5)
        chaos = fit(train.points, y, basis, mode="chaos", seed=5)
        test_pts = sample(corr09, "mc", 1000, seed=321).points
        truth = rastrigin(test_pts)
        mse_krig = np.mean((krig.predict_batch(test_pts)[0] - truth) ** 2)
        mse_chaos = np.mean((chaos.predict_batch(test_pts)[0] - truth) ** 2)
        assert mse_krig <= mse_chaos


class TestSerialization:
    def test_round_trip_predictions_identical(self, tmp_path):
        basis = hermite_basis_2d(1, 2)
        rng = np.random.default_rng(17)
        x = rng.normal(size=(20, 2))
        y = np.sin(x[:, 0]) - x[:, 1]
        sur = fit(x, y, basis, seed=6)
        path = tmp_path / "surrogate.json"
        sur.save(path)
        loaded = FittedSurrogate.load(path)
        pts = rng.normal(size=(30, 2))
        m1, v1 = sur.predict_batch(pts)
        m2, v2 = loaded.predict_batch(pts)
        np.testing.assert_array_equal(m1, m2)
        np.testing.assert_array_equal(v1, v2)
        assert loaded.training_digest() == sur.training_digest()

    def test_version_mismatch(self):
        basis = hermite_basis_1d(1)
        x = np.linspace(0, 1, 4)[:, None]
        sur = fit(x, np.ones(4), basis, mode="chaos")
        payload = sur.to_dict()
        payload["version"] = 99
        with pytest.raises(ArtifactError):
            FittedSurrogate.from_dict(payload)
