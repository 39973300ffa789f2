import math

import numpy as np
import pytest

from tbu.errors import ConfigurationError, NumericError, ShapeError
from tbu.laplace import (PosteriorLinearClassifier, calibrate_lambda,
                         fit_shared_covariance, load_posterior, logit_variance,
                         predict_meanfield, predictive_entropy, save_posterior)
from tbu.numerics import softmax


def random_posterior(rng, f=6, c=3, lam=0.5):
    mu = rng.standard_normal((f, c))
    a = rng.standard_normal((f, f))
    sigma = a @ a.T + np.eye(f)
    return PosteriorLinearClassifier(mu, sigma, lam)


class TestSharedCovariance:
    def test_empty_sum_gives_identity(self):
        cov = fit_shared_covariance(np.empty((0, 4)), np.empty(0))
        assert np.array_equal(cov, np.eye(4))

    def test_single_row_closed_form(self):
        cov = fit_shared_covariance(np.asarray([[1.0, 0.0]]), np.asarray([0.5]))
        assert np.allclose(cov, np.diag([0.8, 1.0]), atol=1e-14)

    def test_inverse_residual_small(self):
        rng = np.random.default_rng(0)
        phi = rng.standard_normal((50, 8))
        p_star = rng.uniform(1 / 3, 1.0, size=50)
        cov = fit_shared_covariance(phi, p_star)
        weights = p_star * (1 - p_star)
        precision = np.eye(8) + (phi * weights[:, None]).T @ phi
        assert np.abs(cov @ precision - np.eye(8)).max() <= 1e-8

    def test_rejects_bad_inputs(self):
        with pytest.raises(NumericError):
            fit_shared_covariance(np.asarray([[np.inf, 0.0]]), np.asarray([0.5]))
        with pytest.raises(NumericError):
            fit_shared_covariance(np.asarray([[1.0, 0.0]]), np.asarray([1.5]))


class TestLogitVariance:
    def test_identity_covariance(self):
        assert logit_variance(np.eye(2), np.asarray([3.0, 4.0])) == 25.0

    def test_zero_feature(self):
        assert logit_variance(np.eye(3), np.zeros(3)) == 0.0

    def test_positive_for_nonzero_features(self):
        # PD matrix built from an explicit eigendecomposition so the
        # smallest eigenvalue lower-bounds the quadratic form
        rng = np.random.default_rng(1)
        q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
        eigenvalues = rng.uniform(0.1, 2.0, size=5)
        sigma = q @ np.diag(eigenvalues) @ q.T
        phi = rng.standard_normal((100, 5))
        v = logit_variance(sigma, phi)
        floor = eigenvalues.min() * (phi ** 2).sum(axis=1)
        assert np.all(v > 0)
        assert np.all(v >= floor - 1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            logit_variance(np.eye(3), np.zeros(4))


class TestMeanFieldPrediction:
    def test_lambda_zero_equals_softmax(self):
        rng = np.random.default_rng(2)
        post = random_posterior(rng, lam=0.0)
        phi = rng.standard_normal((10, 6))
        assert np.array_equal(predict_meanfield(post, phi), softmax(phi @ post.mu))

    def test_zero_variance_equals_softmax(self):
        mu = np.asarray([[1.0, -1.0], [0.5, 0.2]])
        post = PosteriorLinearClassifier(mu, np.eye(2), lam=2.0)
        phi = np.zeros((1, 2))
        assert np.array_equal(predict_meanfield(post, phi), softmax(phi @ mu))

    def test_hand_example(self):
        # logits (2, 0), lam=1, v=3 -> softmax((1, 0))
        mu = np.asarray([[2.0, 0.0], [0.0, 0.0]])
        sigma = np.diag([3.0, 1e-12])
        post = PosteriorLinearClassifier(mu, 0.5 * (sigma + sigma.T), lam=1.0)
        p = predict_meanfield(post, np.asarray([1.0, 0.0]))
        assert p[0] == pytest.approx(0.7310585786300049, abs=1e-12)
        assert p[1] == pytest.approx(0.2689414213699951, abs=1e-12)

    def test_argmax_invariance_and_entropy_monotonicity(self):
        rng = np.random.default_rng(3)
        lams = [0.0, 0.01, 0.3, 1.0, 10.0, 1e4]
        for _ in range(300):
            f, c = int(rng.integers(2, 7)), int(rng.integers(2, 6))
            post = random_posterior(rng, f, c, 0.0)
            phi = rng.standard_normal(f)
            logits = phi @ post.mu
            entropies = []
            for lam in lams:
                p = predict_meanfield(
                    PosteriorLinearClassifier(post.mu, post.sigma_hat, lam), phi)
                assert int(np.argmax(p)) == int(np.argmax(logits))
                entropies.append(predictive_entropy(p))
            diffs = np.diff(entropies)
            assert np.all(diffs >= -1e-12)

    def test_coefficient_dominance(self):
        # p*(1-p*) >= p_c(1-p_c) for every class of the same prediction
        rng = np.random.default_rng(4)
        probs = rng.dirichlet(np.ones(5), size=2000)
        p_star = probs.max(axis=1)
        assert np.all((p_star * (1 - p_star))[:, None] >= probs * (1 - probs) - 1e-15)


class TestCalibrateLambda:
    def test_flat_objective_returns_zero(self):
        mu = np.asarray([[1.0, 0.0], [0.0, 1.0]])
        post_sigma = np.eye(2)
        phi = np.zeros((5, 2))  # v(x) = 0 everywhere
        lam = calibrate_lambda(mu, post_sigma, phi, np.zeros(5, int))
        assert lam == 0.0

    def test_monotone_decreasing_returns_largest_probe(self):
        # single row, logits (4, 0), true class is the low-logit class:
        # softening always helps, so the search hits the upper bound
        mu = np.asarray([[4.0, 0.0], [0.0, 0.0]])
        sigma = np.eye(2)
        phi = np.asarray([[1.0, 0.0]])
        lam = calibrate_lambda(mu, sigma, phi, np.asarray([1]))
        assert lam == 1e4

    def test_never_worse_than_zero_and_matches_grid(self):
        rng = np.random.default_rng(5)
        grid = np.concatenate([[0.0], 10.0 ** np.linspace(-4, 4, 1000)])
        cell = 8.0 / 999.0
        for trial in range(10):
            f, c, n = 6, 3, 200
            mu = 3.0 * rng.standard_normal((f, c))  # overconfident logits
            a = rng.standard_normal((f, f)) / math.sqrt(f)
            sigma = a @ a.T + 0.1 * np.eye(f)
            phi = rng.standard_normal((n, f))
            labels = rng.integers(0, c, size=n)
            lam = calibrate_lambda(mu, sigma, phi, labels)

            logits = phi @ mu
            v = np.einsum("ij,jk,ik->i", phi, sigma, phi)

            def nll(lam_value):
                scaled = logits / np.sqrt(1.0 + lam_value * v)[:, None]
                shifted = scaled - scaled.max(axis=1, keepdims=True)
                log_p = shifted[np.arange(n), labels] \
                    - np.log(np.exp(shifted).sum(axis=1))
                return -log_p.mean()

            assert nll(lam) <= nll(0.0) + 1e-9
            best_grid = grid[int(np.argmin([nll(g) for g in grid]))]
            if lam == 0.0 or best_grid == 0.0:
                assert best_grid <= 10 ** (-4 + cell) and lam <= 10 ** (-4 + cell)
            else:
                assert abs(math.log10(lam) - math.log10(best_grid)) <= cell

    def test_empty_validation_rejected(self):
        with pytest.raises(ConfigurationError):
            calibrate_lambda(np.eye(2), np.eye(2), np.empty((0, 2)), np.empty(0, int))


class TestPredictiveEntropy:
    def test_uniform_ten_classes(self):
        assert predictive_entropy(np.full(10, 0.1)) == pytest.approx(math.log(10),
                                                                     abs=1e-12)

    def test_one_hot_is_zero(self):
        assert predictive_entropy(np.asarray([0.0, 1.0, 0.0])) == 0.0

    def test_fair_coin(self):
        assert predictive_entropy(np.asarray([0.5, 0.5])) == pytest.approx(math.log(2),
                                                                           abs=1e-12)


class TestPosteriorValidation:
    def test_asymmetric_sigma_rejected(self):
        sigma = np.eye(2)
        sigma[0, 1] = 1e-6
        with pytest.raises(NumericError):
            PosteriorLinearClassifier(np.zeros((2, 2)), sigma, 0.0)

    def test_non_pd_sigma_rejected(self):
        with pytest.raises(NumericError):
            PosteriorLinearClassifier(np.zeros((2, 2)), -np.eye(2), 0.0)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigurationError):
            PosteriorLinearClassifier(np.zeros((2, 2)), np.eye(2), -1.0)

    def test_json_round_trip(self, tmp_path):
        post = random_posterior(np.random.default_rng(6))
        path = tmp_path / "posterior.json"
        save_posterior(post, path)
        back = load_posterior(path)
        assert np.array_equal(back.mu, post.mu)
        assert np.array_equal(back.sigma_hat, post.sigma_hat)
        assert back.lam == post.lam
