import math

import numpy as np
import pytest

from vip import autodiff as ad
from vip import predict as pr
from vip.errors import ContractError, DimensionError, NumericalError, ParameterError
from vip.inference import (
    SOFTPLUS_INV_ONE,
    CoefficientPosterior,
    TrainConfig,
    energy_loss,
    train,
)
from vip.numkit import STREAM_PREDICT, Rng
from vip.predict import (
    exact_coefficient_posterior,
    nll_rmse,
    posterior_predict,
    predict_dense,
    predict_features,
)
from vip.priors import FunctionDraws, init_prior, sample_functions

LOG_2PI = math.log(2 * math.pi)


class TestExactCoefficientPosterior:
    def test_scalar_hand_case(self):
        # B=[[1]], y=[2], sigma2=1: A=2, mu=1, Sigma=1/2
        q = exact_coefficient_posterior(np.array([[1.0]]), np.array([2.0]), 1.0)
        assert q.mu[0] == pytest.approx(1.0)
        assert q.cov()[0, 0] == pytest.approx(0.5)

    def test_matches_normal_equations(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            n, s = int(rng.integers(3, 12)), int(rng.integers(1, 6))
            b = rng.standard_normal((n, s))
            y = rng.standard_normal(n)
            sig2 = 0.1 + rng.random()
            q = exact_coefficient_posterior(b, y, sig2)
            a = b.T @ b + sig2 * np.eye(s)
            np.testing.assert_allclose(q.mu, np.linalg.solve(a, b.T @ y), atol=1e-10)
            np.testing.assert_allclose(q.cov(), sig2 * np.linalg.inv(a), atol=1e-10)

    def test_no_data_returns_prior(self):
        q = exact_coefficient_posterior(np.zeros((0, 3)), np.zeros(0), 0.7)
        np.testing.assert_allclose(q.mu, np.zeros(3), atol=1e-14)
        np.testing.assert_allclose(q.cov(), np.eye(3), atol=1e-12)

    def test_small_noise_approaches_least_squares(self):
        rng = np.random.default_rng(1)
        b = rng.standard_normal((20, 3))
        y = rng.standard_normal(20)
        q = exact_coefficient_posterior(b, y, 1e-10)
        ols = np.linalg.lstsq(b, y, rcond=None)[0]
        np.testing.assert_allclose(q.mu, ols, atol=1e-6)
        assert np.abs(q.cov()).max() < 1e-8

    def test_posterior_contracts_feature_variance(self):
        # phi^T Sigma phi <= phi^T phi for every direction (Sigma <= I)
        rng = np.random.default_rng(2)
        for _ in range(1000):
            n, s = int(rng.integers(1, 8)), int(rng.integers(1, 5))
            b = rng.standard_normal((n, s))
            q = exact_coefficient_posterior(b, rng.standard_normal(n), 0.05 + rng.random())
            phi = rng.standard_normal(s)
            assert phi @ q.cov() @ phi <= phi @ phi + 1e-10


def joint_draws(seed=0, n_train=6, n_test=3, s=8):
    # widen init scales so small-S kernels stay well conditioned
    prior = init_prior("bnn", 1, (4,), "tanh", Rng(seed, 0))
    wide = {
        k: v + math.log(10.0) if "log_scale" in k else v
        for k, v in prior.param_items()
    }
    prior = prior.with_params(wide)
    x = np.linspace(-2, 2, n_train + n_test).reshape(-1, 1)
    joint = sample_functions(prior, x, s, Rng(seed, 1))
    return joint.slice_columns(0, n_train), joint.slice_columns(n_train, n_train + n_test)


class TestPredictDense:
    def test_matches_hand_gp_formulas(self):
        rng = np.random.default_rng(3)
        joint = FunctionDraws.from_matrix(rng.standard_normal((7, 6)))
        dt, ds = joint.slice_columns(0, 4), joint.slice_columns(4, 6)
        y = rng.standard_normal(4)
        sig2 = 0.3
        got = predict_dense(dt, ds, y, sig2, want_cov=True)
        k = joint.deltas.T @ joint.deltas / joint.num_draws
        kff, ksf, kss = k[:4, :4], k[4:, :4], k[4:, 4:]
        a_inv = np.linalg.inv(kff + sig2 * np.eye(4))
        mean = joint.mean[0, 4:] + ksf @ a_inv @ (y - joint.mean[0, :4])
        cov = kss - ksf @ a_inv @ ksf.T
        np.testing.assert_allclose(got.mean, mean, atol=1e-10)
        np.testing.assert_allclose(got.var_f, np.diag(cov), atol=1e-10)
        np.testing.assert_allclose(got.cov, cov, atol=1e-10)
        np.testing.assert_allclose(got.var_y, got.var_f + sig2, atol=1e-14)

    def test_reduces_to_prior_far_from_data(self):
        # kernel row of an unrelated test point ~ 0 -> prediction ~ prior moments
        rng = np.random.default_rng(4)
        d = rng.standard_normal((10, 3))
        d[:, 2] = rng.standard_normal(10) * 2.0
        f = d + 5.0
        joint = FunctionDraws.from_matrix(f)
        joint.deltas[:, 2] -= joint.deltas[:, 2].mean()
        joint.deltas[:, :2] = np.linalg.qr(joint.deltas[:, :2])[0] * 3
        joint.deltas[:, 2] -= joint.deltas[:, :2] @ (
            np.linalg.lstsq(joint.deltas[:, :2], joint.deltas[:, 2], rcond=None)[0]
        )
        dt, ds = joint.slice_columns(0, 2), joint.slice_columns(2, 3)
        got = predict_dense(dt, ds, np.array([4.0, 6.0]), 0.1)
        prior_var = float(ds.deltas[:, 0] @ ds.deltas[:, 0]) / joint.num_draws
        assert got.mean[0] == pytest.approx(joint.mean[0, 2], abs=1e-8)
        assert got.var_f[0] == pytest.approx(prior_var, abs=1e-8)

    def test_interpolates_at_tiny_noise(self):
        dt, ds = joint_draws(seed=5, n_train=5, n_test=0, s=12)
        y = np.sin(np.arange(5.0))
        got = predict_dense(dt, dt, y, 1e-10)
        np.testing.assert_allclose(got.mean, y, atol=1e-4)

    def test_adding_a_training_point_never_increases_variance(self):
        rng = np.random.default_rng(6)
        for trial in range(100):
            s = int(rng.integers(4, 10))
            n = int(rng.integers(2, 6))
            joint = FunctionDraws.from_matrix(rng.standard_normal((s, n + 3)))
            y = rng.standard_normal(n + 1)
            test = joint.slice_columns(n + 1, n + 3)
            small = predict_dense(joint.slice_columns(0, n), test, y[:n], 0.2)
            big = predict_dense(joint.slice_columns(0, n + 1), test, y, 0.2)
            assert np.all(big.var_f <= small.var_f + 1e-8)

    def test_pm_ridge_inflates_variance(self):
        dt, ds = joint_draws(seed=7)
        y = np.zeros(dt.num_points)
        plain = predict_dense(dt, ds, y, 0.1, estimator="pm", psi=0.0)
        ridged = predict_dense(dt, ds, y, 0.1, estimator="pm", psi=0.5)
        assert np.all(ridged.var_f >= plain.var_f - 1e-12)
        assert ridged.var_f.max() > plain.var_f.max()

    def test_mixed_joint_evaluations_rejected(self):
        dt, _ = joint_draws(seed=8)  # joint has 9 columns
        _, ds_other = joint_draws(seed=8, n_train=5, n_test=5)  # 10 columns
        with pytest.raises(ContractError):
            predict_dense(dt, ds_other, np.zeros(dt.num_points), 0.1)
        _, ds_fewer = joint_draws(seed=8, s=5)
        with pytest.raises(ContractError):
            predict_dense(dt, ds_fewer, np.zeros(dt.num_points), 0.1)

    def test_target_length_checked(self):
        dt, ds = joint_draws(seed=9)
        with pytest.raises(DimensionError):
            predict_dense(dt, ds, np.zeros(dt.num_points - 1), 0.1)


class TestWoodburyEquivalence:
    def test_dense_and_reduced_agree(self):
        for seed in range(5):
            dt, ds = joint_draws(seed=seed, n_train=7, n_test=4, s=6)
            rng = np.random.default_rng(seed)
            y = rng.standard_normal(7)
            sig2 = 0.15 + 0.1 * seed
            dense = predict_dense(dt, ds, y, sig2, want_cov=True)
            b = dt.deltas.T / math.sqrt(dt.num_draws)
            q = exact_coefficient_posterior(b, y - dt.mean[0], sig2)
            red = predict_features(ds, q, sig2, want_cov=True)
            np.testing.assert_allclose(red.mean, dense.mean, atol=1e-8)
            np.testing.assert_allclose(red.var_f, dense.var_f, atol=1e-8)
            np.testing.assert_allclose(red.cov, dense.cov, atol=1e-8)

    def test_elbo_at_exact_posterior_equals_log_marginal(self):
        # conjugate check stitching training loss, exact posterior and the
        # function-space marginal together: at q = posterior and alpha = 0,
        # loss = -log N(y; m*, B B^T + sigma2 I)
        n, s, sig2 = 5, 3, 0.2
        prior = init_prior("bnn", 1, (3,), "tanh", Rng(4, 0))
        x = np.linspace(-1, 1, n).reshape(-1, 1)
        numeric = sample_functions(prior, x, s, Rng(5, 0))
        b = numeric.deltas.T / math.sqrt(s)
        y = np.sin(2 * x[:, 0])
        resid = y - numeric.mean[0]
        q = exact_coefficient_posterior(b, resid, sig2)

        tape = ad.Tape()
        leaves = {k: tape.leaf(a, requires_grad=True) for k, a in prior.param_items()}
        draws = sample_functions(prior, x, s, Rng(5, 0), tape=tape, params=leaves)
        diag = np.diag(q.chol)
        leaves["q_mu"] = tape.leaf(q.mu.reshape(-1, 1), requires_grad=True)
        leaves["q_tril"] = tape.leaf(np.tril(q.chol, -1), requires_grad=True)
        leaves["q_diag"] = tape.leaf(
            np.log(np.expm1(diag)).reshape(-1, 1), requires_grad=True
        )
        loss, _ = energy_loss(tape, y, draws, leaves, 0.0, math.log(sig2), n)

        kyy = b @ b.T + sig2 * np.eye(n)
        sign, logdet = np.linalg.slogdet(kyy)
        log_marginal = -0.5 * (n * LOG_2PI + logdet + resid @ np.linalg.solve(kyy, resid))
        assert loss.value[0, 0] == pytest.approx(-log_marginal, rel=1e-8)

        # and no other q does better than the exact posterior at alpha=0
        rng = np.random.default_rng(0)
        for _ in range(5):
            t2 = ad.Tape()
            l2 = {k: t2.leaf(a, requires_grad=True) for k, a in prior.param_items()}
            d2 = sample_functions(prior, x, s, Rng(5, 0), tape=t2, params=l2)
            l2["q_mu"] = t2.leaf(rng.standard_normal((s, 1)), requires_grad=True)
            l2["q_tril"] = t2.leaf(0.3 * rng.standard_normal((s, s)), requires_grad=True)
            l2["q_diag"] = t2.leaf(rng.standard_normal((s, 1)), requires_grad=True)
            other, _ = energy_loss(t2, y, d2, l2, 0.0, math.log(sig2), n)
            assert other.value[0, 0] >= loss.value[0, 0] - 1e-10


class TestPredictFeatures:
    def test_standard_q_reproduces_prior_moments(self):
        _, ds = joint_draws(seed=10)
        s = ds.num_draws
        got = predict_features(ds, CoefficientPosterior.standard(s), 0.1)
        np.testing.assert_allclose(got.mean, ds.mean[0], atol=1e-12)
        want_var = np.einsum("sk,sk->k", ds.deltas, ds.deltas) / s
        np.testing.assert_allclose(got.var_f, want_var, atol=1e-12)

    def test_dimension_mismatch(self):
        _, ds = joint_draws(seed=11, s=6)
        with pytest.raises(DimensionError):
            predict_features(ds, CoefficientPosterior.standard(5), 0.1)


class TestVarianceFloor:
    def test_tiny_negative_clamped(self):
        pred = pr._finish(np.zeros(2), np.array([1e-12, -5e-11]), 0.3)
        assert pred.var_f[1] == 0.0
        assert pred.var_y[1] == pytest.approx(0.3)

    def test_large_negative_raises(self):
        with pytest.raises(NumericalError):
            pr._finish(np.zeros(1), np.array([-1e-6]), 0.3)


class TestNllRmse:
    def test_hand_case(self):
        pred = pr.PredictiveDistribution(
            np.array([0.0]), np.array([0.0]), np.array([1.0]), 1.0
        )
        out = nll_rmse(pred, np.array([2.0]))
        assert out["nll"] == pytest.approx(0.5 * LOG_2PI + 2.0, rel=1e-12)
        assert out["rmse"] == pytest.approx(2.0)

    def test_destandardization(self):
        class Stats:
            target_mean = 1.0
            target_std = 2.0

        pred = pr.PredictiveDistribution(
            np.array([0.0]), np.array([0.0]), np.array([1.0]), 1.0
        )
        out = nll_rmse(pred, np.array([3.0]), stats=Stats())
        want_nll = 0.5 * (LOG_2PI + math.log(4.0)) + 4.0 / 8.0
        assert out["nll"] == pytest.approx(want_nll, rel=1e-12)
        assert out["rmse"] == pytest.approx(2.0)

    def test_perfect_prediction_nll_floor(self):
        pred = pr.PredictiveDistribution(
            np.zeros(3), np.zeros(3), np.full(3, 0.01), 0.01
        )
        out = nll_rmse(pred, np.zeros(3))
        assert out["nll"] == pytest.approx(0.5 * (LOG_2PI + math.log(0.01)))
        assert out["rmse"] == 0.0

    def test_length_mismatch(self):
        pred = pr.PredictiveDistribution(np.zeros(2), np.zeros(2), np.ones(2), 1.0)
        with pytest.raises(DimensionError):
            nll_rmse(pred, np.zeros(3))


def small_model(**over):
    rng = np.random.default_rng(0)
    x = np.linspace(-1, 1, 14).reshape(-1, 1)
    y = np.cos(3 * x[:, 0]) + 0.05 * rng.standard_normal(14)
    cfg = dict(
        alpha=0.5, num_draws=5, epochs=20, learning_rate=0.02,
        sigma2_mode="fixed", sigma2=0.05, hidden=(4,), seed=2,
    )
    cfg.update(over)
    return train(x, y, TrainConfig(**cfg)), x, y


class TestPosteriorPredict:
    def test_exact_mode_matches_manual_pipeline(self):
        model, x, y = small_model()
        xt = np.linspace(-1.5, 1.5, 6).reshape(-1, 1)
        got = posterior_predict(model, xt, mode="exact")
        joint = sample_functions(
            model.prior, np.vstack([x, xt]), model.config.num_draws,
            Rng(model.seed, STREAM_PREDICT),
        )
        dt = joint.slice_columns(0, 14)
        ds = joint.slice_columns(14, 20)
        want = predict_dense(dt, ds, model.train_y, model.sigma2)
        np.testing.assert_allclose(got.mean, want.mean, atol=1e-8)
        np.testing.assert_allclose(got.var_f, want.var_f, atol=1e-8)

    def test_learned_mode_runs_and_is_deterministic(self):
        model, x, y = small_model()
        xt = np.array([[0.2], [0.4]])
        a = posterior_predict(model, xt, mode="learned")
        b = posterior_predict(model, xt, mode="learned")
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.var_y, b.var_y)

    def test_auto_resolves_to_exact_at_desk_scale(self):
        model, x, y = small_model()
        xt = np.array([[0.0]])
        auto = posterior_predict(model, xt)  # coeff_mode auto by default
        exact = posterior_predict(model, xt, mode="exact")
        np.testing.assert_array_equal(auto.mean, exact.mean)

    def test_pm_estimator_routes_through_dense(self):
        model, x, y = small_model(estimator="pm", psi=0.1)
        xt = np.array([[0.3]])
        out = posterior_predict(model, xt, mode="exact")
        assert np.isfinite(out.mean).all() and np.isfinite(out.var_y).all()

    def test_learned_mode_pins_draw_count(self):
        model, x, y = small_model()
        with pytest.raises(ContractError):
            posterior_predict(model, np.array([[0.0]]), mode="learned", num_draws=9)

    def test_exact_mode_allows_more_draws(self):
        model, x, y = small_model()
        out = posterior_predict(model, np.array([[0.0]]), mode="exact", num_draws=30)
        assert len(out) == 1

    def test_bad_mode(self):
        model, x, y = small_model()
        with pytest.raises(ParameterError):
            posterior_predict(model, np.array([[0.0]]), mode="mcmc")

    def test_feature_dim_mismatch(self):
        model, x, y = small_model()
        with pytest.raises(DimensionError):
            posterior_predict(model, np.zeros((2, 3)))
