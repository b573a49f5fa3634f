"""GP-style prediction from a trained surrogate.

Two equivalent routes. The dense route conditions on the empirical kernel
over the training block:

    mean = m*(X*) + K*f (Kff + sigma2 I)^-1 (y - m*(X))
    cov  = K** - K*f (Kff + sigma2 I)^-1 Kf*

The reduced route stays in the S-dimensional coefficient space: with
features phi(x) = Delta(x)/sqrt(S) and a Gaussian q(a),

    mean = m*(x) + phi(x)^T mu,    var_f = || chol(Sigma)^T phi(x) ||^2.

When q is the exact coefficient posterior and the plain averaged kernel is
used, the two routes coincide (Woodbury); the reduced one costs O(S^3)
instead of O(N^3).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, NumericalError, ParameterError
from .inference import LOG_2PI, CoefficientPosterior, TrainedModel, _check_sigma2
from .numkit import STREAM_PREDICT, Rng, as_matrix, as_vector, chol_solve, cholesky, solve_triangular
from .priors import FunctionDraws, sample_functions

_VAR_FLOOR = -1e-10  # anything below this is an error, above is clamped to 0


@dataclass
class PredictiveDistribution:
    """Per-point Gaussian predictions; ``cov`` is the full latent covariance
    when requested, else None. var_y = var_f + sigma2."""

    mean: np.ndarray
    var_f: np.ndarray
    var_y: np.ndarray
    sigma2: float
    cov: np.ndarray | None = None

    def __len__(self):
        return self.mean.shape[0]


def _finish(mean, var_f, sigma2, cov=None) -> PredictiveDistribution:
    mean = as_vector(np.asarray(mean, float), "predictive mean")
    var_f = np.asarray(var_f, float)
    if var_f.shape != mean.shape:
        raise DimensionError("mean and var_f must have matching shapes")
    low = float(var_f.min()) if var_f.size else 0.0
    if not np.all(np.isfinite(var_f)) or low < _VAR_FLOOR:
        raise NumericalError(f"predictive variance broke its floor: min {low:.3e}")
    var_f = np.maximum(var_f, 0.0)
    sigma2 = _check_sigma2(sigma2)
    return PredictiveDistribution(mean, var_f, var_f + sigma2, sigma2, cov)


def exact_coefficient_posterior(b, y_centered, sigma2: float) -> CoefficientPosterior:
    """Conjugate posterior over a in y = B a + eps, a ~ N(0, I), eps ~ N(0, sigma2 I).

    mu = (B^T B + sigma2 I)^-1 B^T y,  Sigma = sigma2 (B^T B + sigma2 I)^-1.
    """
    b = as_matrix(b, "feature matrix")
    y = as_vector(y_centered, "centered targets")
    if b.shape[0] != y.shape[0]:
        raise DimensionError(f"{b.shape[0]} feature rows vs {y.shape[0]} targets")
    sigma2 = _check_sigma2(sigma2)
    s = b.shape[1]
    a = b.T @ b + sigma2 * np.eye(s)
    la = cholesky((a + a.T) / 2.0)
    mu = chol_solve(la, b.T @ y)
    sig = sigma2 * chol_solve(la, np.eye(s))
    return CoefficientPosterior(mu, cholesky((sig + sig.T) / 2.0))


def _kernel_pieces(draws: FunctionDraws, estimator: str, psi: float, nu):
    s = draws.num_draws
    if estimator == "mle":
        return 1.0 / s, 0.0
    if estimator == "pm":
        if psi < 0:
            raise ParameterError(f"psi must be >= 0, got {psi}")
        n_eval = draws.eval_count
        nu_val = float(n_eval if nu is None else nu)
        denom = nu_val + s - n_eval - 1
        if denom <= 0:
            raise ParameterError(
                f"posterior-mean denominator nu + S - N - 1 = {denom:g} must be positive"
            )
        return 1.0 / denom, psi / denom
    raise ParameterError(f"unknown estimator {estimator!r}")


def predict_dense(
    draws_train: FunctionDraws,
    draws_test: FunctionDraws,
    y_train,
    sigma2: float,
    estimator: str = "mle",
    psi: float = 0.0,
    nu=None,
    want_cov: bool = False,
) -> PredictiveDistribution:
    """Condition the empirical-kernel GP on the training block directly.

    Both draw sets must be column slices of one joint evaluation (same draws,
    same normalization) so the cross-kernel is consistent.
    """
    if draws_train.is_symbolic or draws_test.is_symbolic:
        raise ContractError("prediction works on numeric draw sets")
    if draws_train.num_draws != draws_test.num_draws:
        raise ContractError("train and test draw sets disagree on S")
    if draws_train.eval_count != draws_test.eval_count:
        raise ContractError("train and test draw sets come from different joint evaluations")
    y = as_vector(y_train, "targets")
    n = draws_train.num_points
    if y.shape[0] != n:
        raise DimensionError(f"{n} training columns vs {y.shape[0]} targets")
    sigma2 = _check_sigma2(sigma2)
    scale, ridge = _kernel_pieces(draws_train, estimator, psi, nu)

    dt = draws_train.deltas
    ds = draws_test.deltas
    kff = dt.T @ dt * scale + ridge * np.eye(n)
    ksf = ds.T @ dt * scale
    kss_diag = np.einsum("sk,sk->k", ds, ds) * scale + ridge

    la = cholesky((kff + kff.T) / 2.0 + sigma2 * np.eye(n))
    alpha = chol_solve(la, y - draws_train.mean[0])
    mean = draws_test.mean[0] + ksf @ alpha
    v = solve_triangular(la, ksf.T)
    var_f = kss_diag - np.einsum("nk,nk->k", v, v)
    cov = None
    if want_cov:
        kss = ds.T @ ds * scale + ridge * np.eye(draws_test.num_points)
        cov = kss - v.T @ v
        cov = (cov + cov.T) / 2.0
    return _finish(mean, var_f, sigma2, cov)


def predict_features(
    draws_test: FunctionDraws,
    q: CoefficientPosterior,
    sigma2: float,
    want_cov: bool = False,
) -> PredictiveDistribution:
    """Reduced-rank prediction through the coefficient posterior."""
    if draws_test.is_symbolic:
        raise ContractError("prediction works on numeric draw sets")
    s = draws_test.num_draws
    if q.dim != s:
        raise DimensionError(f"q has dimension {q.dim}, draws have S={s}")
    sigma2 = _check_sigma2(sigma2)
    phi = draws_test.deltas.T / math.sqrt(s)  # (K, S)
    mean = draws_test.mean[0] + phi @ q.mu
    a = phi @ q.chol
    var_f = np.einsum("ks,ks->k", a, a)
    cov = a @ a.T if want_cov else None
    return _finish(mean, var_f, sigma2, cov)


def posterior_predict(
    model: TrainedModel,
    x_test,
    mode: str | None = None,
    num_draws: int | None = None,
    want_cov: bool = False,
) -> PredictiveDistribution:
    """Predict at new inputs from a trained model.

    ``mode``: 'exact' re-derives the coefficient posterior from a fresh
    fixed-seed draw set over [train; test]; 'learned' reuses the trained
    q(a); 'auto' (default, from the config) picks exact up to 2000 training
    points. The prediction stream depends only on the master seed, so
    training length cannot shift it.
    """
    x_test = as_matrix(x_test, "test inputs")
    n = model.train_x.shape[0]
    if x_test.shape[1] != model.train_x.shape[1]:
        raise DimensionError(
            f"test inputs have {x_test.shape[1]} columns, training had {model.train_x.shape[1]}"
        )
    mode = model.config.coeff_mode if mode is None else mode
    if mode == "auto":
        mode = "exact" if n <= 2000 else "learned"
    if mode not in ("exact", "learned"):
        raise ParameterError(f"unknown prediction mode {mode!r}")
    s = int(num_draws) if num_draws is not None else int(model.config.num_draws)
    rng = Rng(model.seed, STREAM_PREDICT)
    cfg = model.config

    if mode == "learned":
        if s != model.q.dim:
            raise ContractError(
                f"learned mode is tied to the trained S={model.q.dim}, got num_draws={s}"
            )
        draws_test = sample_functions(model.prior, x_test, s, rng)
        return predict_features(draws_test, model.q, model.sigma2, want_cov=want_cov)

    joint = sample_functions(
        model.prior, np.vstack([model.train_x, x_test]), s, rng
    )
    dt = joint.slice_columns(0, n)
    dtest = joint.slice_columns(n, n + x_test.shape[0])
    if cfg.estimator == "pm":
        return predict_dense(
            dt, dtest, model.train_y, model.sigma2,
            estimator="pm", psi=cfg.psi, nu=cfg.nu, want_cov=want_cov,
        )
    b = dt.deltas.T / math.sqrt(s)
    q = exact_coefficient_posterior(b, model.train_y - dt.mean[0], model.sigma2)
    return predict_features(dtest, q, model.sigma2, want_cov=want_cov)


def nll_rmse(pred: PredictiveDistribution, y_true, stats=None) -> dict:
    """Average negative log likelihood and RMSE of the observation predictions.

    With ``stats`` the predictions are mapped back to the original target
    scale first; ``y_true`` is then expected in original units.
    """
    y = as_vector(y_true, "true targets")
    if y.shape[0] != len(pred):
        raise DimensionError(f"{len(pred)} predictions vs {y.shape[0]} targets")
    mean = pred.mean
    var = pred.var_y
    if stats is not None:
        sd = stats.target_std
        mean = mean * sd + stats.target_mean
        var = var * sd * sd
    if np.any(var <= 0):
        raise ContractError("observation variance must be positive for the NLL")
    nll = float(np.mean(0.5 * (LOG_2PI + np.log(var)) + (y - mean) ** 2 / (2 * var)))
    rmse = float(np.sqrt(np.mean((y - mean) ** 2)))
    return {"nll": nll, "rmse": rmse}
