"""Exact Gaussian process regression with an RBF kernel.

Reference baseline: zero prior mean (targets come standardized), predictive
moments by Cholesky conditioning, hyperparameters by exhaustive grid search
over (lengthscale, signal variance, noise variance) on the log marginal
likelihood. A constant 1e-10 jitter is added to every training Gram matrix;
if the factorization still fails it is retried once at 1e-6 before the
pivot error propagates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NotPositiveDefiniteError, ParameterError
from .inference import LOG_2PI, _check_sigma2
from .numkit import as_matrix, as_vector, chol_solve, cholesky, solve_triangular
from .predict import PredictiveDistribution, _finish

_JITTER = 1e-10
_JITTER_RETRY = 1e-6


@dataclass(frozen=True)
class RbfKernel:
    lengthscale: float
    signal_variance: float

    def __post_init__(self):
        if not (self.lengthscale > 0 and math.isfinite(self.lengthscale)):
            raise ParameterError(f"lengthscale must be positive, got {self.lengthscale}")
        if not (self.signal_variance > 0 and math.isfinite(self.signal_variance)):
            raise ParameterError(
                f"signal_variance must be positive, got {self.signal_variance}"
            )

    def gram(self, xa, xb) -> np.ndarray:
        xa = as_matrix(xa, "kernel inputs")
        xb = as_matrix(xb, "kernel inputs")
        if xa.shape[1] != xb.shape[1]:
            raise ParameterError(
                f"kernel inputs disagree on dimension: {xa.shape[1]} vs {xb.shape[1]}"
            )
        sq = (
            np.sum(xa * xa, axis=1)[:, None]
            + np.sum(xb * xb, axis=1)[None, :]
            - 2.0 * xa @ xb.T
        )
        np.maximum(sq, 0.0, out=sq)
        return self.signal_variance * np.exp(-0.5 * sq / (self.lengthscale**2))


def _train_chol(kernel: RbfKernel, x: np.ndarray, sigma2: float) -> np.ndarray:
    kff = kernel.gram(x, x)
    n = x.shape[0]
    base = (kff + kff.T) / 2.0 + sigma2 * np.eye(n)
    try:
        return cholesky(base + _JITTER * np.eye(n))
    except NotPositiveDefiniteError:
        return cholesky(base + _JITTER_RETRY * np.eye(n))


def gp_predict(
    kernel: RbfKernel, x, y, sigma2: float, x_star, want_cov: bool = False
) -> PredictiveDistribution:
    """Closed-form posterior at x_star for f ~ GP(0, k), y = f + N(0, sigma2)."""
    x = as_matrix(x, "training inputs")
    y = as_vector(y, "targets")
    if x.shape[0] != y.shape[0]:
        raise ParameterError(f"{x.shape[0]} input rows vs {y.shape[0]} targets")
    x_star = as_matrix(x_star, "test inputs")
    sigma2 = _check_sigma2(sigma2)
    la = _train_chol(kernel, x, sigma2)
    ksf = kernel.gram(x_star, x)
    mean = ksf @ chol_solve(la, y)
    v = solve_triangular(la, ksf.T)
    var_f = kernel.signal_variance - np.einsum("nk,nk->k", v, v)
    cov = None
    if want_cov:
        cov = kernel.gram(x_star, x_star) - v.T @ v
        cov = (cov + cov.T) / 2.0
    return _finish(mean, var_f, sigma2, cov)


def gp_log_marginal(kernel: RbfKernel, x, y, sigma2: float) -> float:
    """log N(y; 0, K_ff + sigma2 I), via the jittered Cholesky factor."""
    x = as_matrix(x, "training inputs")
    y = as_vector(y, "targets")
    if x.shape[0] != y.shape[0]:
        raise ParameterError(f"{x.shape[0]} input rows vs {y.shape[0]} targets")
    sigma2 = _check_sigma2(sigma2)
    la = _train_chol(kernel, x, sigma2)
    alpha = solve_triangular(la, y)
    n = y.shape[0]
    return float(
        -0.5 * (alpha @ alpha) - np.sum(np.log(np.diag(la))) - 0.5 * n * LOG_2PI
    )


@dataclass(frozen=True)
class GpFit:
    kernel: RbfKernel
    sigma2: float
    log_marginal: float


def gp_fit_grid(x, y, lengthscales, signal_variances, sigma2s) -> GpFit:
    """Exhaustive marginal-likelihood grid search.

    Grids are swept in ascending order, so exact ties resolve to the
    smallest lengthscale, then the smallest sigma2, then the smallest
    signal variance.
    """
    for name, grid in (
        ("lengthscales", lengthscales),
        ("signal_variances", signal_variances),
        ("sigma2s", sigma2s),
    ):
        if len(grid) == 0:
            raise ParameterError(f"{name} grid is empty")
    best = None
    for ls in sorted(float(v) for v in lengthscales):
        for sig2 in sorted(float(v) for v in sigma2s):
            for sv in sorted(float(v) for v in signal_variances):
                kernel = RbfKernel(ls, sv)
                lm = gp_log_marginal(kernel, x, y, sig2)
                if best is None or lm > best.log_marginal:
                    best = GpFit(kernel, sig2, lm)
    return best
