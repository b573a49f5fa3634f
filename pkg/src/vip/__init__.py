"""Function-space Bayesian regression with sampled function priors.

A prior over functions is given implicitly by sampling: draw latent noise,
push inputs through a stochastic network, read off function values. Training
distils S such draws into a Gaussian-process surrogate (empirical mean and
covariance) and fits a Gaussian coefficient posterior by minimizing an
alpha-divergence energy; prediction is GP regression in the resulting
rank-S function space. An exact RBF Gaussian process is included as the
reference baseline, plus a benchmark CLI.
"""

__version__ = "0.1.0"
