"""Latent autoregression with Gaussian-process priors."""

__version__ = "0.1.0"
