"""Regularized maximum-likelihood unfolding with covariance estimation."""

__version__ = "0.1.0"
