"""Numerical laboratory for Wasserstein convergence of empirical measures of diffusions."""

__version__ = "0.1.0"
