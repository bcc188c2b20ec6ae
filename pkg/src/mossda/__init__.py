"""Momentum-encoder semi-supervised domain adaptation for multivariate time series."""

__version__ = "0.1.0"
