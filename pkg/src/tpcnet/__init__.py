"""Temporal pointwise convolution networks for ICU time-series prediction."""

__version__ = "0.1.0"
