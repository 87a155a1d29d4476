"""Desk-scale lab for amortized causal discovery in time series."""

__version__ = "0.1.0"
