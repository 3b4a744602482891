"""Fairness-aware spatiotemporal demand forecasting."""

__version__ = "0.1.0"
