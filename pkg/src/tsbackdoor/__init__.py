"""Delayed, per-variable backdoor attacks on multivariate time-series forecasters."""

__version__ = "0.1.0"
