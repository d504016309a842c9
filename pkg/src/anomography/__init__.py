"""Anomaly detection in partially observed Poisson traffic networks."""

__version__ = "0.1.0"
