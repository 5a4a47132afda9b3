"""Bayesian adaptive trial simulation with an ordinal endpoint."""

__version__ = "0.1.0"
