"""Deep Bayesian optimal experimental design with conditional normalizing flows."""

__version__ = "0.1.0"
