"""Positivity-preserving logarithmic Euler-Maruyama schemes for scalar SDEs."""

__version__ = "0.1.0"
