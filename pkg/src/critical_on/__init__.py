"""Numerical laboratory for the critical mean-field O(N) spin model."""

__version__ = "0.1.0"
